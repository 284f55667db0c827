//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node to the [`Tape`]; node ids are handed
//! out in creation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Binary arithmetic broadcasts over matrix views: operands may differ in a
//! dimension only when one of them has extent 1 there.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitive operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    /// Column-wise concatenation of any number of matrices with equal row counts.
    Concat,
    /// Columns `start..start + len`.
    Slice { start: usize, len: usize },
    SumAll,
    MeanAll,
    /// Sum over an axis of the matrix view, keeping it as extent 1.
    SumAxis(usize),
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Tanh,
    /// `x` for `x > 0`, `e^x - 1` otherwise.
    Elu,
    Softplus,
    Sigmoid,
    Logit,
    Scale(f64),
    Offset(f64),
    /// `max(x, floor)` with zero gradient wherever the floor is active.
    ClampMin(f64),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::SumAll => "sum",
            Primitive::MeanAll => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::Neg => "neg",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Elu => "elu",
            Primitive::Softplus => "softplus",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Logit => "logit",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
            Primitive::ClampMin(_) => "clamp_min",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                Some(2)
            }
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<Var>,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, vec![], true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, vec![], false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Option<Primitive>, inputs: Vec<Var>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, inputs, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Applies `op` to `inputs`, records it, and returns the output node.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::invalid("inputs", format!("{} takes {n} inputs", op.name())));
            }
        }
        if inputs.is_empty() {
            return Err(Error::invalid("inputs", format!("{} needs inputs", op.name())));
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(op, &vals)?
        };
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, Some(op), inputs.to_vec(), needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { start, len }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::MeanAll, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Neg, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Elu, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn logit(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Logit, &[a])
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Primitive::Scale(k), &[a])
    }
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Primitive::Offset(k), &[a])
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(Primitive::ClampMin(floor), &[a])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let input_vals: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wants: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let in_grads = backward(op, &input_vals, &node.value, &g, &wants);
            for ((v, gi), want) in node.inputs.iter().zip(in_grads).zip(wants) {
                if !want {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, Vec<usize>)> {
    let (ra, ca) = a.dims2();
    let (rb, cb) = b.dims2();
    let pick = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let (Some(r), Some(c)) = (pick(ra, rb), pick(ca, cb)) else {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    };
    let rank = a.shape().len().max(b.shape().len());
    let shape = match rank {
        0 => vec![],
        1 if r == 1 => vec![c],
        1 => vec![r, c],
        _ => vec![r, c],
    };
    Ok((r, c, shape))
}

fn binary_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let (r, c, shape) = broadcast_dims(op, a, b)?;
    let (ra, ca) = a.dims2();
    let (rb, cb) = b.dims2();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i * ca };
        let ib = if rb == 1 { 0 } else { i * cb };
        for j in 0..c {
            let x = ad[ia + if ca == 1 { 0 } else { j }];
            let y = bd[ib + if cb == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::new(shape, out)
}

/// Sums `g` (broadcast output) back down to the shape of `like`.
fn unbroadcast(g: Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        return g;
    }
    let (r, c) = g.dims2();
    let (rl, cl) = like.dims2();
    let mut out = vec![0.0; rl * cl];
    for i in 0..r {
        let io = if rl == 1 { 0 } else { i };
        for j in 0..c {
            let jo = if cl == 1 { 0 } else { j };
            out[io * cl + jo] += g.data()[i * c + j];
        }
    }
    Tensor::new(like.shape().to_vec(), out).expect("unbroadcast preserves element count")
}

fn forward(op: Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let a = x[0];
    let unary = |f: &dyn Fn(f64) -> f64| Ok(a.map(f));
    match op {
        Primitive::MatMul => {
            let b = x[1];
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::shape("matmul", &[a.shape(), b.shape()]));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Tensor::matrix(m, n, gemm(m, k, n, a.data(), b.data()))
        }
        Primitive::Add => binary_map("add", a, x[1], |p, q| p + q),
        Primitive::Sub => binary_map("sub", a, x[1], |p, q| p - q),
        Primitive::Mul => binary_map("mul", a, x[1], |p, q| p * q),
        Primitive::Div => binary_map("div", a, x[1], |p, q| p / q),
        Primitive::Concat => {
            let rows = a.rows();
            if x.iter().any(|t| t.rows() != rows) {
                let shapes: Vec<&[usize]> = x.iter().map(|t| t.shape()).collect();
                return Err(Error::shape("concat", &shapes));
            }
            let cols: usize = x.iter().map(|t| t.cols()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for t in x {
                    out.extend_from_slice(t.row(i));
                }
            }
            Tensor::matrix(rows, cols, out)
        }
        Primitive::Slice { start, len } => {
            let (r, c) = a.dims2();
            if start + len > c {
                return Err(Error::shape("slice", &[a.shape(), &[start, len]]));
            }
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&a.row(i)[start..start + len]);
            }
            Tensor::matrix(r, len, out)
        }
        Primitive::SumAll => Ok(Tensor::scalar(a.data().iter().sum())),
        Primitive::MeanAll => {
            if a.is_empty() {
                return Err(Error::shape("mean", &[a.shape()]));
            }
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
        }
        Primitive::SumAxis(axis) => {
            let (r, c) = a.dims2();
            match axis {
                0 => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        out.iter_mut().zip(a.row(i)).for_each(|(o, v)| *o += v);
                    }
                    Tensor::matrix(1, c, out)
                }
                1 => Tensor::matrix(r, 1, (0..r).map(|i| a.row(i).iter().sum()).collect()),
                _ => Err(Error::invalid("axis", format!("{axis} is not 0 or 1"))),
            }
        }
        Primitive::Neg => unary(&|v| -v),
        Primitive::Exp => unary(&f64::exp),
        Primitive::Log => unary(&f64::ln),
        Primitive::Sqrt => unary(&f64::sqrt),
        Primitive::Square => unary(&|v| v * v),
        Primitive::Relu => unary(&|v| v.max(0.0)),
        Primitive::Tanh => unary(&f64::tanh),
        Primitive::Elu => unary(&elu),
        Primitive::Softplus => unary(&softplus),
        Primitive::Sigmoid => unary(&sigmoid),
        Primitive::Logit => unary(&logit),
        Primitive::Scale(k) => unary(&|v| v * k),
        Primitive::Offset(k) => unary(&|v| v + k),
        Primitive::ClampMin(f) => unary(&|v| v.max(f)),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn backward(op: Primitive, x: &[&Tensor], out: &Tensor, g: &Tensor, wants: &[bool]) -> Vec<Option<Tensor>> {
    let a = x[0];
    // d/da for elementwise unary ops, expressed through the input and output
    let unary = |f: &dyn Fn(f64, f64) -> f64| {
        let data = a.data().iter().zip(out.data()).zip(g.data()).map(|((&xi, &yi), &gi)| gi * f(xi, yi)).collect();
        vec![Some(Tensor::new(a.shape().to_vec(), data).expect("same shape"))]
    };
    match op {
        Primitive::MatMul => {
            let b = x[1];
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let ga = wants[0].then(|| {
                // dA = G B^T
                let mut ga = vec![0.0; m * k];
                gemm_strided(m, n, k, g.data(), (n as isize, 1), b.data(), (1, n as isize), &mut ga, 0.0);
                Tensor::matrix(m, k, ga).expect("sized")
            });
            let gb = wants[1].then(|| {
                // dB = A^T G
                let mut gb = vec![0.0; k * n];
                gemm_strided(k, m, n, a.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb, 0.0);
                Tensor::matrix(k, n, gb).expect("sized")
            });
            vec![ga, gb]
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let b = x[1];
            let same = a.shape() == b.shape() && a.shape() == g.shape();
            let expand = |t: &Tensor| -> Tensor {
                if same {
                    t.clone()
                } else {
                    binary_map("expand", &Tensor::zeros(g.shape()), t, |_, v| v).expect("broadcastable")
                }
            };
            let (ga, gb) = match op {
                Primitive::Add => (g.clone(), g.clone()),
                Primitive::Sub => (g.clone(), g.map(|v| -v)),
                Primitive::Mul => (zip_map(g, &expand(b), |gi, bi| gi * bi), zip_map(g, &expand(a), |gi, ai| gi * ai)),
                Primitive::Div => {
                    let bb = expand(b);
                    let ga = zip_map(g, &bb, |gi, bi| gi / bi);
                    let aa = expand(a);
                    let q = zip_map(&aa, &bb, |ai, bi| -ai / (bi * bi));
                    (ga, zip_map(g, &q, |gi, qi| gi * qi))
                }
                _ => unreachable!(),
            };
            vec![wants[0].then(|| unbroadcast(ga, a)), wants[1].then(|| unbroadcast(gb, b))]
        }
        Primitive::Concat => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            x.iter()
                .zip(wants)
                .map(|(t, &want)| {
                    let c = t.cols();
                    let part = want.then(|| {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        Tensor::new(t.shape().to_vec(), d).expect("sized")
                    });
                    offset += c;
                    part
                })
                .collect()
        }
        Primitive::Slice { start, len } => {
            let (r, c) = a.dims2();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
            }
            vec![Some(Tensor::new(a.shape().to_vec(), d).expect("sized"))]
        }
        Primitive::SumAll => {
            let gv = g.data()[0];
            vec![Some(Tensor::full(a.shape(), gv))]
        }
        Primitive::MeanAll => {
            let gv = g.data()[0] / a.len() as f64;
            vec![Some(Tensor::full(a.shape(), gv))]
        }
        Primitive::SumAxis(_) => {
            let expanded = binary_map("expand", &Tensor::zeros(&[a.rows(), a.cols()]), g, |_, v| v).expect("broadcast");
            vec![Some(expanded.reshape(a.shape().to_vec()).expect("sized"))]
        }
        Primitive::Neg => unary(&|_, _| -1.0),
        Primitive::Exp => unary(&|_, y| y),
        Primitive::Log => unary(&|v, _| 1.0 / v),
        Primitive::Sqrt => unary(&|_, y| 0.5 / y),
        Primitive::Square => unary(&|v, _| 2.0 * v),
        Primitive::Relu => unary(&|v, _| if v > 0.0 { 1.0 } else { 0.0 }),
        Primitive::Tanh => unary(&|_, y| 1.0 - y * y),
        Primitive::Elu => unary(&|v, _| if v > 0.0 { 1.0 } else { v.exp() }),
        Primitive::Softplus => unary(&|v, _| sigmoid(v)),
        Primitive::Sigmoid => unary(&|_, y| y * (1.0 - y)),
        Primitive::Logit => unary(&|v, _| 1.0 / (v * (1.0 - v))),
        Primitive::Scale(k) => unary(&|_, _| k),
        Primitive::Offset(_) => unary(&|_, _| 1.0),
        Primitive::ClampMin(f) => unary(&|v, _| if v >= f { 1.0 } else { 0.0 }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn closed_forms_at_reference_points() {
        for &x in &[0.0, 1.0, -1.0, 10.0, -10.0] {
            assert!(close(softplus(x), (1.0 + f64::exp(x)).ln(), 1e-12));
            assert!(close(elu(x), if x > 0.0 { x } else { x.exp() - 1.0 }, 1e-12));
            assert!(close(x.max(0.0), if x > 0.0 { x } else { 0.0 }, 0.0));
        }
        assert!(close(softplus(0.0), std::f64::consts::LN_2, 1e-15));
        assert!(close(elu(-5.0), -0.993_262_053_000_914_7, 1e-12));
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let av = t.constant(a.clone());
        let out = t.matmul(eye, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.square(x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softplus_of_elu_at_zero() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(0.0));
        let e = t.elu(w).unwrap();
        let s = t.softplus(e).unwrap();
        let g = t.backward(s).unwrap();
        assert!(close(g.get(w).unwrap().data()[0], 0.5, 1e-15));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let bias = t.leaf(Tensor::vector(vec![1., 1., 1.]));
        let col = t.leaf(Tensor::matrix(2, 1, vec![2., 3.]).unwrap());
        let s1 = t.add(m, bias).unwrap();
        let s2 = t.mul(s1, col).unwrap();
        let r = t.sum(s2).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(bias).unwrap().shape(), &[3]);
        assert_eq!(g.get(bias).unwrap().data(), &[5., 5., 5.]);
        assert_eq!(g.get(col).unwrap().data(), &[9., 18.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(3.0));
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }
}
