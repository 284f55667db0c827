//! Invertible maps with exact log-determinants.
//!
//! The central one is the diagonal-plus-rank-1 affine map
//! `z = b + (diag(d) + u uᵀ) ε`, shared between the generative and the
//! inference path of every hierarchy layer. Batch normalization, the
//! logit preprocessing of pixel data and chains of bijectors round out the set.

use crate::autodiff::{logit, sigmoid, Var};
use crate::distributions::{graph::scale_from_raw as scale_from_raw_var, scale_from_raw};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::params::{Ctx, ParameterStore};
use crate::rng::{NoiseSource, Rng};
use crate::tensor::Tensor;

/// A bijection on `ℝ^dim`. `forward` returns `(y, ln|det ∂y/∂x|)` and
/// `inverse` returns `(x, ln|det ∂x/∂y|)`.
pub trait Bijector {
    fn dim(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)>;
    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)>;
}

fn check_len(op: &'static str, want: usize, got: usize) -> Result<()> {
    if want != got {
        return Err(Error::shape(op, &[&[want], &[got]]));
    }
    Ok(())
}

/// Raw head outputs of one affine bijector.
#[derive(Clone, Debug, PartialEq)]
pub struct BijectorParams {
    pub shift: Vec<f64>,
    pub raw_diag: Vec<f64>,
    pub perturb: Vec<f64>,
}

impl BijectorParams {
    pub fn new(shift: Vec<f64>, raw_diag: Vec<f64>, perturb: Vec<f64>) -> Result<Self> {
        check_len("BijectorParams", shift.len(), raw_diag.len())?;
        check_len("BijectorParams", shift.len(), perturb.len())?;
        Ok(Self { shift, raw_diag, perturb })
    }

    pub fn resolve(&self) -> AffineBijector {
        AffineBijector { shift: self.shift.clone(), diag: scale_from_raw(&self.raw_diag), perturb: self.perturb.clone() }
    }
}

/// `z = b + S ε` with `S = diag(d) + u uᵀ`, `d > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineBijector {
    shift: Vec<f64>,
    diag: Vec<f64>,
    perturb: Vec<f64>,
}

impl AffineBijector {
    /// Builds from an already positive diagonal.
    pub fn new(shift: Vec<f64>, diag: Vec<f64>, perturb: Vec<f64>) -> Result<Self> {
        check_len("AffineBijector", shift.len(), diag.len())?;
        check_len("AffineBijector", shift.len(), perturb.len())?;
        if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid("diag", "affine bijector diagonal must be positive and finite"));
        }
        Ok(Self { shift, diag, perturb })
    }

    pub fn identity(dim: usize) -> Self {
        Self { shift: vec![0.0; dim], diag: vec![1.0; dim], perturb: vec![0.0; dim] }
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn perturb(&self) -> &[f64] {
        &self.perturb
    }

    /// `Σ uᵢ² / dᵢ`.
    fn u_dinv_u(&self) -> f64 {
        self.perturb.iter().zip(&self.diag).map(|(u, d)| u * u / d).sum()
    }

    pub fn log_det(&self) -> f64 {
        self.diag.iter().map(|d| d.ln()).sum::<f64>() + self.u_dinv_u().ln_1p()
    }

    /// Dense `S`, row-major.
    pub fn scale_matrix(&self) -> Vec<f64> {
        let n = self.dim();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = self.perturb[i] * self.perturb[j] + if i == j { self.diag[i] } else { 0.0 };
            }
        }
        s
    }
}

impl Bijector for AffineBijector {
    fn dim(&self) -> usize {
        self.shift.len()
    }

    fn forward(&self, eps: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("affine_forward", self.dim(), eps.len())?;
        let ue: f64 = self.perturb.iter().zip(eps).map(|(u, e)| u * e).sum();
        let z = (0..self.dim()).map(|i| self.shift[i] + self.diag[i] * eps[i] + self.perturb[i] * ue).collect();
        Ok((z, self.log_det()))
    }

    fn inverse(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("affine_inverse", self.dim(), z.len())?;
        // Sherman–Morrison: S⁻¹r = D⁻¹r − D⁻¹u (uᵀD⁻¹r) / (1 + uᵀD⁻¹u)
        let r_over_d: Vec<f64> = (0..self.dim()).map(|i| (z[i] - self.shift[i]) / self.diag[i]).collect();
        let ur: f64 = self.perturb.iter().zip(&r_over_d).map(|(u, r)| u * r).sum();
        let k = ur / (1.0 + self.u_dinv_u());
        let eps = (0..self.dim()).map(|i| r_over_d[i] - self.perturb[i] / self.diag[i] * k).collect();
        Ok((eps, -self.log_det()))
    }
}

/// Batch normalization viewed as an elementwise affine bijection with frozen
/// statistics. The forward direction normalizes:
/// `y = γ (x − mean) / √(var + ε) + β`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormBijector {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNormBijector {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, gamma: Vec<f64>, beta: Vec<f64>, epsilon: f64) -> Result<Self> {
        let n = mean.len();
        check_len("BatchNormBijector", n, var.len())?;
        check_len("BatchNormBijector", n, gamma.len())?;
        check_len("BatchNormBijector", n, beta.len())?;
        if gamma.iter().any(|&g| g == 0.0) {
            return Err(Error::invalid("gamma", "batch-norm bijector needs every gamma nonzero"));
        }
        if epsilon < 0.0 || var.iter().any(|&v| !(v + epsilon > 0.0)) {
            return Err(Error::invalid("var", "var + epsilon must be positive"));
        }
        Ok(Self { mean, var, gamma, beta, epsilon })
    }

    pub fn log_det(&self) -> f64 {
        self.gamma.iter().zip(&self.var).map(|(g, v)| g.abs().ln() - 0.5 * (v + self.epsilon).ln()).sum()
    }
}

impl Bijector for BatchNormBijector {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("batchnorm_bijector", self.dim(), x.len())?;
        let y = (0..self.dim())
            .map(|i| self.gamma[i] * (x[i] - self.mean[i]) / (self.var[i] + self.epsilon).sqrt() + self.beta[i])
            .collect();
        Ok((y, self.log_det()))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("batchnorm_bijector", self.dim(), y.len())?;
        let x = (0..self.dim())
            .map(|i| (y[i] - self.beta[i]) / self.gamma[i] * (self.var[i] + self.epsilon).sqrt() + self.mean[i])
            .collect();
        Ok((x, -self.log_det()))
    }
}

/// `v ↦ logit(α + (1 − α) v)` elementwise on `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTransform {
    pub dim: usize,
    pub alpha: f64,
}

impl LogitTransform {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::invalid("alpha", format!("{alpha} not in (0, 0.5)")));
        }
        Ok(Self { dim, alpha })
    }

    /// `ln |dy/dv|` for one coordinate.
    pub fn log_det_elem(&self, v: f64) -> f64 {
        let p = self.alpha + (1.0 - self.alpha) * v;
        (1.0 - self.alpha).ln() - p.ln() - (-p).ln_1p()
    }
}

impl Bijector for LogitTransform {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, v: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("logit_transform", self.dim, v.len())?;
        let y = v.iter().map(|&vi| logit(self.alpha + (1.0 - self.alpha) * vi)).collect();
        Ok((y, v.iter().map(|&vi| self.log_det_elem(vi)).sum()))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("logit_transform", self.dim, y.len())?;
        let v: Vec<f64> = y.iter().map(|&yi| (sigmoid(yi) - self.alpha) / (1.0 - self.alpha)).collect();
        let ld: f64 = v.iter().map(|&vi| self.log_det_elem(vi)).sum();
        Ok((v, -ld))
    }
}

/// Dequantizes 8-bit values and maps them to logit space:
/// `v = (x + U) / 256`, `y = logit(α + (1 − α) v)`.
/// Returns `y` and the per-element `ln |dy/dv|`.
pub fn logit_dequantize(x_raw: &[u8], alpha: f64, rng: &mut dyn NoiseSource) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = LogitTransform::new(x_raw.len(), alpha)?;
    let noise = rng.uniform(1, x_raw.len())?;
    let v: Vec<f64> = x_raw.iter().zip(noise.data()).map(|(&x, u)| (x as f64 + u) / 256.0).collect();
    let (y, _) = t.forward(&v)?;
    let ld = v.iter().map(|&vi| t.log_det_elem(vi)).collect();
    Ok((y, ld))
}

/// Identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity(pub usize);

impl Bijector for Identity {
    fn dim(&self) -> usize {
        self.0
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("identity", self.0, x.len())?;
        Ok((x.to_vec(), 0.0))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.forward(y)
    }
}

/// Swaps the directions of the wrapped bijector.
pub struct Inverted<B>(pub B);

impl<B: Bijector> Bijector for Inverted<B> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.0.inverse(x)
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.0.forward(y)
    }
}

/// Composition applied left to right in the forward direction.
pub struct Chain {
    links: Vec<Box<dyn Bijector>>,
}

impl Chain {
    pub fn new(links: Vec<Box<dyn Bijector>>) -> Result<Self> {
        let Some(first) = links.first() else {
            return Err(Error::invalid("links", "a chain needs at least one bijector"));
        };
        let dim = first.dim();
        for l in &links {
            check_len("chain", dim, l.dim())?;
        }
        Ok(Self { links })
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

impl Bijector for Chain {
    fn dim(&self) -> usize {
        self.links[0].dim()
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut cur = x.to_vec();
        let mut total = 0.0;
        for l in &self.links {
            let (y, ld) = l.forward(&cur)?;
            cur = y;
            total += ld;
        }
        Ok((cur, total))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut cur = y.to_vec();
        let mut total = 0.0;
        for l in self.links.iter().rev() {
            let (x, ld) = l.inverse(&cur)?;
            cur = x;
            total += ld;
        }
        Ok((cur, total))
    }
}

/// Affine bijector parameters on the tape, one row per batch element.
#[derive(Clone, Copy, Debug)]
pub struct AffineVar {
    pub shift: Var,
    pub diag: Var,
    pub perturb: Var,
}

impl AffineVar {
    /// `z = b + d ⊙ ε + u (uᵀ ε)` row by row.
    pub fn forward(&self, ctx: &mut Ctx, eps: Var) -> Result<Var> {
        let de = ctx.tape.mul(self.diag, eps)?;
        let ue = ctx.tape.mul(self.perturb, eps)?;
        let ue = ctx.tape.sum_axis(ue, 1)?;
        let r1 = ctx.tape.mul(self.perturb, ue)?;
        let z = ctx.tape.add(self.shift, de)?;
        ctx.tape.add(z, r1)
    }

    /// Per-row `ln det S` as a `[batch, 1]` column.
    pub fn log_det(&self, ctx: &mut Ctx) -> Result<Var> {
        let ld = ctx.tape.log(self.diag)?;
        let ld = ctx.tape.sum_axis(ld, 1)?;
        let u2 = ctx.tape.square(self.perturb)?;
        let q = ctx.tape.div(u2, self.diag)?;
        let q = ctx.tape.sum_axis(q, 1)?;
        let q = ctx.tape.offset(q, 1.0)?;
        let l1 = ctx.tape.log(q)?;
        ctx.tape.add(ld, l1)
    }

    /// Plain bijector for row `i`.
    pub fn row(&self, ctx: &Ctx, i: usize) -> Result<AffineBijector> {
        AffineBijector::new(
            ctx.value(self.shift).row(i).to_vec(),
            ctx.value(self.diag).row(i).to_vec(),
            ctx.value(self.perturb).row(i).to_vec(),
        )
    }
}

/// Affine bijector whose parameters are produced by three head networks
/// from a conditioning input. Without an upstream code the input is the
/// learned vector `{name}/const_input`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedBijector {
    pub name: String,
    pub dim: usize,
    pub cond_dim: usize,
    pub learned_input: bool,
    pub shift_head: Mlp,
    pub diag_head: Mlp,
    pub perturb_head: Mlp,
}

impl ConditionedBijector {
    pub fn new(name: &str, dim: usize, cond_dim: usize, learned_input: bool, head: &MlpSpec) -> Self {
        Self {
            name: name.to_string(),
            dim,
            cond_dim,
            learned_input,
            shift_head: head.build(&format!("{name}/shift"), cond_dim, dim),
            diag_head: head.build(&format!("{name}/diag"), cond_dim, dim),
            perturb_head: head.build(&format!("{name}/perturb"), cond_dim, dim),
        }
    }

    /// The head spec used by the MLP configuration: two tanh layers of 20
    /// and a tanh output.
    pub fn default_head() -> MlpSpec {
        MlpSpec::new(vec![20, 20], Activation::Tanh, Activation::Tanh)
    }

    pub fn const_input_path(&self) -> String {
        format!("{}/const_input", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        if self.learned_input {
            let v = rng.normal(1, self.cond_dim)?.into_data();
            store.insert(self.const_input_path(), Tensor::vector(v))?;
        }
        self.shift_head.init(store, rng)?;
        self.diag_head.init(store, rng)?;
        self.perturb_head.init(store, rng)
    }

    /// Head outputs for `cond: [batch, cond_dim]`, or for the learned input
    /// repeated `rows` times when `cond` is `None`.
    pub fn params(&self, ctx: &mut Ctx, cond: Option<Var>, rows: usize) -> Result<AffineVar> {
        let input = match cond {
            Some(c) => c,
            None => {
                if !self.learned_input {
                    return Err(Error::invalid("cond", format!("`{}` needs a conditioning input", self.name)));
                }
                let c = ctx.param(&self.const_input_path())?;
                let z = ctx.constant(Tensor::zeros(&[rows, self.cond_dim]));
                ctx.tape.add(z, c)?
            }
        };
        let shift = self.shift_head.forward(ctx, input)?;
        let raw = self.diag_head.forward(ctx, input)?;
        let diag = scale_from_raw_var(ctx, raw)?;
        let perturb = self.perturb_head.forward(ctx, input)?;
        Ok(AffineVar { shift, diag, perturb })
    }
}
