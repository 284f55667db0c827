//! Dense layers, MLPs, batch normalization and dropout on top of [`Ctx`].

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Elu,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => ctx.tape.relu(x),
            Activation::Tanh => ctx.tape.tanh(x),
            Activation::Elu => ctx.tape.elu(x),
            Activation::Softplus => ctx.tape.softplus(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Glorot-normal initializer: `N(0, 2 / (fan_in + fan_out))`.
pub fn glorot_normal(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

/// `activation(x W + b)` with `W: [input, output]` stored at `{name}/weight`
/// and `b: [output]` at `{name}/bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(name: impl Into<String>, input: usize, output: usize, activation: Activation) -> Self {
        Self { name: name.into(), input, output, activation }
    }

    pub fn weight_path(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_path(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        store.insert(self.weight_path(), glorot_normal(self.input, self.output, rng))?;
        store.insert(self.bias_path(), Tensor::zeros(&[self.output]))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        if ctx.value(x).cols() != self.input {
            return Err(Error::shape("dense", &[ctx.value(x).shape(), &[self.input, self.output]]));
        }
        let w = ctx.param(&self.weight_path())?;
        let b = ctx.param(&self.bias_path())?;
        let h = ctx.tape.matmul(x, w)?;
        let h = ctx.tape.add(h, b)?;
        self.activation.apply(ctx, h)
    }
}

/// Hidden-layer widths and activations of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(hidden: Vec<usize>, activation: Activation, output_activation: Activation) -> Self {
        Self { hidden, activation, output_activation }
    }

    pub fn relu(hidden: Vec<usize>) -> Self {
        Self::new(hidden, Activation::Relu, Activation::Identity)
    }

    pub fn linear() -> Self {
        Self::new(vec![], Activation::Identity, Activation::Identity)
    }

    pub fn build(&self, name: &str, input: usize, output: usize) -> Mlp {
        Mlp::new(name, input, &self.hidden, output, self.activation, self.output_activation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        output_activation: Activation,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Dense::new(format!("{name}/dense{i}"), fan_in, h, activation));
            fan_in = h;
        }
        layers.push(Dense::new(format!("{name}/dense{}", hidden.len()), fan_in, output, output_activation));
        Self { layers }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().expect("at least one layer").output
    }

    pub fn last(&self) -> &Dense {
        self.layers.last().expect("at least one layer")
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    /// Zeroes the final layer so the network outputs exactly zero.
    pub fn zero_output(&self, store: &mut ParameterStore) -> Result<()> {
        let last = self.last();
        store.set(&last.weight_path(), Tensor::zeros(&[last.input, last.output]))?;
        store.set(&last.bias_path(), Tensor::zeros(&[last.output]))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(ctx, h))
    }
}

/// Batch normalization over the rows of a `[batch, dim]` matrix.
///
/// Parameters `{name}/gamma`, `{name}/beta`; running statistics are buffers
/// `{name}/running_mean`, `{name}/running_var` updated as
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, dim: usize, momentum: f64, epsilon: f64) -> Self {
        Self { name: name.into(), dim, momentum, epsilon }
    }

    fn path(&self, leaf: &str) -> String {
        format!("{}/{leaf}", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid("momentum", format!("{} not in (0, 1)", self.momentum)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        store.insert(self.path("gamma"), Tensor::full(&[self.dim], 1.0))?;
        store.insert(self.path("beta"), Tensor::zeros(&[self.dim]))?;
        store.insert_buffer(self.path("running_mean"), Tensor::zeros(&[self.dim]))?;
        store.insert_buffer(self.path("running_var"), Tensor::full(&[self.dim], 1.0))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (rows, cols) = ctx.value(x).dims2();
        if cols != self.dim {
            return Err(Error::shape("batchnorm", &[ctx.value(x).shape(), &[self.dim]]));
        }
        let (centered, inv_std) = match ctx.mode() {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::invalid("batch", "batch norm in train mode needs at least 2 rows"));
                }
                let s = ctx.tape.sum_axis(x, 0)?;
                let mean = ctx.tape.scale(s, 1.0 / rows as f64)?;
                let centered = ctx.tape.sub(x, mean)?;
                let sq = ctx.tape.square(centered)?;
                let ss = ctx.tape.sum_axis(sq, 0)?;
                let var = ctx.tape.scale(ss, 1.0 / rows as f64)?;
                let var_eps = ctx.tape.offset(var, self.epsilon)?;
                let std = ctx.tape.sqrt(var_eps)?;
                let one = ctx.constant(Tensor::scalar(1.0));
                let inv_std = ctx.tape.div(one, std)?;

                let m = self.momentum;
                let rm = ctx.buffer(&self.path("running_mean"))?.data().to_vec();
                let rv = ctx.buffer(&self.path("running_var"))?.data().to_vec();
                let bm = ctx.value(mean).data().to_vec();
                // unbiased batch variance for the running estimate
                let unbias = rows as f64 / (rows as f64 - 1.0);
                let bv: Vec<f64> = ctx.value(var).data().iter().map(|v| v * unbias).collect();
                let new_m = rm.iter().zip(&bm).map(|(r, b)| m * r + (1.0 - m) * b).collect();
                let new_v = rv.iter().zip(&bv).map(|(r, b)| m * r + (1.0 - m) * b).collect();
                ctx.stage_buffer(&self.path("running_mean"), Tensor::vector(new_m));
                ctx.stage_buffer(&self.path("running_var"), Tensor::vector(new_v));
                (centered, inv_std)
            }
            Mode::Eval => {
                let rm = ctx.buffer(&self.path("running_mean"))?.clone();
                let rv = ctx.buffer(&self.path("running_var"))?;
                let inv = rv.map(|v| 1.0 / (v + self.epsilon).sqrt());
                let mean = ctx.constant(rm);
                let inv_std = ctx.constant(inv);
                (ctx.tape.sub(x, mean)?, inv_std)
            }
        };
        let xhat = ctx.tape.mul(centered, inv_std)?;
        let gamma = ctx.param(&self.path("gamma"))?;
        let beta = ctx.param(&self.path("beta"))?;
        let y = ctx.tape.mul(xhat, gamma)?;
        ctx.tape.add(y, beta)
    }
}

/// Inverted dropout: in train mode zeroes each entry with probability `p`
/// and rescales survivors by `1 / (1 - p)`; identity in eval mode.
pub fn dropout(ctx: &mut Ctx, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("p", format!("drop probability {p} not in [0, 1)")));
    }
    if ctx.mode() == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = ctx.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let m = ctx.constant(Tensor::new(shape, mask)?);
    ctx.tape.mul(x, m)
}
