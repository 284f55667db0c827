//! Conditional MADE, masked autoregressive flows and residual base heads.
//!
//! Inputs of a conditional MADE are `[c, x]`: `C` conditioning values
//! followed by `D` modeled coordinates. Conditioning inputs take degrees
//! `1..=C`, modeled inputs a permutation of `C+1..=C+D`, and hidden units
//! degrees in `C+1..=C+D-1`, so every hidden unit sees all of `c` and output
//! `d` sees only modeled inputs of smaller degree.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{glorot_normal, Activation, Mlp, MlpSpec};
use crate::params::{Ctx, Mode, ParameterStore};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Natural,
    Reversed,
    Random(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeRule {
    Equal,
    Random,
}

/// Degrees and binary connectivity of one conditional MADE. `masks[i]` is
/// laid out like the weight it gates, `[fan_in, fan_out]`; the last entry
/// maps the final hidden layer (or the inputs) to the `D` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub cond_dim: usize,
    pub dim: usize,
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<Vec<usize>>,
    pub output_degrees: Vec<usize>,
    pub masks: Vec<Tensor>,
}

fn hidden_layer_degrees(
    c: usize,
    d: usize,
    units: usize,
    prev_min: usize,
    rule: DegreeRule,
    rng: &mut Rng,
) -> Vec<usize> {
    if d == 1 {
        // no admissible degree: the unit may only see the conditioning inputs
        return vec![c; units];
    }
    let hi = c + d - 1;
    let lo = prev_min.clamp(c + 1, hi);
    match rule {
        DegreeRule::Equal => (1..=units)
            .map(|k| (c + (k * (d - 1)).div_ceil(units + 1)).max(lo))
            .collect(),
        DegreeRule::Random => (0..units).map(|_| rng.random_range(lo..=hi)).collect(),
    }
}

fn mask(from: &[usize], to: &[usize], strict: bool) -> Tensor {
    let mut data = Vec::with_capacity(from.len() * to.len());
    for &a in from {
        for &b in to {
            let on = if strict { b > a } else { b >= a };
            data.push(if on { 1.0 } else { 0.0 });
        }
    }
    Tensor::matrix(from.len(), to.len(), data).expect("sized")
}

/// Builds degrees and masks for a conditional MADE.
pub fn build_masks(
    cond_dim: usize,
    dim: usize,
    hidden_sizes: &[usize],
    ordering: Ordering,
    degree_rule: DegreeRule,
    seed: u64,
) -> Result<MaskSet> {
    if dim == 0 {
        return Err(Error::invalid("dim", "a MADE needs at least one modeled input"));
    }
    if hidden_sizes.contains(&0) {
        return Err(Error::invalid("hidden_sizes", "hidden layers need at least one unit"));
    }
    let c = cond_dim;
    let mut rng = seeded(seed);
    let mut modeled: Vec<usize> = (c + 1..=c + dim).collect();
    match ordering {
        Ordering::Natural => {}
        Ordering::Reversed => modeled.reverse(),
        Ordering::Random(s) => modeled.shuffle(&mut seeded(s)),
    }
    let input_degrees: Vec<usize> = (1..=c).chain(modeled.iter().copied()).collect();
    let mut hidden_degrees = Vec::with_capacity(hidden_sizes.len());
    let mut masks = Vec::with_capacity(hidden_sizes.len() + 1);
    let mut prev = input_degrees.clone();
    for &h in hidden_sizes {
        let prev_min = prev.iter().copied().min().unwrap_or(1);
        let deg = hidden_layer_degrees(c, dim, h, prev_min, degree_rule, &mut rng);
        masks.push(mask(&prev, &deg, false));
        hidden_degrees.push(deg.clone());
        prev = deg;
    }
    masks.push(mask(&prev, &modeled, true));
    Ok(MaskSet { cond_dim, dim, input_degrees, hidden_degrees, output_degrees: modeled, masks })
}

impl MaskSet {
    /// Product of masks along every path: entry `(input, output)` counts
    /// the paths from an input to an output.
    pub fn path_matrix(&self) -> Tensor {
        let mut acc = self.masks[0].clone();
        for m in &self.masks[1..] {
            let (r, k) = acc.dims2();
            let n = m.cols();
            let out = crate::tensor::gemm(r, k, n, acc.data(), m.data());
            acc = Tensor::matrix(r, n, out).expect("sized");
        }
        acc
    }
}

/// One conditional MADE producing shift `μ` and log-scale `s`, each `[batch, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Made {
    pub name: String,
    pub masks: MaskSet,
    pub activation: Activation,
}

impl Made {
    pub fn new(name: &str, masks: MaskSet, activation: Activation) -> Self {
        Self { name: name.to_string(), masks, activation }
    }

    fn hidden_path(&self, i: usize, leaf: &str) -> String {
        format!("{}/hidden{i}/{leaf}", self.name)
    }

    fn head_path(&self, head: &str, leaf: &str) -> String {
        format!("{}/{head}/{leaf}", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        let n = self.masks.masks.len();
        for (i, m) in self.masks.masks[..n - 1].iter().enumerate() {
            let (a, b) = m.dims2();
            store.insert(self.hidden_path(i, "weight"), glorot_normal(a, b, rng))?;
            store.insert(self.hidden_path(i, "bias"), Tensor::zeros(&[b]))?;
        }
        let (a, b) = self.masks.masks[n - 1].dims2();
        for head in ["shift", "log_scale"] {
            store.insert(self.head_path(head, "weight"), glorot_normal(a, b, rng).map(|w| 0.1 * w))?;
            store.insert(self.head_path(head, "bias"), Tensor::zeros(&[b]))?;
        }
        Ok(())
    }

    fn masked(&self, ctx: &mut Ctx, x: Var, path_w: &str, path_b: &str, mask: &Tensor) -> Result<Var> {
        let w = ctx.param(path_w)?;
        let m = ctx.constant(mask.clone());
        let wm = ctx.tape.mul(w, m)?;
        let h = ctx.tape.matmul(x, wm)?;
        let b = ctx.param(path_b)?;
        ctx.tape.add(h, b)
    }

    /// `(μ, s)` for input `[c, x]`; `cond` may be omitted when `C = 0`.
    pub fn forward(&self, ctx: &mut Ctx, cond: Option<Var>, x: Var) -> Result<(Var, Var)> {
        let c = self.masks.cond_dim;
        let input = match (cond, c) {
            (None, 0) => x,
            (Some(cv), _) => ctx.tape.concat(&[cv, x])?,
            (None, _) => return Err(Error::invalid("cond", format!("`{}` expects {c} conditioning inputs", self.name))),
        };
        let width = ctx.value(input).cols();
        if width != c + self.masks.dim {
            return Err(Error::shape("made_forward", &[ctx.value(input).shape(), &[c + self.masks.dim]]));
        }
        let n = self.masks.masks.len();
        let mut h = input;
        for i in 0..n - 1 {
            let (w, b) = (self.hidden_path(i, "weight"), self.hidden_path(i, "bias"));
            let pre = self.masked(ctx, h, &w, &b, &self.masks.masks[i])?;
            h = self.activation.apply(ctx, pre)?;
        }
        let out_mask = &self.masks.masks[n - 1];
        let mu = self.masked(ctx, h, &self.head_path("shift", "weight"), &self.head_path("shift", "bias"), out_mask)?;
        let s = self.masked(
            ctx,
            h,
            &self.head_path("log_scale", "weight"),
            &self.head_path("log_scale", "bias"),
            out_mask,
        )?;
        Ok((mu, s))
    }

    /// Density direction `u = (x − μ) ⊙ exp(−s)`; returns `u` and the
    /// per-row `−Σ s` column.
    pub fn inverse(&self, ctx: &mut Ctx, cond: Option<Var>, x: Var) -> Result<(Var, Var)> {
        let (mu, s) = self.forward(ctx, cond, x)?;
        let r = ctx.tape.sub(x, mu)?;
        let ns = ctx.tape.neg(s)?;
        let e = ctx.tape.exp(ns)?;
        let u = ctx.tape.mul(r, e)?;
        let ld = ctx.tape.sum_axis(ns, 1)?;
        Ok((u, ld))
    }

    /// Sampling direction `x = u ⊙ exp(s(x)) + μ(x)`, solved one degree at
    /// a time. Runs on plain tensors with frozen parameters.
    pub fn generate(&self, store: &ParameterStore, cond: Option<&Tensor>, u: &Tensor) -> Result<Tensor> {
        let (rows, d) = u.dims2();
        let mut x = Tensor::zeros(&[rows, d]);
        let mut order: Vec<(usize, usize)> = self.masks.output_degrees.iter().copied().zip(0..d).collect();
        order.sort_unstable();
        for &(_, col) in &order {
            let mut ctx = Ctx::no_grad(store, Mode::Eval);
            let cv = cond.map(|c| ctx.constant(c.clone()));
            let xv = ctx.constant(x.clone());
            let (mu, s) = self.forward(&mut ctx, cv, xv)?;
            let (mu, s) = (ctx.value(mu).clone(), ctx.value(s).clone());
            for r in 0..rows {
                let i = r * d + col;
                x.data_mut()[i] = u.data()[i] * s.data()[i].exp() + mu.data()[i];
            }
        }
        Ok(x)
    }
}

/// Batch-norm bijector inside a flow, normalizing in the density direction.
/// Parameters `{name}/log_gamma`, `{name}/beta`; running statistics are
/// buffers updated as in [`crate::nn::BatchNorm`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatchNorm {
    pub name: String,
    pub dim: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl FlowBatchNorm {
    fn path(&self, leaf: &str) -> String {
        format!("{}/{leaf}", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        store.insert(self.path("log_gamma"), Tensor::zeros(&[self.dim]))?;
        store.insert(self.path("beta"), Tensor::zeros(&[self.dim]))?;
        store.insert_buffer(self.path("running_mean"), Tensor::zeros(&[self.dim]))?;
        store.insert_buffer(self.path("running_var"), Tensor::full(&[self.dim], 1.0))
    }

    /// Returns `(u, per-row log-det)`.
    pub fn normalize(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let rows = ctx.value(x).rows();
        let (mean, var) = match ctx.mode() {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::invalid("batch", "flow batch norm in train mode needs at least 2 rows"));
                }
                let s = ctx.tape.sum_axis(x, 0)?;
                let mean = ctx.tape.scale(s, 1.0 / rows as f64)?;
                let c = ctx.tape.sub(x, mean)?;
                let sq = ctx.tape.square(c)?;
                let ss = ctx.tape.sum_axis(sq, 0)?;
                let var = ctx.tape.scale(ss, 1.0 / rows as f64)?;
                let m = self.momentum;
                let unbias = rows as f64 / (rows as f64 - 1.0);
                let blend = |run: &Tensor, batch: &Tensor, k: f64| {
                    Tensor::vector(run.data().iter().zip(batch.data()).map(|(r, b)| m * r + (1.0 - m) * k * b).collect())
                };
                let rm = blend(ctx.buffer(&self.path("running_mean"))?, ctx.value(mean), 1.0);
                let rv = blend(ctx.buffer(&self.path("running_var"))?, ctx.value(var), unbias);
                ctx.stage_buffer(&self.path("running_mean"), rm);
                ctx.stage_buffer(&self.path("running_var"), rv);
                (mean, var)
            }
            Mode::Eval => {
                let rm = ctx.buffer(&self.path("running_mean"))?.clone();
                let rv = ctx.buffer(&self.path("running_var"))?.clone();
                (ctx.constant(rm), ctx.constant(rv))
            }
        };
        let ve = ctx.tape.offset(var, self.epsilon)?;
        let lv = ctx.tape.log(ve)?;
        let half_lv = ctx.tape.scale(lv, -0.5)?;
        let lg = ctx.param(&self.path("log_gamma"))?;
        let log_scale = ctx.tape.add(lg, half_lv)?;
        let k = ctx.tape.exp(log_scale)?;
        let c = ctx.tape.sub(x, mean)?;
        let y = ctx.tape.mul(c, k)?;
        let beta = ctx.param(&self.path("beta"))?;
        let y = ctx.tape.add(y, beta)?;
        let ld = ctx.tape.sum(log_scale)?;
        let ones = ctx.constant(Tensor::full(&[rows, 1], 1.0));
        let ld = ctx.tape.mul(ones, ld)?;
        Ok((y, ld))
    }

    /// Eval-mode inverse on plain tensors.
    pub fn denormalize(&self, store: &ParameterStore, u: &Tensor) -> Result<Tensor> {
        let rm = store.buffer(&self.path("running_mean"))?.data();
        let rv = store.buffer(&self.path("running_var"))?.data();
        let lg = store.get(&self.path("log_gamma"))?.data();
        let beta = store.get(&self.path("beta"))?.data();
        let d = self.dim;
        let mut out = u.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - beta[j]) * (-lg[j]).exp() * (rv[j] + self.epsilon).sqrt() + rm[j];
        }
        Ok(out)
    }
}

/// How orderings are assigned to the MADEs of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingScheme {
    /// Natural, reversed, natural, … within each flow.
    Alternate,
    /// A fresh seeded permutation per MADE.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MafSpec {
    pub flows: usize,
    pub mades_per_flow: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub ordering: OrderingScheme,
    pub degree_rule: DegreeRule,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub seed: u64,
}

impl Default for MafSpec {
    fn default() -> Self {
        Self {
            flows: 2,
            mades_per_flow: 5,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            ordering: OrderingScheme::Alternate,
            degree_rule: DegreeRule::Equal,
            batch_norm: true,
            bn_momentum: 0.99,
            bn_epsilon: 1e-5,
            seed: 0,
        }
    }
}

/// `T` flows of conditional MADEs with batch-norm bijectors between flows.
/// Generation runs `u₀ → flow 1 → bn → flow 2 → … → flow T → x`.
#[derive(Clone, Debug, PartialEq)]
pub struct MafStack {
    pub name: String,
    pub dim: usize,
    pub cond_dim: usize,
    pub flows: Vec<Vec<Made>>,
    pub norms: Vec<FlowBatchNorm>,
}

impl MafStack {
    pub fn new(name: &str, dim: usize, cond_dim: usize, spec: &MafSpec) -> Result<Self> {
        if spec.flows == 0 || spec.mades_per_flow == 0 {
            return Err(Error::invalid("maf", "needs at least one flow and one MADE per flow"));
        }
        let mut flows = Vec::with_capacity(spec.flows);
        for t in 0..spec.flows {
            let mut mades = Vec::with_capacity(spec.mades_per_flow);
            for k in 0..spec.mades_per_flow {
                let idx = (t * spec.mades_per_flow + k) as u64;
                let ordering = match spec.ordering {
                    OrderingScheme::Alternate if k % 2 == 0 => Ordering::Natural,
                    OrderingScheme::Alternate => Ordering::Reversed,
                    OrderingScheme::Random => Ordering::Random(spec.seed.wrapping_mul(1_000_003).wrapping_add(idx)),
                };
                let masks = build_masks(cond_dim, dim, &spec.hidden, ordering, spec.degree_rule, spec.seed ^ idx)?;
                mades.push(Made::new(&format!("{name}/flow{t}/made{k}"), masks, spec.activation));
            }
            flows.push(mades);
        }
        let norms = if spec.batch_norm {
            (1..spec.flows)
                .map(|t| FlowBatchNorm {
                    name: format!("{name}/bn{t}"),
                    dim,
                    momentum: spec.bn_momentum,
                    epsilon: spec.bn_epsilon,
                })
                .collect()
        } else {
            vec![]
        };
        Ok(Self { name: name.to_string(), dim, cond_dim, flows, norms })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        for m in self.flows.iter().flatten() {
            m.init(store, rng)?;
        }
        self.norms.iter().try_for_each(|n| n.init(store))
    }

    /// Density direction: `x ↦ u₀` with the per-row sum of
    /// `ln |det ∂u₀/∂x|`.
    pub fn to_base(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let rows = ctx.value(x).rows();
        let mut cur = x;
        let mut total = ctx.constant(Tensor::zeros(&[rows, 1]));
        for t in (0..self.flows.len()).rev() {
            for made in self.flows[t].iter().rev() {
                let (u, ld) = made.inverse(ctx, cond, cur)?;
                cur = u;
                total = ctx.tape.add(total, ld)?;
            }
            if t > 0 {
                if let Some(bn) = self.norms.get(t - 1) {
                    let (u, ld) = bn.normalize(ctx, cur)?;
                    cur = u;
                    total = ctx.tape.add(total, ld)?;
                }
            }
        }
        Ok((cur, total))
    }

    /// Generation direction on plain tensors, eval mode.
    pub fn from_base(&self, store: &ParameterStore, u0: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut cur = u0.clone();
        for (t, flow) in self.flows.iter().enumerate() {
            if t > 0 {
                if let Some(bn) = self.norms.get(t - 1) {
                    cur = bn.denormalize(store, &cur)?;
                }
            }
            for made in flow {
                cur = made.generate(store, cond, &cur)?;
            }
        }
        Ok(cur)
    }
}

/// Residual refinement of base-distribution parameters:
/// `γ_next = γ_prev + r(h(γ_prev), z)`. The residual network's output layer
/// starts at zero so a fresh head is an identity skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualParamHead {
    pub name: String,
    pub param_dim: usize,
    pub code_dim: usize,
    pub hidden: Mlp,
    pub residual: Mlp,
}

impl ResidualParamHead {
    pub fn new(name: &str, param_dim: usize, code_dim: usize, feature: usize, spec: &MlpSpec) -> Self {
        Self {
            name: name.to_string(),
            param_dim,
            code_dim,
            hidden: spec.build(&format!("{name}/hidden"), param_dim, feature),
            residual: spec.build(&format!("{name}/residual"), feature + code_dim, param_dim),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        self.hidden.init(store, rng)?;
        self.residual.init(store, rng)?;
        self.residual.zero_output(store)
    }

    pub fn update(&self, ctx: &mut Ctx, gamma_prev: Var, z: Var) -> Result<Var> {
        let (gs, zs) = (ctx.value(gamma_prev).shape().to_vec(), ctx.value(z).shape().to_vec());
        if ctx.value(gamma_prev).cols() != self.param_dim || ctx.value(z).cols() != self.code_dim {
            return Err(Error::shape("residual_base_update", &[&gs, &zs]));
        }
        let h = self.hidden.forward(ctx, gamma_prev)?;
        let inp = ctx.tape.concat(&[h, z])?;
        let r = self.residual.forward(ctx, inp)?;
        ctx.tape.add(gamma_prev, r)
    }
}
