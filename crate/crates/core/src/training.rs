//! KL warm-up schedules, the free-bits objective, Adam, dynamic
//! binarization and the epoch loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::params::{Ctx, Mode, ParameterStore};
use crate::rng::{stream, Rng, RngState};
use crate::tensor::Tensor;

/// KL coefficient schedule over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum WarmupSchedule {
    /// `β = 1` throughout.
    Off,
    /// Level `n` lasts `2^n` epochs with `β_n = 10^{n/N − 1}`, `β₀ = 0`.
    Geometric { levels: u32 },
    /// `β = min(1, epoch / epochs)`.
    Linear { epochs: usize },
    /// `β = 0` for `hard_epochs`, then geometric.
    HardThenGeometric { hard_epochs: usize, levels: u32 },
}

fn geometric(levels: u32, epoch: usize) -> f64 {
    if levels == 0 {
        return 1.0;
    }
    let n = (epoch as u64 + 1).ilog2();
    if n >= levels {
        1.0
    } else if n == 0 {
        0.0
    } else {
        10f64.powf(n as f64 / levels as f64 - 1.0)
    }
}

pub fn warmup_beta(schedule: WarmupSchedule, epoch: usize) -> f64 {
    match schedule {
        WarmupSchedule::Off => 1.0,
        WarmupSchedule::Geometric { levels } => geometric(levels, epoch),
        WarmupSchedule::Linear { epochs } if epochs == 0 => 1.0,
        WarmupSchedule::Linear { epochs } => (epoch as f64 / epochs as f64).min(1.0),
        WarmupSchedule::HardThenGeometric { hard_epochs, .. } if epoch < hard_epochs => 0.0,
        WarmupSchedule::HardThenGeometric { hard_epochs, levels } => geometric(levels, epoch - hard_epochs),
    }
}

/// `−mean(recon) + β Σ_l max(λ, mean(KL_l))` on the tape. Inputs are
/// per-row `[batch, 1]` columns.
pub fn free_bits_objective(ctx: &mut Ctx, recon: Var, kls: &[Var], lambda: f64, beta: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::invalid("lambda", "free bits must be non-negative"));
    }
    let r = ctx.tape.mean(recon)?;
    let mut loss = ctx.tape.neg(r)?;
    for &kl in kls {
        let m = ctx.tape.mean(kl)?;
        let c = ctx.tape.clamp_min(m, lambda)?;
        let c = ctx.tape.scale(c, beta)?;
        loss = ctx.tape.add(loss, c)?;
    }
    Ok(loss)
}

/// Scalar form of [`free_bits_objective`].
pub fn free_bits_value(recon: f64, kls: &[f64], lambda: f64, beta: f64) -> f64 {
    -recon + beta * kls.iter().map(|k| k.max(lambda)).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr · ½(1 + cos(π t / epochs))` for `t < epochs`, then `after`.
    CosineThenConstant { lr: f64, epochs: usize, after: f64 },
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::CosineThenConstant { lr, epochs, after } => {
                if epoch < epochs {
                    (lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())).max(0.0)
                } else {
                    after
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moments per parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One Adam update with bias correction; `l2 · param` is added to each
/// gradient first.
pub fn adam_step(
    state: &mut OptimizerState,
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    adam: AdamParams,
    l2: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", &[p.shape(), g.shape()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for i in 0..g.len() {
            let gi = g.data()[i] + l2 * p.data()[i];
            let mi = adam.beta1 * m.data()[i] + (1.0 - adam.beta1) * gi;
            let vi = adam.beta2 * v.data()[i] + (1.0 - adam.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + adam.epsilon);
        }
    }
    Ok(())
}

/// Samples each entry from `Bernoulli(value)`.
pub fn dynamic_binarize(x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("x", "pixel intensities must lie in [0, 1]"));
    }
    let data = x.data().iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// One binarization of `x` drawn from a stream fixed by `seed`, used for
/// validation and test rows so their scores are comparable across epochs.
pub fn fixed_binarize(x: &Tensor, seed: u64) -> Result<Tensor> {
    dynamic_binarize(x, &mut stream(seed, 3))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub adam: AdamParams,
    pub l2: f64,
    pub warmup_schedule: WarmupSchedule,
    pub free_bits: f64,
    pub dynamic_binarization: bool,
    pub seed: u64,
    /// Fraction of the training rows held out (from the end) when no
    /// explicit validation set is given.
    pub validation_fraction: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 4000,
            lr: LrSchedule::Constant { lr: 1e-3 },
            adam: AdamParams::default(),
            l2: 1e-5,
            warmup_schedule: WarmupSchedule::Geometric { levels: 10 },
            free_bits: 0.0,
            dynamic_binarization: true,
            seed: 0,
            validation_fraction: 0.1,
            eval_batch: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch normalization)".into()));
        }
        if self.free_bits < 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("free_bits and l2 must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and epsilon > 0".into()));
        }
        let lr_ok = match self.lr {
            LrSchedule::Constant { lr } => lr >= 0.0,
            LrSchedule::CosineThenConstant { lr, after, .. } => lr >= 0.0 && after >= 0.0,
        };
        if !lr_ok {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Splits off the last `fraction` of rows.
pub fn split_validation(x: &Tensor, fraction: f64) -> Result<(Tensor, Tensor)> {
    let n = x.rows();
    let nv = ((n as f64) * fraction).round() as usize;
    Ok((x.slice_rows(0, n - nv)?, x.slice_rows(n - nv, nv)?))
}

/// One row of the per-epoch metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub beta: f64,
    pub lr: f64,
    /// Batch-mean `−loss` of the training objective.
    pub train_elbo: f64,
    /// Full (`β = 1`) validation ELBO.
    pub valid_elbo: f64,
    pub valid_kls: Vec<f64>,
    pub param_checksum: u64,
    pub wall_time: f64,
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer {
    pub hierarchy: Hierarchy,
    pub config: TrainConfig,
    pub store: ParameterStore,
    pub optimizer: OptimizerState,
    pub rng: Rng,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(hierarchy: Hierarchy, config: TrainConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let rng = stream(config.seed, 1);
        Ok(Self { hierarchy, config, store, optimizer: OptimizerState::default(), rng, epoch: 0 })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    fn check_finite(ctx: &Ctx, recon: Var, kls: &[Var]) -> Result<()> {
        let bad = |v: &Tensor| v.data().iter().copied().find(|x| !x.is_finite());
        if let Some(v) = bad(ctx.value(recon)) {
            return Err(Error::Numeric { term: "reconstruction".into(), value: v });
        }
        for (l, &k) in kls.iter().enumerate() {
            if let Some(v) = bad(ctx.value(k)) {
                return Err(Error::Numeric { term: format!("kl[layer {}]", l + 1), value: v });
            }
        }
        Ok(())
    }

    /// Runs one epoch over `train` and evaluates on `valid`.
    pub fn run_epoch(&mut self, train: &Tensor, valid: &Tensor) -> Result<MetricsRow> {
        let start = Instant::now();
        let cfg = self.config.clone();
        let epoch = self.epoch;
        let beta = warmup_beta(cfg.warmup_schedule, epoch);
        let lr = cfg.lr.at(epoch);
        let data = if cfg.dynamic_binarization { dynamic_binarize(train, &mut self.rng)? } else { train.clone() };
        let mut order: Vec<usize> = (0..data.rows()).collect();
        order.shuffle(&mut self.rng);
        let bs = cfg.batch_size.min(data.rows());
        if bs < 2 {
            return Err(Error::invalid("data", "need at least two training rows"));
        }
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = data.select_rows(chunk)?;
            let mut ctx = Ctx::new(&self.store, Mode::Train);
            let xv = ctx.constant(xb);
            let terms = self.hierarchy.elbo_terms(&mut ctx, xv, &mut self.rng)?;
            let kls: Vec<Var> = terms.layers.iter().map(|l| l.kl).collect();
            Self::check_finite(&ctx, terms.recon, &kls)?;
            let loss = free_bits_objective(&mut ctx, terms.recon, &kls, cfg.free_bits, beta)?;
            let lv = ctx.tape.scalar_value(loss)?;
            if !lv.is_finite() {
                return Err(Error::Numeric { term: "loss".into(), value: lv });
            }
            let grads = ctx.gradients(loss)?;
            let updates = ctx.take_buffer_updates();
            drop(ctx);
            if let Some((name, g)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                let v = g.data().iter().copied().find(|x| !x.is_finite()).unwrap_or(f64::NAN);
                return Err(Error::Numeric { term: format!("gradient of {name}"), value: v });
            }
            adam_step(&mut self.optimizer, &mut self.store, &grads, lr, cfg.adam, cfg.l2)?;
            self.store.apply_buffer_updates(updates)?;
            total -= lv * chunk.len() as f64;
            seen += chunk.len();
        }
        let mut vnoise = stream(cfg.seed, 1_000_000 + epoch as u64);
        let report = if valid.rows() > 0 {
            Some(self.hierarchy.evaluate(&self.store, valid, None, &mut vnoise, cfg.eval_batch)?)
        } else {
            None
        };
        if let Some(r) = &report {
            if !r.elbo.is_finite() {
                return Err(Error::Numeric { term: "validation elbo".into(), value: r.elbo });
            }
        }
        self.epoch += 1;
        Ok(MetricsRow {
            epoch,
            beta,
            lr,
            train_elbo: total / seen.max(1) as f64,
            valid_elbo: report.as_ref().map_or(f64::NAN, |r| r.elbo),
            valid_kls: report.map_or_else(Vec::new, |r| r.kls),
            param_checksum: self.store.checksum(),
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// Trains for `config.epochs` epochs and returns the final parameters with
/// the metrics stream.
pub fn train(
    hierarchy: Hierarchy,
    config: TrainConfig,
    store: ParameterStore,
    train_data: &Tensor,
    valid_data: &Tensor,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<(ParameterStore, Vec<MetricsRow>)> {
    if train_data.rows() == 0 {
        return Err(Error::invalid("data", "training data is empty"));
    }
    let epochs = config.epochs;
    let mut t = Trainer::new(hierarchy, config, store)?;
    let mut rows = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let row = t.run_epoch(train_data, valid_data)?;
        on_epoch(&row);
        rows.push(row);
    }
    Ok((t.store, rows))
}
