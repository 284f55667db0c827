//! The L-layer hierarchy: priors, shared bijectors, variational layers and
//! decoders, with the ELBO, importance-weighted bound and joint density.
//!
//! Layer `l` draws `ε^l` from a diagonal Gaussian and maps it through an
//! affine bijector to `z^l`. Under self-reflective wiring the prior, the
//! bijector and the posterior of layer `l ≥ 2` all read `z^{l-1}`, and the
//! generative and inference passes run the same transition code, so the
//! bijector Jacobians cancel and every KL is evaluated in `ε`-space. The
//! DLGM wiring keeps the same parts but feeds priors and bijectors learned
//! constants and lets the posterior see only the evidence.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::bijectors::{AffineVar, ConditionedBijector};
use crate::distributions::graph::{bernoulli_log_prob, DiagGaussian};
use crate::error::{Error, Result};
use crate::made::{MafSpec, MafStack, ResidualParamHead};
use crate::nn::{Activation, BatchNorm, Mlp, MlpSpec};
use crate::params::{Ctx, Mode, ParameterStore};
use crate::rng::{NoiseSource, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    SelfReflective,
    Dlgm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationalStyle {
    Concat,
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorStyle {
    ConditionedDiagGaussian,
    StandardNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Bernoulli,
    Gaussian,
    Maf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySpec {
    pub data_dim: usize,
    pub latent_dims: Vec<usize>,
    pub wiring: Wiring,
    pub variational_style: VariationalStyle,
    pub prior_style: PriorStyle,
    pub decoder: DecoderKind,
    pub evidence_encoder: MlpSpec,
    pub evidence_features: usize,
    pub latent_encoder: MlpSpec,
    pub latent_features: usize,
    pub posterior_head: MlpSpec,
    pub prior_head: MlpSpec,
    pub bijector_head: MlpSpec,
    pub bijector_cond_dim: usize,
    pub decoder_net: MlpSpec,
    pub maf: MafSpec,
    /// Width of the hidden feature map of residual variational layers;
    /// `None` means `⌊D^l / 3⌋` (at least 1).
    pub residual_feature: Option<usize>,
    pub input_batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        Self {
            data_dim: 784,
            latent_dims: vec![10; 10],
            wiring: Wiring::SelfReflective,
            variational_style: VariationalStyle::Concat,
            prior_style: PriorStyle::ConditionedDiagGaussian,
            decoder: DecoderKind::Bernoulli,
            evidence_encoder: MlpSpec::relu(vec![256, 256]),
            evidence_features: 20,
            latent_encoder: MlpSpec::relu(vec![256, 256]),
            latent_features: 20,
            posterior_head: MlpSpec::relu(vec![256, 256]),
            prior_head: MlpSpec::relu(vec![256, 256]),
            bijector_head: ConditionedBijector::default_head(),
            bijector_cond_dim: 10,
            decoder_net: MlpSpec::relu(vec![512, 512]),
            maf: MafSpec::default(),
            residual_feature: None,
            input_batch_norm: true,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }
}

impl HierarchySpec {
    pub fn layers(&self) -> usize {
        self.latent_dims.len()
    }

    pub fn total_latent(&self) -> usize {
        self.latent_dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dims.is_empty() {
            return Err(Error::Config("hierarchy needs at least one latent layer".into()));
        }
        if self.data_dim == 0 || self.latent_dims.contains(&0) {
            return Err(Error::Config("data and latent dimensions must be at least 1".into()));
        }
        if self.evidence_features == 0 || self.latent_features == 0 || self.bijector_cond_dim == 0 {
            return Err(Error::Config("feature sizes must be at least 1".into()));
        }
        let all = [
            &self.evidence_encoder,
            &self.latent_encoder,
            &self.posterior_head,
            &self.prior_head,
            &self.bijector_head,
            &self.decoder_net,
        ];
        if all.iter().any(|m| m.hidden.contains(&0)) {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        if self.residual_feature == Some(0) {
            return Err(Error::Config("residual_feature must be at least 1".into()));
        }
        if self.input_batch_norm && !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0 && self.bn_epsilon > 0.0) {
            return Err(Error::Config("batch norm needs momentum in (0, 1) and epsilon > 0".into()));
        }
        Ok(())
    }

    fn residual_width(&self, dim: usize) -> usize {
        self.residual_feature.unwrap_or((dim / 3).max(1))
    }

    /// DLGM counterpart of a self-reflective spec with its evidence encoders
    /// widened until the learnable scalar count is at least the original's.
    pub fn dlgm_matched(&self, rng_seed: u64) -> Result<HierarchySpec> {
        let target = Hierarchy::new(self.clone())?.init(&mut crate::rng::seeded(rng_seed))?.scalar_count();
        let mut out = self.clone();
        out.wiring = Wiring::Dlgm;
        let base_hidden = self.evidence_encoder.hidden.clone();
        let base_feat = self.evidence_features;
        for step in 0..4096usize {
            let f = 1.0 + step as f64 * 0.01;
            out.evidence_encoder.hidden = base_hidden.iter().map(|&h| ((h as f64) * f).round() as usize).collect();
            out.evidence_features = ((base_feat as f64) * f).round() as usize;
            let n = Hierarchy::new(out.clone())?.init(&mut crate::rng::seeded(rng_seed))?.scalar_count();
            if n >= target {
                return Ok(out);
            }
        }
        Err(Error::Config("could not match the parameter budget".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum PriorNet {
    Standard,
    Constant { loc: String, raw: String },
    Conditioned { loc: Mlp, raw: Mlp },
}

#[derive(Clone, Debug, PartialEq)]
enum PosteriorNet {
    Evidence { loc: Mlp, raw: Mlp },
    Concat { latent: Mlp, loc: Mlp, raw: Mlp },
    Residual { latent: Mlp, loc: Mlp, raw: Mlp, hidden: Mlp, res_loc: Mlp, res_raw: Mlp },
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    dim: usize,
    input_bn: Option<BatchNorm>,
    prior: PriorNet,
    bijector: ConditionedBijector,
    evidence: Mlp,
    posterior: PosteriorNet,
}

#[derive(Clone, Debug, PartialEq)]
enum Decoder {
    Bernoulli { net: Mlp },
    Gaussian { net: Mlp, raw: String },
    Maf { base0: String, heads: Vec<ResidualParamHead>, stack: MafStack },
}

/// One sampled layer of a pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub eps: Var,
    pub z: Var,
    pub prior: DiagGaussian,
    pub posterior: DiagGaussian,
    pub bijector: AffineVar,
    /// Analytic `KL(q ‖ p)` per row, `[batch, 1]`.
    pub kl: Var,
}

/// Per-row terms of one reparameterized pass.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub layers: Vec<LayerTrace>,
    /// `log p(x | z^{1:L})`, `[batch, 1]`.
    pub recon: Var,
}

/// Summary of an evaluation on a data matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub elbo: f64,
    pub recon: f64,
    pub kls: Vec<f64>,
    pub iwae: Option<f64>,
    pub iwae_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    pub spec: HierarchySpec,
    layers: Vec<Layer>,
    decoder: Decoder,
}

fn broadcast_rows(ctx: &mut Ctx, v: Var, rows: usize) -> Result<Var> {
    let cols = ctx.value(v).cols();
    let z = ctx.constant(Tensor::zeros(&[rows, cols]));
    ctx.tape.add(z, v)
}

impl Hierarchy {
    pub fn new(spec: HierarchySpec) -> Result<Self> {
        spec.validate()?;
        let sere = spec.wiring == Wiring::SelfReflective;
        let mut layers = Vec::with_capacity(spec.layers());
        for (i, &dim) in spec.latent_dims.iter().enumerate() {
            let l = i + 1;
            let name = format!("layer{l}");
            let prev = if i == 0 { None } else { Some(spec.latent_dims[i - 1]) };
            let conditioned = sere && prev.is_some();
            let input_bn = match prev {
                Some(p) if conditioned && spec.input_batch_norm => {
                    Some(BatchNorm::new(format!("{name}/input_bn"), p, spec.bn_momentum, spec.bn_epsilon))
                }
                _ => None,
            };
            let prior = match (spec.prior_style, conditioned) {
                (PriorStyle::StandardNormal, _) => PriorNet::Standard,
                (PriorStyle::ConditionedDiagGaussian, true) => {
                    let p = prev.expect("conditioned layers have a predecessor");
                    PriorNet::Conditioned {
                        loc: spec.prior_head.build(&format!("{name}/prior/loc"), p, dim),
                        raw: spec.prior_head.build(&format!("{name}/prior/raw_scale"), p, dim),
                    }
                }
                (PriorStyle::ConditionedDiagGaussian, false) => PriorNet::Constant {
                    loc: format!("{name}/prior/loc"),
                    raw: format!("{name}/prior/raw_scale"),
                },
            };
            let cond_dim = if conditioned { prev.expect("predecessor") } else { spec.bijector_cond_dim };
            let bijector =
                ConditionedBijector::new(&format!("{name}/bijector"), dim, cond_dim, !conditioned, &spec.bijector_head);
            let ev = spec.evidence_features;
            let evidence = spec.evidence_encoder.build(&format!("{name}/evidence"), spec.data_dim, ev);
            let ph = &spec.posterior_head;
            let post = format!("{name}/posterior");
            let posterior = if !conditioned {
                PosteriorNet::Evidence {
                    loc: ph.build(&format!("{post}/loc"), ev, dim),
                    raw: ph.build(&format!("{post}/raw_scale"), ev, dim),
                }
            } else {
                let p = prev.expect("predecessor");
                let lf = spec.latent_features;
                let latent = spec.latent_encoder.build(&format!("{name}/latent"), p, lf);
                match spec.variational_style {
                    VariationalStyle::Concat => PosteriorNet::Concat {
                        latent,
                        loc: ph.build(&format!("{post}/loc"), lf + ev, dim),
                        raw: ph.build(&format!("{post}/raw_scale"), lf + ev, dim),
                    },
                    VariationalStyle::Residual => {
                        let h = spec.residual_width(dim);
                        PosteriorNet::Residual {
                            latent,
                            loc: ph.build(&format!("{post}/loc"), lf, dim),
                            raw: ph.build(&format!("{post}/raw_scale"), lf, dim),
                            hidden: ph.build(&format!("{post}/hidden"), 2 * dim, h),
                            res_loc: ph.build(&format!("{post}/residual_loc"), h + ev, dim),
                            res_raw: ph.build(&format!("{post}/residual_raw_scale"), h + ev, dim),
                        }
                    }
                }
            };
            layers.push(Layer { dim, input_bn, prior, bijector, evidence, posterior });
        }
        let total = spec.total_latent();
        let decoder = match spec.decoder {
            DecoderKind::Bernoulli => Decoder::Bernoulli { net: spec.decoder_net.build("decoder", total, spec.data_dim) },
            DecoderKind::Gaussian => Decoder::Gaussian {
                net: spec.decoder_net.build("decoder", total, spec.data_dim),
                raw: "decoder/raw_scale".into(),
            },
            DecoderKind::Maf => {
                let d = spec.data_dim;
                let feat = (2 * d / 3).max(1);
                let heads = spec
                    .latent_dims
                    .iter()
                    .enumerate()
                    .map(|(i, &zd)| {
                        ResidualParamHead::new(&format!("decoder/base/layer{}", i + 1), 2 * d, zd, feat, &spec.decoder_net)
                    })
                    .collect();
                Decoder::Maf {
                    base0: "decoder/base/initial".into(),
                    heads,
                    stack: MafStack::new("decoder/maf", d, total, &spec.maf)?,
                }
            }
        };
        Ok(Self { spec, layers, decoder })
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    /// Fresh parameters and buffers.
    pub fn init(&self, rng: &mut Rng) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for layer in &self.layers {
            if let Some(bn) = &layer.input_bn {
                bn.init(&mut store)?;
            }
            match &layer.prior {
                PriorNet::Standard => {}
                PriorNet::Constant { loc, raw } => {
                    store.insert(loc.clone(), Tensor::zeros(&[layer.dim]))?;
                    // variance 1 at start
                    let r = crate::distributions::raw_from_scale(1.0)?;
                    store.insert(raw.clone(), Tensor::full(&[layer.dim], r))?;
                }
                PriorNet::Conditioned { loc, raw } => {
                    loc.init(&mut store, rng)?;
                    raw.init(&mut store, rng)?;
                }
            }
            layer.bijector.init(&mut store, rng)?;
            layer.evidence.init(&mut store, rng)?;
            match &layer.posterior {
                PosteriorNet::Evidence { loc, raw } => {
                    loc.init(&mut store, rng)?;
                    raw.init(&mut store, rng)?;
                }
                PosteriorNet::Concat { latent, loc, raw } => {
                    latent.init(&mut store, rng)?;
                    loc.init(&mut store, rng)?;
                    raw.init(&mut store, rng)?;
                }
                PosteriorNet::Residual { latent, loc, raw, hidden, res_loc, res_raw } => {
                    for m in [latent, loc, raw, hidden, res_loc, res_raw] {
                        m.init(&mut store, rng)?;
                    }
                    res_loc.zero_output(&mut store)?;
                    res_raw.zero_output(&mut store)?;
                }
            }
        }
        match &self.decoder {
            Decoder::Bernoulli { net } => net.init(&mut store, rng)?,
            Decoder::Gaussian { net, raw } => {
                net.init(&mut store, rng)?;
                let r = crate::distributions::raw_from_scale(1.0)?;
                store.insert(raw.clone(), Tensor::full(&[self.spec.data_dim], r))?;
            }
            Decoder::Maf { base0, heads, stack } => {
                let d = self.spec.data_dim;
                let r = crate::distributions::raw_from_scale(1.0)?;
                let init: Vec<f64> = (0..2 * d).map(|i| if i < d { 0.0 } else { r }).collect();
                store.insert(base0.clone(), Tensor::vector(init))?;
                for h in heads {
                    h.init(&mut store, rng)?;
                }
                stack.init(&mut store, rng)?;
            }
        }
        Ok(store)
    }

    /// Prior and bijector of layer `l` (0-based) given `z^{l-1}`; shared by
    /// the generative and the inference pass.
    fn transition(&self, ctx: &mut Ctx, l: usize, prev: Option<Var>, rows: usize) -> Result<(Option<Var>, DiagGaussian, AffineVar)> {
        let layer = &self.layers[l];
        let zin = match (&layer.input_bn, prev) {
            (Some(bn), Some(z)) => Some(bn.forward(ctx, z)?),
            _ => prev,
        };
        let prior = match &layer.prior {
            PriorNet::Standard => DiagGaussian::standard(ctx, rows, layer.dim),
            PriorNet::Constant { loc, raw } => {
                let loc = ctx.param(loc)?;
                let loc = broadcast_rows(ctx, loc, rows)?;
                let raw = ctx.param(raw)?;
                let raw = broadcast_rows(ctx, raw, rows)?;
                DiagGaussian::from_raw(ctx, loc, raw)?
            }
            PriorNet::Conditioned { loc, raw } => {
                let z = zin.expect("conditioned prior has an input");
                let loc = loc.forward(ctx, z)?;
                let raw = raw.forward(ctx, z)?;
                DiagGaussian::from_raw(ctx, loc, raw)?
            }
        };
        let cond = if layer.bijector.learned_input { None } else { zin };
        let bij = layer.bijector.params(ctx, cond, rows)?;
        Ok((zin, prior, bij))
    }

    fn posterior(&self, ctx: &mut Ctx, l: usize, zin: Option<Var>, x: Var) -> Result<DiagGaussian> {
        let layer = &self.layers[l];
        let ev = layer.evidence.forward(ctx, x)?;
        match &layer.posterior {
            PosteriorNet::Evidence { loc, raw } => {
                let m = loc.forward(ctx, ev)?;
                let r = raw.forward(ctx, ev)?;
                DiagGaussian::from_raw(ctx, m, r)
            }
            PosteriorNet::Concat { latent, loc, raw } => {
                let lf = latent.forward(ctx, zin.expect("latent input"))?;
                let h = ctx.tape.concat(&[lf, ev])?;
                let m = loc.forward(ctx, h)?;
                let r = raw.forward(ctx, h)?;
                DiagGaussian::from_raw(ctx, m, r)
            }
            PosteriorNet::Residual { latent, loc, raw, hidden, res_loc, res_raw } => {
                let lf = latent.forward(ctx, zin.expect("latent input"))?;
                let m1 = loc.forward(ctx, lf)?;
                let r1 = raw.forward(ctx, lf)?;
                let first = ctx.tape.concat(&[m1, r1])?;
                let h = hidden.forward(ctx, first)?;
                let hin = ctx.tape.concat(&[h, ev])?;
                let dm = res_loc.forward(ctx, hin)?;
                let dr = res_raw.forward(ctx, hin)?;
                let m = ctx.tape.add(m1, dm)?;
                let r = ctx.tape.add(r1, dr)?;
                DiagGaussian::from_raw(ctx, m, r)
            }
        }
    }

    fn check_x(&self, ctx: &Ctx, x: Var) -> Result<usize> {
        let (rows, cols) = ctx.value(x).dims2();
        if cols != self.spec.data_dim {
            return Err(Error::shape("hierarchy", &[ctx.value(x).shape(), &[self.spec.data_dim]]));
        }
        Ok(rows)
    }

    /// Samples `ε^{1:L}` from the posterior and pushes each through its
    /// bijector. Draws one `[batch, D^l]` standard-normal block per layer.
    pub fn infer(&self, ctx: &mut Ctx, x: Var, noise: &mut dyn NoiseSource) -> Result<Vec<LayerTrace>> {
        let rows = self.check_x(ctx, x)?;
        let mut out: Vec<LayerTrace> = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let prev = out.last().map(|t| t.z);
            let (zin, prior, bij) = self.transition(ctx, l, prev, rows)?;
            let posterior = self.posterior(ctx, l, zin, x)?;
            let n = noise.normal(rows, self.layers[l].dim)?;
            let eps = posterior.sample(ctx, n)?;
            let z = bij.forward(ctx, eps)?;
            let kl = posterior.kl(ctx, &prior)?;
            out.push(LayerTrace { eps, z, prior, posterior, bijector: bij, kl });
        }
        Ok(out)
    }

    /// `log p(x | z^{1:L})` per row.
    pub fn decoder_log_prob(&self, ctx: &mut Ctx, zs: &[Var], x: Var) -> Result<Var> {
        let rows = self.check_x(ctx, x)?;
        let zcat = ctx.tape.concat(zs)?;
        match &self.decoder {
            Decoder::Bernoulli { net } => {
                let logits = net.forward(ctx, zcat)?;
                bernoulli_log_prob(ctx, logits, x)
            }
            Decoder::Gaussian { net, raw } => {
                let loc = net.forward(ctx, zcat)?;
                let r = ctx.param(raw)?;
                let r = broadcast_rows(ctx, r, rows)?;
                DiagGaussian::from_raw(ctx, loc, r)?.log_prob(ctx, x)
            }
            Decoder::Maf { base0, heads, stack } => {
                let base = self.maf_base(ctx, base0, heads, zs, rows)?;
                let (u0, ld) = stack.to_base(ctx, x, Some(zcat))?;
                let lp = base.log_prob(ctx, u0)?;
                ctx.tape.add(lp, ld)
            }
        }
    }

    fn maf_base(&self, ctx: &mut Ctx, base0: &str, heads: &[ResidualParamHead], zs: &[Var], rows: usize) -> Result<DiagGaussian> {
        let d = self.spec.data_dim;
        let g0 = ctx.param(base0)?;
        let mut g = broadcast_rows(ctx, g0, rows)?;
        for (head, &z) in heads.iter().zip(zs) {
            g = head.update(ctx, g, z)?;
        }
        let loc = ctx.tape.slice(g, 0, d)?;
        let raw = ctx.tape.slice(g, d, d)?;
        DiagGaussian::from_raw(ctx, loc, raw)
    }

    /// One reparameterized pass: posterior samples plus reconstruction term.
    pub fn elbo_terms(&self, ctx: &mut Ctx, x: Var, noise: &mut dyn NoiseSource) -> Result<ElboTerms> {
        let layers = self.infer(ctx, x, noise)?;
        let zs: Vec<Var> = layers.iter().map(|t| t.z).collect();
        let recon = self.decoder_log_prob(ctx, &zs, x)?;
        Ok(ElboTerms { layers, recon })
    }

    /// Batch-mean ELBO `E_q[log p(x|z)] − β Σ_l KL_l` (one sample) and the
    /// batch-mean per-layer KLs.
    pub fn elbo(
        &self,
        store: &ParameterStore,
        x: &Tensor,
        beta: f64,
        noise: &mut dyn NoiseSource,
        mode: Mode,
    ) -> Result<(f64, Vec<f64>)> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid("beta", format!("{beta} not in [0, 1]")));
        }
        let mut ctx = Ctx::no_grad(store, mode);
        let xv = ctx.constant(x.clone());
        let t = self.elbo_terms(&mut ctx, xv, noise)?;
        let mean = |ctx: &Ctx, v: Var| {
            let d = ctx.value(v).data();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let recon = mean(&ctx, t.recon);
        let kls: Vec<f64> = t.layers.iter().map(|l| mean(&ctx, l.kl)).collect();
        Ok((recon - beta * kls.iter().sum::<f64>(), kls))
    }

    /// Per-row log importance weights
    /// `log p(x|z) + Σ_l [log p(ε^l|z^{l-1}) − log q(ε^l|z^{l-1}, x)]`.
    pub fn log_weights(&self, store: &ParameterStore, x: &Tensor, noise: &mut dyn NoiseSource, mode: Mode) -> Result<Vec<f64>> {
        let mut ctx = Ctx::no_grad(store, mode);
        let xv = ctx.constant(x.clone());
        let t = self.elbo_terms(&mut ctx, xv, noise)?;
        let mut w = ctx.value(t.recon).data().to_vec();
        for l in &t.layers {
            let lp = l.prior.log_prob(&mut ctx, l.eps)?;
            let lq = l.posterior.log_prob(&mut ctx, l.eps)?;
            for (i, wi) in w.iter_mut().enumerate() {
                *wi += ctx.value(lp).data()[i] - ctx.value(lq).data()[i];
            }
        }
        Ok(w)
    }

    /// Importance-weighted bound per row, evaluated in eval mode. Rows are
    /// replicated `k` times and processed in chunks of at most `chunk_rows`.
    pub fn iwae_bound(&self, store: &ParameterStore, x: &Tensor, k: usize, noise: &mut dyn NoiseSource, chunk_rows: usize) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::invalid("k", "need at least one importance sample"));
        }
        let per_chunk = (chunk_rows / k).max(1);
        let mut out = Vec::with_capacity(x.rows());
        let mut start = 0;
        while start < x.rows() {
            let n = per_chunk.min(x.rows() - start);
            let block = x.slice_rows(start, n)?;
            // k draws per row: a row block of k samples, repeated over the K axis
            let samples_per_draw = (chunk_rows / n).clamp(1, k);
            let mut acc: Vec<Vec<f64>> = vec![Vec::with_capacity(k); n];
            let mut done = 0;
            while done < k {
                let m = samples_per_draw.min(k - done);
                let rep = block.repeat_rows(m);
                let w = self.log_weights(store, &rep, noise, Mode::Eval)?;
                for (i, a) in acc.iter_mut().enumerate() {
                    a.extend_from_slice(&w[i * m..(i + 1) * m]);
                }
                done += m;
            }
            out.extend(acc.iter().map(|w| log_mean_exp(w)));
            start += n;
        }
        Ok(out)
    }

    /// `Σ_l log p(ε^l | z^{l-1}) + log p(x | z^{1:L})` with the `z`s rebuilt
    /// from the given `ε`s. Eval mode; one value per row.
    pub fn joint_log_prob(&self, store: &ParameterStore, eps: &[Tensor], x: &Tensor) -> Result<Vec<f64>> {
        if eps.len() != self.layers() {
            return Err(Error::invalid("eps", format!("expected {} layers, got {}", self.layers(), eps.len())));
        }
        let mut ctx = Ctx::no_grad(store, Mode::Eval);
        let xv = ctx.constant(x.clone());
        let rows = self.check_x(&ctx, xv)?;
        let mut total = ctx.constant(Tensor::zeros(&[rows, 1]));
        let mut zs = Vec::with_capacity(self.layers());
        for (l, e) in eps.iter().enumerate() {
            if e.dims2() != (rows, self.layers[l].dim) {
                return Err(Error::shape("joint_log_prob", &[e.shape(), &[rows, self.layers[l].dim]]));
            }
            let (_, prior, bij) = self.transition(&mut ctx, l, zs.last().copied(), rows)?;
            let ev = ctx.constant(e.clone());
            let lp = prior.log_prob(&mut ctx, ev)?;
            total = ctx.tape.add(total, lp)?;
            zs.push(bij.forward(&mut ctx, ev)?);
        }
        let lx = self.decoder_log_prob(&mut ctx, &zs, xv)?;
        let total = ctx.tape.add(total, lx)?;
        Ok(ctx.value(total).data().to_vec())
    }

    /// `z^{1:L}` rebuilt from `ε^{1:L}` along the generative path, in `mode`.
    pub fn codes_from_noise(&self, store: &ParameterStore, eps: &[Tensor], mode: Mode) -> Result<Vec<Tensor>> {
        if eps.len() != self.layers() {
            return Err(Error::invalid("eps", format!("expected {} layers, got {}", self.layers(), eps.len())));
        }
        let rows = eps[0].rows();
        let mut ctx = Ctx::no_grad(store, mode);
        let mut zs: Vec<Var> = Vec::with_capacity(self.layers());
        for (l, e) in eps.iter().enumerate() {
            if e.dims2() != (rows, self.layers[l].dim) {
                return Err(Error::shape("codes_from_noise", &[e.shape(), &[rows, self.layers[l].dim]]));
            }
            let (_, _, bij) = self.transition(&mut ctx, l, zs.last().copied(), rows)?;
            let ev = ctx.constant(e.clone());
            zs.push(bij.forward(&mut ctx, ev)?);
        }
        Ok(zs.iter().map(|&z| ctx.value(z).clone()).collect())
    }

    /// Ancestral sampling in eval mode. Returns the codes `z^{1:L}`, the
    /// decoder mean (pixel probabilities, Gaussian mean, or the MAF sample)
    /// and a sample of `x`.
    pub fn generate(&self, store: &ParameterStore, n: usize, rng: &mut Rng) -> Result<Generated> {
        let mut ctx = Ctx::no_grad(store, Mode::Eval);
        let mut zs: Vec<Var> = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let (_, prior, bij) = self.transition(&mut ctx, l, zs.last().copied(), n)?;
            let noise = rng.normal(n, self.layers[l].dim)?;
            let eps = prior.sample(&mut ctx, noise)?;
            zs.push(bij.forward(&mut ctx, eps)?);
        }
        let zcat = ctx.tape.concat(&zs)?;
        let d = self.spec.data_dim;
        let (mean, sample) = match &self.decoder {
            Decoder::Bernoulli { net } => {
                let logits = net.forward(&mut ctx, zcat)?;
                let p = ctx.tape.sigmoid(logits)?;
                let p = ctx.value(p).clone();
                let u = rng.uniform(n, d)?;
                let s = Tensor::matrix(n, d, p.data().iter().zip(u.data()).map(|(p, u)| if u < p { 1.0 } else { 0.0 }).collect())?;
                (p, s)
            }
            Decoder::Gaussian { net, raw } => {
                let loc = net.forward(&mut ctx, zcat)?;
                let r = ctx.param(raw)?;
                let r = broadcast_rows(&mut ctx, r, n)?;
                let g = DiagGaussian::from_raw(&mut ctx, loc, r)?;
                let noise = rng.normal(n, d)?;
                let s = g.sample(&mut ctx, noise)?;
                (ctx.value(loc).clone(), ctx.value(s).clone())
            }
            Decoder::Maf { base0, heads, stack } => {
                let base = self.maf_base(&mut ctx, base0, heads, &zs, n)?;
                let noise = rng.normal(n, d)?;
                let u0 = base.sample(&mut ctx, noise)?;
                let u0 = ctx.value(u0).clone();
                let cond = ctx.value(zcat).clone();
                let x = stack.from_base(store, &u0, Some(&cond))?;
                (x.clone(), x)
            }
        };
        let zs = zs.iter().map(|&z| ctx.value(z).clone()).collect();
        Ok(Generated { zs, mean, sample })
    }

    /// Batch-mean ELBO, per-layer KLs and optionally the IWAE bound over a
    /// data matrix, in eval mode.
    pub fn evaluate(
        &self,
        store: &ParameterStore,
        x: &Tensor,
        iw_samples: Option<usize>,
        noise: &mut dyn NoiseSource,
        batch: usize,
    ) -> Result<EvalReport> {
        let batch = batch.max(1);
        let (mut elbo, mut recon) = (0.0, 0.0);
        let mut kls = vec![0.0; self.layers()];
        let mut start = 0;
        while start < x.rows() {
            let n = batch.min(x.rows() - start);
            let xb = x.slice_rows(start, n)?;
            let mut ctx = Ctx::no_grad(store, Mode::Eval);
            let xv = ctx.constant(xb);
            let t = self.elbo_terms(&mut ctx, xv, noise)?;
            let r: f64 = ctx.value(t.recon).data().iter().sum();
            recon += r;
            elbo += r;
            for (k, l) in kls.iter_mut().zip(&t.layers) {
                let s: f64 = ctx.value(l.kl).data().iter().sum();
                *k += s;
                elbo -= s;
            }
            start += n;
        }
        let rows = x.rows() as f64;
        let iwae = match iw_samples {
            Some(k) => {
                let b = self.iwae_bound(store, x, k, noise, 4096)?;
                Some(b.iter().sum::<f64>() / rows)
            }
            None => None,
        };
        Ok(EvalReport {
            elbo: elbo / rows,
            recon: recon / rows,
            kls: kls.iter().map(|k| k / rows).collect(),
            iwae,
            iwae_samples: iw_samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub zs: Vec<Tensor>,
    pub mean: Tensor,
    pub sample: Tensor,
}

/// `log (1/n Σ exp wᵢ)` computed stably.
pub fn log_mean_exp(w: &[f64]) -> f64 {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (w.iter().map(|v| (v - m).exp()).sum::<f64>() / w.len() as f64).ln()
}

/// Small spec used by tests and examples: two-layer-wide MLPs everywhere.
pub fn tiny_spec(data_dim: usize, latent_dims: Vec<usize>, hidden: usize) -> HierarchySpec {
    let relu = MlpSpec::relu(vec![hidden]);
    HierarchySpec {
        data_dim,
        latent_dims,
        evidence_encoder: relu.clone(),
        evidence_features: hidden.max(2),
        latent_encoder: relu.clone(),
        latent_features: hidden.max(2),
        posterior_head: relu.clone(),
        prior_head: relu.clone(),
        bijector_head: MlpSpec::new(vec![hidden], Activation::Tanh, Activation::Tanh),
        bijector_cond_dim: 2,
        decoder_net: relu,
        ..HierarchySpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[1000.0, 1000.0]) - 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn builds_all_variants() {
        for wiring in [Wiring::SelfReflective, Wiring::Dlgm] {
            for style in [VariationalStyle::Concat, VariationalStyle::Residual] {
                for decoder in [DecoderKind::Bernoulli, DecoderKind::Gaussian, DecoderKind::Maf] {
                    let mut spec = tiny_spec(4, vec![2, 3], 6);
                    spec.wiring = wiring;
                    spec.variational_style = style;
                    spec.decoder = decoder;
                    spec.maf = MafSpec { mades_per_flow: 2, hidden: vec![6], ..MafSpec::default() };
                    let h = Hierarchy::new(spec).unwrap();
                    let store = h.init(&mut seeded(0)).unwrap();
                    let x = Tensor::matrix(3, 4, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
                    let (e, kls) = h.elbo(&store, &x, 1.0, &mut seeded(1), Mode::Train).unwrap();
                    assert!(e.is_finite());
                    assert_eq!(kls.len(), 2);
                    assert!(kls.iter().all(|&k| k >= 0.0));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let h = Hierarchy::new(tiny_spec(4, vec![2], 4)).unwrap();
        let store = h.init(&mut seeded(0)).unwrap();
        let x = Tensor::zeros(&[2, 3]);
        assert!(h.elbo(&store, &x, 1.0, &mut seeded(0), Mode::Eval).is_err());
        let x = Tensor::zeros(&[2, 4]);
        assert!(h.elbo(&store, &x, 1.5, &mut seeded(0), Mode::Eval).is_err());
        assert!(h.iwae_bound(&store, &x, 0, &mut seeded(0), 64).is_err());
        let mut bad = tiny_spec(4, vec![], 4);
        assert!(Hierarchy::new(bad.clone()).is_err());
        bad.latent_dims = vec![0];
        assert!(Hierarchy::new(bad).is_err());
    }
}
