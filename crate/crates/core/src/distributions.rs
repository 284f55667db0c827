//! Diagonal and diagonal-plus-rank-1 Gaussians, Bernoulli logits, and the
//! analytic KL between diagonal Gaussians.
//!
//! Every Gaussian head emits a raw scale that is mapped to a variance by
//! `softplus(elu(raw))`. The map is strictly positive, monotone, leaves
//! large values essentially unchanged and floors very negative inputs at
//! `softplus(-1) ≈ 0.3133`.
//!
//! Two flavors of each density live here: plain functions on slices (used
//! by oracles, bijector checks and reporting) and batched tape versions in
//! [`graph`] that return one value per row as a `[batch, 1]` column.

use crate::autodiff::{elu, softplus};
use crate::error::{Error, Result};
use crate::rng::NoiseSource;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn scale_from_raw_scalar(raw: f64) -> f64 {
    softplus(elu(raw))
}

/// `softplus(elu(raw))` elementwise.
pub fn scale_from_raw(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&r| scale_from_raw_scalar(r)).collect()
}

/// Smallest value `scale_from_raw` approaches as `raw → -∞`.
pub fn scale_floor() -> f64 {
    softplus(-1.0)
}

/// Inverse of [`scale_from_raw_scalar`]; defined above [`scale_floor`].
pub fn raw_from_scale(scale: f64) -> Result<f64> {
    if !(scale > scale_floor()) || !scale.is_finite() {
        return Err(Error::invalid("scale", format!("{scale} is not above the floor {:.6}", scale_floor())));
    }
    let y = scale.exp_m1().ln();
    Ok(if y > 0.0 { y } else { y.ln_1p() })
}

fn check_dims(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[&[a], &[b]]));
    }
    Ok(())
}

/// Diagonal Gaussian as emitted by a network head.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiagParams {
    pub loc: Vec<f64>,
    pub raw_scale: Vec<f64>,
}

/// Diagonal Gaussian in moment form.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianDiagParams {
    pub fn new(loc: Vec<f64>, raw_scale: Vec<f64>) -> Result<Self> {
        check_dims("GaussianDiagParams", loc.len(), raw_scale.len())?;
        Ok(Self { loc, raw_scale })
    }

    pub fn variance(&self) -> Vec<f64> {
        scale_from_raw(&self.raw_scale)
    }

    pub fn moments(&self) -> DiagGaussian {
        DiagGaussian { mean: self.loc.clone(), var: self.variance() }
    }

    /// Reparameterized draw `μ + σ ⊙ n`; returns `(sample, n)`.
    pub fn sample(&self, rng: &mut dyn NoiseSource) -> Result<(Vec<f64>, Vec<f64>)> {
        let noise = rng.normal(1, self.loc.len())?.into_data();
        Ok((self.moments().transform(&noise)?, noise))
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        self.moments().log_prob(x)
    }
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dims("DiagGaussian", mean.len(), var.len())?;
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("var", "variances must be positive"));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `μ + σ ⊙ noise`.
    pub fn transform(&self, noise: &[f64]) -> Result<Vec<f64>> {
        check_dims("gauss_diag_sample", self.dim(), noise.len())?;
        Ok(self.mean.iter().zip(&self.var).zip(noise).map(|((m, v), n)| m + v.sqrt() * n).collect())
    }

    /// `Σᵢ −½ ln(2πσᵢ²) − (xᵢ − μᵢ)² / (2σᵢ²)`.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dims("gauss_diag_log_prob", self.dim(), x.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((m, v), xi)| -0.5 * (LN_2PI + v.ln()) - (xi - m).powi(2) / (2.0 * v))
            .sum())
    }
}

/// `KL(q ‖ p) = Σᵢ ½ [σq²/σp² + (μp − μq)²/σp² − 1 + ln(σp²/σq²)]`.
pub fn kl_diag_diag(q: &GaussianDiagParams, p: &GaussianDiagParams) -> Result<f64> {
    kl_moments(&q.moments(), &p.moments())
}

pub fn kl_moments(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dims("kl_diag_diag", q.dim(), p.dim())?;
    Ok(q.mean
        .iter()
        .zip(&q.var)
        .zip(p.mean.iter().zip(&p.var))
        .map(|((mq, vq), (mp, vp))| 0.5 * (vq / vp + (mp - mq).powi(2) / vp - 1.0 + (vp / vq).ln()))
        .sum())
}

/// Gaussian with covariance `diag(d) + u uᵀ`, `d = softplus(elu(raw_diag))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiagRank1Params {
    pub loc: Vec<f64>,
    pub raw_diag: Vec<f64>,
    pub perturb: Vec<f64>,
}

impl GaussianDiagRank1Params {
    pub fn new(loc: Vec<f64>, raw_diag: Vec<f64>, perturb: Vec<f64>) -> Result<Self> {
        check_dims("GaussianDiagRank1Params", loc.len(), raw_diag.len())?;
        check_dims("GaussianDiagRank1Params", loc.len(), perturb.len())?;
        Ok(Self { loc, raw_diag, perturb })
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn diag(&self) -> Vec<f64> {
        scale_from_raw(&self.raw_diag)
    }

    /// `ln det(diag(d) + u uᵀ) = Σ ln dᵢ + ln(1 + Σ uᵢ²/dᵢ)`.
    pub fn log_det_cov(&self) -> f64 {
        let d = self.diag();
        let s: f64 = self.perturb.iter().zip(&d).map(|(u, di)| u * u / di).sum();
        d.iter().map(|v| v.ln()).sum::<f64>() + s.ln_1p()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dims("gauss_rank1_log_prob", self.dim(), x.len())?;
        let d = self.diag();
        let r: Vec<f64> = x.iter().zip(&self.loc).map(|(a, b)| a - b).collect();
        // Sherman–Morrison: rᵀ(D + uuᵀ)⁻¹r = rᵀD⁻¹r − (uᵀD⁻¹r)² / (1 + uᵀD⁻¹u)
        let q0: f64 = r.iter().zip(&d).map(|(ri, di)| ri * ri / di).sum();
        let ur: f64 = self.perturb.iter().zip(&r).zip(&d).map(|((u, ri), di)| u * ri / di).sum();
        let uu: f64 = self.perturb.iter().zip(&d).map(|(u, di)| u * u / di).sum();
        let quad = q0 - ur * ur / (1.0 + uu);
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det_cov() + quad))
    }

    /// `loc + √d ⊙ n₁ + u n₂` with `n₁ ~ N(0, I)`, `n₂ ~ N(0, 1)`.
    pub fn sample(&self, rng: &mut dyn NoiseSource) -> Result<Vec<f64>> {
        let n1 = rng.normal(1, self.dim())?.into_data();
        let n2 = rng.normal(1, 1)?.into_data()[0];
        let d = self.diag();
        Ok((0..self.dim()).map(|i| self.loc[i] + d[i].sqrt() * n1[i] + self.perturb[i] * n2).collect())
    }
}

/// `Σᵢ xᵢ·lᵢ − softplus(lᵢ)` for binary `x`.
pub fn bernoulli_log_prob(logits: &[f64], x: &[f64]) -> Result<f64> {
    check_dims("bernoulli_log_prob", logits.len(), x.len())?;
    if x.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("x", "Bernoulli observations must be 0 or 1"));
    }
    Ok(logits.iter().zip(x).map(|(&l, &xi)| xi * l - softplus(l)).sum())
}

/// Batched densities on the tape. Inputs are `[batch, dim]` matrices;
/// per-row results come back as `[batch, 1]` columns.
pub mod graph {
    use crate::autodiff::Var;
    use crate::error::{Error, Result};
    use crate::params::Ctx;
    use crate::tensor::Tensor;

    use super::LN_2PI;

    pub fn scale_from_raw(ctx: &mut Ctx, raw: Var) -> Result<Var> {
        let e = ctx.tape.elu(raw)?;
        ctx.tape.softplus(e)
    }

    /// Diagonal Gaussian with per-row mean and variance.
    #[derive(Clone, Copy, Debug)]
    pub struct DiagGaussian {
        pub loc: Var,
        pub var: Var,
    }

    impl DiagGaussian {
        pub fn from_raw(ctx: &mut Ctx, loc: Var, raw: Var) -> Result<Self> {
            if ctx.value(loc).shape() != ctx.value(raw).shape() {
                return Err(Error::shape("gaussian_diag", &[ctx.value(loc).shape(), ctx.value(raw).shape()]));
            }
            let var = scale_from_raw(ctx, raw)?;
            Ok(Self { loc, var })
        }

        pub fn standard(ctx: &mut Ctx, rows: usize, cols: usize) -> Self {
            let loc = ctx.constant(Tensor::zeros(&[rows, cols]));
            let var = ctx.constant(Tensor::full(&[rows, cols], 1.0));
            Self { loc, var }
        }

        /// `loc + √var ⊙ noise`.
        pub fn sample(&self, ctx: &mut Ctx, noise: Tensor) -> Result<Var> {
            let n = ctx.constant(noise);
            let sd = ctx.tape.sqrt(self.var)?;
            let s = ctx.tape.mul(sd, n)?;
            ctx.tape.add(self.loc, s)
        }

        pub fn log_prob(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
            let dim = ctx.value(x).cols();
            let r = ctx.tape.sub(x, self.loc)?;
            let r2 = ctx.tape.square(r)?;
            let q = ctx.tape.div(r2, self.var)?;
            let lv = ctx.tape.log(self.var)?;
            let t = ctx.tape.add(q, lv)?;
            let s = ctx.tape.sum_axis(t, 1)?;
            let s = ctx.tape.offset(s, dim as f64 * LN_2PI)?;
            ctx.tape.scale(s, -0.5)
        }

        /// Per-row `KL(self ‖ p)`.
        pub fn kl(&self, ctx: &mut Ctx, p: &DiagGaussian) -> Result<Var> {
            let ratio = ctx.tape.div(self.var, p.var)?;
            let d = ctx.tape.sub(p.loc, self.loc)?;
            let d2 = ctx.tape.square(d)?;
            let m = ctx.tape.div(d2, p.var)?;
            let lr = ctx.tape.log(ratio)?;
            let t = ctx.tape.add(ratio, m)?;
            let t = ctx.tape.sub(t, lr)?;
            let t = ctx.tape.offset(t, -1.0)?;
            let s = ctx.tape.sum_axis(t, 1)?;
            ctx.tape.scale(s, 0.5)
        }
    }

    /// Per-row Bernoulli log-likelihood `Σ x·l − softplus(l)`.
    pub fn bernoulli_log_prob(ctx: &mut Ctx, logits: Var, x: Var) -> Result<Var> {
        let xl = ctx.tape.mul(x, logits)?;
        let sp = ctx.tape.softplus(logits)?;
        let t = ctx.tape.sub(xl, sp)?;
        ctx.tape.sum_axis(t, 1)
    }

    /// Per-row log-density of `N(loc, diag(d) + u uᵀ)` where `diag` already
    /// holds the positive `d`.
    pub fn rank1_log_prob(ctx: &mut Ctx, loc: Var, diag: Var, perturb: Var, x: Var) -> Result<Var> {
        let dim = ctx.value(x).cols();
        let r = ctx.tape.sub(x, loc)?;
        let r_over_d = ctx.tape.div(r, diag)?;
        let q0 = ctx.tape.mul(r, r_over_d)?;
        let q0 = ctx.tape.sum_axis(q0, 1)?;
        let ur = ctx.tape.mul(perturb, r_over_d)?;
        let ur = ctx.tape.sum_axis(ur, 1)?;
        let u2 = ctx.tape.square(perturb)?;
        let u2d = ctx.tape.div(u2, diag)?;
        let uu = ctx.tape.sum_axis(u2d, 1)?;
        let one_plus = ctx.tape.offset(uu, 1.0)?;
        let ur2 = ctx.tape.square(ur)?;
        let corr = ctx.tape.div(ur2, one_plus)?;
        let quad = ctx.tape.sub(q0, corr)?;
        let ld = ctx.tape.log(diag)?;
        let ld = ctx.tape.sum_axis(ld, 1)?;
        let l1 = ctx.tape.log(one_plus)?;
        let logdet = ctx.tape.add(ld, l1)?;
        let t = ctx.tape.add(quad, logdet)?;
        let t = ctx.tape.offset(t, dim as f64 * LN_2PI)?;
        ctx.tape.scale(t, -0.5)
    }
}
