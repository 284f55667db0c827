//! Exact Gaussian ground truth for linear instances of the hierarchy, the
//! conditional-independence check on its posterior, and a finite-difference
//! gradient checker.
//!
//! Every variable of a linear model is an affine function `A ξ + c` of the
//! standard-normal noise `ξ = (n¹, …, n^L, η)`, so covariances are `A Aᵀ`
//! and conditioning is a Schur complement. The `z`s never enter the joint
//! as degenerate Gaussians.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::distributions::{raw_from_scale, scale_floor, LN_2PI};
use crate::error::{Error, Result};
use crate::hierarchy::{DecoderKind, HierarchySpec, PriorStyle, VariationalStyle, Wiring};
use crate::nn::MlpSpec;
use crate::params::ParameterStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One linear layer:
/// `ε = M z_prev + m + √V n`, `z = S ε + B z_prev + b`, `S = diag(d) + u uᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub prior_map: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_var: DVector<f64>,
    pub diag: DVector<f64>,
    pub perturb: DVector<f64>,
    pub shift_map: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl LinearLayer {
    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn scale_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag) + &self.perturb * self.perturb.transpose()
    }
}

/// Linear-Gaussian hierarchy with observation `x = Σ_l C^l z^l + c + √R η`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    pub layers: Vec<LinearLayer>,
    pub obs_maps: Vec<DMatrix<f64>>,
    pub obs_offset: DVector<f64>,
    pub obs_var: DVector<f64>,
}

/// `A ξ + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl Affine {
    fn stack(parts: &[&Affine]) -> Affine {
        let cols = parts[0].a.ncols();
        let rows: usize = parts.iter().map(|p| p.a.nrows()).sum();
        let mut a = DMatrix::zeros(rows, cols);
        let mut c = DVector::zeros(rows);
        let mut r = 0;
        for p in parts {
            a.rows_mut(r, p.a.nrows()).copy_from(&p.a);
            c.rows_mut(r, p.c.len()).copy_from(&p.c);
            r += p.a.nrows();
        }
        Affine { a, c }
    }

    fn cov(&self, other: &Affine) -> DMatrix<f64> {
        &self.a * other.a.transpose()
    }
}

/// All model variables as affine maps of the noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagated {
    pub eps: Vec<Affine>,
    pub z: Vec<Affine>,
    pub x: Affine,
}

/// Mean and covariance over `(ε¹, …, ε^L, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianJoint {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `(name, offset, len)` for each block.
    pub blocks: Vec<(String, usize, usize)>,
}

impl LinearGaussianModel {
    pub fn data_dim(&self) -> usize {
        self.obs_offset.len()
    }

    pub fn latent_dims(&self) -> Vec<usize> {
        self.layers.iter().map(LinearLayer::dim).collect()
    }

    fn noise_dim(&self) -> usize {
        self.latent_dims().iter().sum::<usize>() + self.data_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("linear model: {what}")));
        if self.layers.is_empty() || self.obs_maps.len() != self.layers.len() {
            return bad("need one observation map per layer and at least one layer");
        }
        let dx = self.data_dim();
        if self.obs_var.len() != dx || self.obs_var.iter().any(|&r| !(r > 0.0)) {
            return bad("observation variance must be positive with one entry per output");
        }
        let mut prev = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let d = l.dim();
            let ok = d > 0
                && l.prior_map.shape() == (d, prev)
                && l.shift_map.shape() == (d, prev)
                && l.prior_var.len() == d
                && l.diag.len() == d
                && l.perturb.len() == d
                && l.shift.len() == d
                && self.obs_maps[i].shape() == (dx, d);
            if !ok {
                return bad(&format!("dimension mismatch in layer {}", i + 1));
            }
            if l.prior_var.iter().chain(l.diag.iter()).any(|&v| !(v > 0.0)) {
                return bad(&format!("layer {} needs positive variances and diagonal", i + 1));
            }
            prev = d;
        }
        Ok(())
    }

    pub fn propagate(&self) -> Result<Propagated> {
        self.validate()?;
        let n = self.noise_dim();
        let mut eps = Vec::with_capacity(self.layers.len());
        let mut zs: Vec<Affine> = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            let d = l.dim();
            let mut a = DMatrix::zeros(d, n);
            for i in 0..d {
                a[(i, off + i)] = l.prior_var[i].sqrt();
            }
            let mut c = l.prior_mean.clone();
            if let Some(zp) = zs.last() {
                a += &l.prior_map * &zp.a;
                c += &l.prior_map * &zp.c;
            }
            let e = Affine { a, c };
            let s = l.scale_matrix();
            let mut za = &s * &e.a;
            let mut zc = &s * &e.c + &l.shift;
            if let Some(zp) = zs.last() {
                za += &l.shift_map * &zp.a;
                zc += &l.shift_map * &zp.c;
            }
            eps.push(e);
            zs.push(Affine { a: za, c: zc });
            off += d;
        }
        let dx = self.data_dim();
        let mut xa = DMatrix::zeros(dx, n);
        for i in 0..dx {
            xa[(i, off + i)] = self.obs_var[i].sqrt();
        }
        let mut xc = self.obs_offset.clone();
        for (cm, z) in self.obs_maps.iter().zip(&zs) {
            xa += cm * &z.a;
            xc += cm * &z.c;
        }
        Ok(Propagated { eps, z: zs, x: Affine { a: xa, c: xc } })
    }

    /// Draws `n` joint samples; returns per-layer `ε` matrices and `x`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<(Vec<Tensor>, Tensor)> {
        let p = self.propagate()?;
        let nd = self.noise_dim();
        let mut eps: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        let mut xs = Vec::with_capacity(n * self.data_dim());
        for _ in 0..n {
            let xi = DVector::from_iterator(nd, (0..nd).map(|_| rng.sample::<f64, _>(StandardNormal)));
            for (l, e) in p.eps.iter().enumerate() {
                eps[l].extend((&e.a * &xi + &e.c).iter());
            }
            xs.extend((&p.x.a * &xi + &p.x.c).iter());
        }
        let eps = eps
            .into_iter()
            .zip(self.latent_dims())
            .map(|(v, d)| Tensor::matrix(n, d, v))
            .collect::<Result<_>>()?;
        Ok((eps, Tensor::matrix(n, self.data_dim(), xs)?))
    }
}

pub fn build_joint(model: &LinearGaussianModel) -> Result<GaussianJoint> {
    let p = model.propagate()?;
    let mut parts: Vec<&Affine> = p.eps.iter().collect();
    parts.push(&p.x);
    let all = Affine::stack(&parts);
    let mut blocks = Vec::new();
    let mut off = 0;
    for (i, e) in p.eps.iter().enumerate() {
        blocks.push((format!("eps{}", i + 1), off, e.c.len()));
        off += e.c.len();
    }
    blocks.push(("x".into(), off, p.x.c.len()));
    Ok(GaussianJoint { mean: all.c.clone(), cov: all.cov(&all), blocks })
}

fn gaussian_log_density(mean: &DVector<f64>, cov: DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    let n = mean.len();
    let chol = cov.cholesky().ok_or(Error::Singular("marginal covariance"))?;
    let r = x - mean;
    let sol = chol.solve(&r);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64 * LN_2PI + logdet + r.dot(&sol)))
}

/// `log p(x)` under the model.
pub fn exact_log_marginal(model: &LinearGaussianModel, x: &[f64]) -> Result<f64> {
    let p = model.propagate()?;
    if x.len() != model.data_dim() {
        return Err(Error::shape("exact_log_marginal", &[&[x.len()], &[model.data_dim()]]));
    }
    gaussian_log_density(&p.x.c, p.x.cov(&p.x), &DVector::from_column_slice(x))
}

/// `log p(ε¹, …, ε^L, x)` from the joint Gaussian.
pub fn exact_joint_log_prob(model: &LinearGaussianModel, eps: &[&[f64]], x: &[f64]) -> Result<f64> {
    let j = build_joint(model)?;
    let v: Vec<f64> = eps.iter().flat_map(|e| e.iter().copied()).chain(x.iter().copied()).collect();
    if v.len() != j.mean.len() || eps.len() != model.layers.len() {
        return Err(Error::shape("exact_joint_log_prob", &[&[v.len()], &[j.mean.len()]]));
    }
    gaussian_log_density(&j.mean, j.cov, &DVector::from_vec(v))
}

/// `Cov(a, b | y)` for affine maps of the same noise.
fn conditional_cross_cov(a: &Affine, b: &Affine, y: &Affine) -> Result<DMatrix<f64>> {
    let syy = y.cov(y);
    let chol = syy.cholesky().ok_or(Error::Singular("conditioning block"))?;
    let sab = a.cov(b);
    let say = a.cov(y);
    let syb = y.cov(b);
    Ok(sab - say * chol.solve(&syb))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Largest `|Cov(ε^l, ε^{<l-1} | z^{l-1}, x)|` over `l = 3..=L`; the
/// self-reflective factorization predicts zero.
pub fn verify_factorization(model: &LinearGaussianModel) -> Result<f64> {
    factorization_residual(model, false)
}

/// Same check with `ε^{l-1}` in place of `z^{l-1}` as the conditioning
/// code, as a model without shared bijectors would use.
pub fn broken_wiring_residual(model: &LinearGaussianModel) -> Result<f64> {
    factorization_residual(model, true)
}

fn factorization_residual(model: &LinearGaussianModel, use_eps: bool) -> Result<f64> {
    let l_count = model.layers.len();
    if l_count < 3 {
        return Err(Error::invalid("model", "the factorization check needs at least 3 layers"));
    }
    let p = model.propagate()?;
    let mut worst = 0.0f64;
    for l in 2..l_count {
        let earlier: Vec<&Affine> = p.eps[..l - 1].iter().collect();
        let b = Affine::stack(&earlier);
        let code = if use_eps { &p.eps[l - 1] } else { &p.z[l - 1] };
        let y = Affine::stack(&[code, &p.x]);
        worst = worst.max(max_abs(&conditional_cross_cov(&p.eps[l], &b, &y)?));
    }
    Ok(worst)
}

/// Exact `p(ε^l | z^{l-1}, x)` (just `x` for the first layer) as
/// `mean = K_z z + K_x x + bias` with covariance `cov`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPosterior {
    pub gain_z: DMatrix<f64>,
    pub gain_x: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn layer_posterior(model: &LinearGaussianModel, l: usize) -> Result<LayerPosterior> {
    let p = model.propagate()?;
    let e = &p.eps[l];
    let y = if l == 0 { p.x.clone() } else { Affine::stack(&[&p.z[l - 1], &p.x]) };
    let syy = y.cov(&y);
    let chol = syy.cholesky().ok_or(Error::Singular("posterior conditioning block"))?;
    let sey = e.cov(&y);
    let gain = chol.solve(&sey.transpose()).transpose();
    let cov = e.cov(e) - &gain * sey.transpose();
    let bias = &e.c - &gain * &y.c;
    let dz = if l == 0 { 0 } else { p.z[l - 1].c.len() };
    Ok(LayerPosterior {
        gain_z: gain.columns(0, dz).into_owned(),
        gain_x: gain.columns(dz, model.data_dim()).into_owned(),
        bias,
        cov,
    })
}

/// Random self-reflective linear model. Only the top layer feeds the
/// observation, which is the setting where the posterior factorizes.
pub fn random_sere_model(rng: &mut Rng, dims: &[usize], data_dim: usize) -> LinearGaussianModel {
    random_model(rng, dims, data_dim, false)
}

/// Random model with the wiring of a hierarchy without shared conditioned
/// bijectors: independent priors, identity bijectors, and every layer
/// feeding the observation.
pub fn random_dlgm_model(rng: &mut Rng, dims: &[usize], data_dim: usize) -> LinearGaussianModel {
    random_model(rng, dims, data_dim, true)
}

fn random_model(rng: &mut Rng, dims: &[usize], data_dim: usize, dlgm: bool) -> LinearGaussianModel {
    let normal = |r: usize, c: usize, rng: &mut Rng| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut layers = Vec::with_capacity(dims.len());
    let mut obs_maps = Vec::with_capacity(dims.len());
    let mut prev = 0;
    for (i, &d) in dims.iter().enumerate() {
        let uniform = |rng: &mut Rng, lo: f64, hi: f64| DVector::from_fn(d, |_, _| rng.random_range(lo..hi));
        let layer = LinearLayer {
            prior_map: if dlgm { DMatrix::zeros(d, prev) } else { normal(d, prev, rng) * 0.7 },
            prior_mean: normal(d, 1, rng).column(0).into_owned(),
            prior_var: uniform(rng, 0.5, 2.0),
            diag: if dlgm { DVector::from_element(d, 1.0) } else { uniform(rng, 0.5, 2.0) },
            perturb: if dlgm { DVector::zeros(d) } else { normal(d, 1, rng).column(0) * 0.7 },
            shift_map: if dlgm { DMatrix::zeros(d, prev) } else { normal(d, prev, rng) * 0.7 },
            shift: normal(d, 1, rng).column(0).into_owned(),
        };
        let feeds = dlgm || i + 1 == dims.len();
        obs_maps.push(if feeds { normal(data_dim, d, rng) * 0.7 } else { DMatrix::zeros(data_dim, d) });
        layers.push(layer);
        prev = d;
    }
    let obs_offset = normal(data_dim, 1, rng).column(0).into_owned();
    let obs_var = DVector::from_fn(data_dim, |_, _| rng.random_range(0.5..1.5));
    LinearGaussianModel { layers, obs_maps, obs_offset, obs_var }
}

fn weight_from_map(m: &DMatrix<f64>) -> Tensor {
    let (out, inp) = m.shape();
    let mut data = vec![0.0; inp * out];
    for i in 0..inp {
        for o in 0..out {
            data[i * out + o] = m[(o, i)];
        }
    }
    Tensor::matrix(inp, out, data).expect("sized")
}

fn set_linear(store: &mut ParameterStore, name: &str, map: &DMatrix<f64>, bias: &[f64]) -> Result<()> {
    store.set(&format!("{name}/dense0/weight"), weight_from_map(map))?;
    store.set(&format!("{name}/dense0/bias"), Tensor::vector(bias.to_vec()))
}

/// Output of [`to_hierarchy`].
#[derive(Clone, Debug)]
pub struct MatchedHierarchy {
    pub spec: HierarchySpec,
    pub store: ParameterStore,
    pub clamped: usize,
}

fn raws(v: impl Iterator<Item = f64>) -> Result<Vec<f64>> {
    v.map(raw_from_scale).collect()
}

/// Hierarchy spec with linear networks and parameters reproducing `model`.
/// The variational layers are set to the exact per-layer conditional
/// `p(ε^l | z^{l-1}, x)` with its covariance reduced to the diagonal of
/// the mean-field fit `1 / diag(Σ⁻¹)`; that is exact when every layer is
/// one-dimensional. Generative variances must lie above the floor of the
/// scale map; variational variances below it are raised to `1.05 × floor`
/// and counted in `clamped`, which keeps `q` a valid, wider proposal.
pub fn to_hierarchy(model: &LinearGaussianModel) -> Result<MatchedHierarchy> {
    model.validate()?;
    let dims = model.latent_dims();
    let dx = model.data_dim();
    let feat = *dims.iter().max().expect("nonempty");
    let spec = HierarchySpec {
        data_dim: dx,
        latent_dims: dims.clone(),
        wiring: Wiring::SelfReflective,
        variational_style: VariationalStyle::Concat,
        prior_style: PriorStyle::ConditionedDiagGaussian,
        decoder: DecoderKind::Gaussian,
        evidence_encoder: MlpSpec::linear(),
        evidence_features: dx,
        latent_encoder: MlpSpec::linear(),
        latent_features: feat,
        posterior_head: MlpSpec::linear(),
        prior_head: MlpSpec::linear(),
        bijector_head: MlpSpec::linear(),
        bijector_cond_dim: 1,
        decoder_net: MlpSpec::linear(),
        input_batch_norm: false,
        ..HierarchySpec::default()
    };
    let h = crate::hierarchy::Hierarchy::new(spec.clone())?;
    let mut store = h.init(&mut crate::rng::seeded(0))?;
    let eye = |n: usize| DMatrix::<f64>::identity(n, n);
    let mut clamped = 0;
    for (i, layer) in model.layers.iter().enumerate() {
        let l = i + 1;
        let d = layer.dim();
        let name = format!("layer{l}");
        let raw_var = raws(layer.prior_var.iter().copied())?;
        let raw_diag = raws(layer.diag.iter().copied())?;
        if i == 0 {
            store.set(&format!("{name}/prior/loc"), Tensor::vector(layer.prior_mean.as_slice().to_vec()))?;
            store.set(&format!("{name}/prior/raw_scale"), Tensor::vector(raw_var))?;
            let zero = DMatrix::zeros(d, 1);
            store.set(&format!("{name}/bijector/const_input"), Tensor::vector(vec![0.0]))?;
            set_linear(&mut store, &format!("{name}/bijector/shift"), &zero, layer.shift.as_slice())?;
            set_linear(&mut store, &format!("{name}/bijector/diag"), &zero, &raw_diag)?;
            set_linear(&mut store, &format!("{name}/bijector/perturb"), &zero, layer.perturb.as_slice())?;
        } else {
            let prev = dims[i - 1];
            let zero = DMatrix::zeros(d, prev);
            set_linear(&mut store, &format!("{name}/prior/loc"), &layer.prior_map, layer.prior_mean.as_slice())?;
            set_linear(&mut store, &format!("{name}/prior/raw_scale"), &zero, &raw_var)?;
            set_linear(&mut store, &format!("{name}/bijector/shift"), &layer.shift_map, layer.shift.as_slice())?;
            set_linear(&mut store, &format!("{name}/bijector/diag"), &zero, &raw_diag)?;
            set_linear(&mut store, &format!("{name}/bijector/perturb"), &zero, layer.perturb.as_slice())?;
            let mut lat = DMatrix::zeros(feat, prev);
            lat.view_mut((0, 0), (prev, prev)).copy_from(&eye(prev));
            set_linear(&mut store, &format!("{name}/latent"), &lat, &vec![0.0; feat])?;
        }
        set_linear(&mut store, &format!("{name}/evidence"), &eye(dx), &vec![0.0; dx])?;
        let post = layer_posterior(model, i)?;
        let gain = if i == 0 {
            post.gain_x.clone()
        } else {
            let prev = dims[i - 1];
            let mut g = DMatrix::zeros(d, feat + dx);
            g.view_mut((0, 0), (d, prev)).copy_from(&post.gain_z);
            g.view_mut((0, feat), (d, dx)).copy_from(&post.gain_x);
            g
        };
        let precision = post.cov.clone().try_inverse().ok_or(Error::Singular("posterior covariance"))?;
        let lowest = 1.05 * scale_floor();
        let q_var = raws(precision.diagonal().iter().map(|p| {
            if 1.0 / p < lowest {
                clamped += 1;
                lowest
            } else {
                1.0 / p
            }
        }))?;
        set_linear(&mut store, &format!("{name}/posterior/loc"), &gain, post.bias.as_slice())?;
        set_linear(&mut store, &format!("{name}/posterior/raw_scale"), &DMatrix::zeros(d, gain.ncols()), &q_var)?;
    }
    let total: usize = dims.iter().sum();
    let mut dec = DMatrix::zeros(dx, total);
    let mut off = 0;
    for (cm, &d) in model.obs_maps.iter().zip(&dims) {
        dec.view_mut((0, off), (dx, d)).copy_from(cm);
        off += d;
    }
    set_linear(&mut store, "decoder", &dec, model.obs_offset.as_slice())?;
    store.set("decoder/raw_scale", Tensor::vector(raws(model.obs_var.iter().copied())?))?;
    Ok(MatchedHierarchy { spec, store, clamped })
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a kink).
    pub skipped: Vec<usize>,
}

/// Compares `grad` against fourth-order central differences of `f` at `x`
/// (stencil `x ± h, x ± 2h`). The relative error is
/// `|g − ĝ| / max(|g|, |ĝ|, floor)`. A coordinate is skipped when the four
/// secant slopes across the stencil spread by more than
/// `kink_tol · max(1, |ĝ|)`, which flags kinks such as ReLU at zero.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    grad: &[f64],
    h: f64,
    floor: f64,
    kink_tol: f64,
) -> Result<GradCheck> {
    if x.len() != grad.len() {
        return Err(Error::shape("grad_check", &[&[x.len()], &[grad.len()]]));
    }
    let f0 = f(x)?;
    if !f0.is_finite() {
        return Err(Error::Numeric { term: "grad_check f(x)".into(), value: f0 });
    }
    let mut p = x.to_vec();
    let mut out = GradCheck { max_rel_error: 0.0, worst_index: None, checked: 0, skipped: vec![] };
    for i in 0..x.len() {
        let mut at = |k: f64, p: &mut Vec<f64>| -> Result<f64> {
            p[i] = x[i] + k * h;
            let v = f(p)?;
            p[i] = x[i];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Numeric { term: format!("grad_check coordinate {i}"), value: v })
            }
        };
        let (m2, m1, p1, p2) = (at(-2.0, &mut p)?, at(-1.0, &mut p)?, at(1.0, &mut p)?, at(2.0, &mut p)?);
        let est = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
        let slopes = [(m1 - m2) / h, (f0 - m1) / h, (p1 - f0) / h, (p2 - p1) / h];
        let lo = slopes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > kink_tol * est.abs().max(1.0) {
            out.skipped.push(i);
            continue;
        }
        let rel = (grad[i] - est).abs() / grad[i].abs().max(est.abs()).max(floor);
        out.checked += 1;
        if out.worst_index.is_none() || rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = Some(i);
        }
    }
    Ok(out)
}

/// Flattens the named tensors of `grads` in key order.
pub fn flatten(store: &ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut x = Vec::new();
    let mut g = Vec::new();
    for (name, t) in grads {
        x.extend_from_slice(store.get(name)?.data());
        g.extend_from_slice(t.data());
    }
    Ok((x, g))
}

/// Writes a flat vector back in the layout produced by [`flatten`].
pub fn unflatten(store: &mut ParameterStore, names: &[String], flat: &[f64]) -> Result<()> {
    let mut off = 0;
    for name in names {
        let t = store.get_mut(name)?;
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn scalar_model() -> LinearGaussianModel {
        let one = |v: f64| DVector::from_element(1, v);
        LinearGaussianModel {
            layers: vec![LinearLayer {
                prior_map: DMatrix::zeros(1, 0),
                prior_mean: one(0.0),
                prior_var: one(1.0),
                diag: one(1.0),
                perturb: one(0.0),
                shift_map: DMatrix::zeros(1, 0),
                shift: one(0.0),
            }],
            obs_maps: vec![DMatrix::from_element(1, 1, 1.0)],
            obs_offset: one(0.0),
            obs_var: one(1.0),
        }
    }

    #[test]
    fn scalar_joint_and_marginal() {
        let m = scalar_model();
        let j = build_joint(&m).unwrap();
        assert_eq!(j.cov.as_slice(), &[1.0, 1.0, 1.0, 2.0]);
        let lp = exact_log_marginal(&m, &[0.0]).unwrap();
        assert!((lp + 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((lp + 1.265_512_123_484_645_4).abs() < 1e-9);
    }

    #[test]
    fn translation_shifts_marginal() {
        let mut m = random_sere_model(&mut seeded(2), &[2, 2], 3);
        let x = [0.3, -0.1, 0.8];
        let base = exact_log_marginal(&m, &x).unwrap();
        m.obs_offset += DVector::from_element(3, 0.5);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert!((exact_log_marginal(&m, &shifted).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn factorization_needs_three_layers() {
        let m = random_sere_model(&mut seeded(0), &[1, 1], 2);
        assert!(verify_factorization(&m).is_err());
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let f = |x: &[f64]| Ok(x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>());
        let x = [0.3, -1.2, 2.0];
        let g: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let r = grad_check(f, &x, &g, 1e-5, 1e-8, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn kinks_are_skipped() {
        let f = |x: &[f64]| Ok(x[0].max(0.0) + x[1] * x[1]);
        let r = grad_check(f, &[0.0, 1.0], &[0.5, 2.0], 1e-5, 1e-8, 1e-3).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert_eq!(r.checked, 1);
    }
}
