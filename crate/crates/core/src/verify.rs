//! Self-check suites run by `sere verify`: posterior factorization on
//! linear-Gaussian models, ELBO gradients against finite differences, and
//! bijector round trips and log-determinants against dense Jacobians.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::bijectors::{AffineBijector, BatchNormBijector, Bijector, Chain, LogitTransform};
use crate::error::{Error, Result};
use crate::hierarchy::{tiny_spec, DecoderKind, Hierarchy, HierarchySpec, VariationalStyle};
use crate::made::{MafSpec, MafStack};
use crate::oracle::{broken_wiring_residual, build_joint, flatten, grad_check, random_dlgm_model, random_sere_model, unflatten, verify_factorization};
use crate::params::{Ctx, Mode};
use crate::rng::{seeded, FixedNoise, NoiseSource, Recording, Rng};
use crate::tensor::Tensor;
use crate::training::free_bits_objective;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Factorization,
    Gradients,
    Bijectors,
}

/// `value` compared against `threshold`; `below` says which side passes.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub below: bool,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, below: true, passed: value <= threshold }
    }

    fn above(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, below: false, passed: value > threshold }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Report> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::All | Suite::Factorization) {
        checks.extend(factorization_checks(seed, 50, 20)?);
    }
    if matches!(suite, Suite::All | Suite::Gradients) {
        checks.extend(gradient_checks(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Bijectors) {
        checks.extend(bijector_checks(seed, 1000)?);
    }
    Ok(Report { checks })
}

/// Factorization residual over `valid` random self-reflective models
/// (3–4 layers, widths 1–3), the smallest residual over `broken`
/// DLGM-wired models, and the PSD floor of every joint covariance.
pub fn factorization_checks(seed: u64, valid: usize, broken: usize) -> Result<Vec<Check>> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut asym = 0.0f64;
    for _ in 0..valid {
        let layers = rng.random_range(3..=4);
        let dims: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=3)).collect();
        let dx = rng.random_range(2..=4);
        let m = random_sere_model(&mut rng, &dims, dx);
        worst = worst.max(verify_factorization(&m)?);
        let j = build_joint(&m)?;
        asym = asym.max((&j.cov - j.cov.transpose()).abs().max());
        min_eig = min_eig.min(j.cov.symmetric_eigenvalues().min());
    }
    let mut weakest = f64::INFINITY;
    for _ in 0..broken {
        let layers = rng.random_range(3..=4);
        let dims: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=3)).collect();
        let dx = rng.random_range(2..=4);
        let m = random_dlgm_model(&mut rng, &dims, dx);
        weakest = weakest.min(broken_wiring_residual(&m)?);
    }
    Ok(vec![
        Check::at_most("factorization residual (max over self-reflective models)", worst, 1e-8),
        Check::above("factorization residual (min over DLGM-wired models)", weakest, 1e-3),
        Check::above("joint covariance min eigenvalue", min_eig, -1e-10),
        Check::at_most("joint covariance asymmetry", asym, 1e-12),
    ])
}

/// Max relative error of the ELBO gradient over every parameter of `spec`
/// for a fixed batch and frozen noise. Coordinates at ReLU kinks are skipped;
/// gradients below 1e-4 in magnitude are held to an absolute error of 1e-8.
pub fn elbo_grad_error(spec: HierarchySpec, x: &Tensor, seed: u64) -> Result<f64> {
    let h = Hierarchy::new(spec)?;
    let store = h.init(&mut seeded(seed))?;
    let mut rng = seeded(seed + 1);
    let mut rec = Recording::new(&mut rng as &mut dyn NoiseSource);
    let loss_at = |store: &crate::params::ParameterStore, noise: &mut dyn NoiseSource, grad: bool| -> Result<(f64, Option<_>)> {
        let mut ctx = if grad { Ctx::new(store, Mode::Train) } else { Ctx::no_grad(store, Mode::Train) };
        let xv = ctx.constant(x.clone());
        let t = h.elbo_terms(&mut ctx, xv, noise)?;
        let kls: Vec<_> = t.layers.iter().map(|l| l.kl).collect();
        let loss = free_bits_objective(&mut ctx, t.recon, &kls, 0.0, 1.0)?;
        let v = ctx.tape.scalar_value(loss)?;
        let g = if grad { Some(ctx.gradients(loss)?) } else { None };
        Ok((v, g))
    };
    let (_, grads) = loss_at(&store, &mut rec, true)?;
    let grads = grads.expect("requested");
    let replay = rec.replay();
    let names: Vec<String> = grads.keys().cloned().collect();
    let (x0, g) = flatten(&store, &grads)?;
    let mut work = store.clone();
    let f = |p: &[f64]| -> Result<f64> {
        unflatten(&mut work, &names, p)?;
        let mut noise: FixedNoise = replay.clone();
        Ok(loss_at(&work, &mut noise, false)?.0)
    };
    let r = grad_check(f, &x0, &g, 1e-5, 1e-4, 1e-3)?;
    Ok(r.max_rel_error)
}

fn gradient_specs() -> Vec<(&'static str, HierarchySpec)> {
    let mut concat = tiny_spec(6, vec![3, 3], 8);
    concat.decoder = DecoderKind::Bernoulli;
    let mut residual = tiny_spec(6, vec![3, 3], 8);
    residual.variational_style = VariationalStyle::Residual;
    residual.decoder = DecoderKind::Gaussian;
    let mut maf = tiny_spec(6, vec![3, 3], 8);
    maf.decoder = DecoderKind::Maf;
    maf.maf = MafSpec { flows: 2, mades_per_flow: 2, hidden: vec![8], ..MafSpec::default() };
    vec![("concat/bernoulli", concat), ("residual/gaussian", residual), ("concat/maf", maf)]
}

pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    for (name, spec) in gradient_specs() {
        let x = if spec.decoder == DecoderKind::Bernoulli {
            Tensor::matrix(4, 6, (0..24).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect())?
        } else {
            rng.normal(4, 6)?
        };
        let e = elbo_grad_error(spec, &x, seed)?;
        out.push(Check::at_most(&format!("ELBO gradient rel. error, L=2 D=3 ({name})"), e, 1e-4));
    }
    Ok(out)
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let m = f(x)?.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut p = x.to_vec();
    for j in 0..n {
        p[j] = x[j] + h;
        let fp = f(&p)?;
        p[j] = x[j] - h;
        let fm = f(&p)?;
        p[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn ln_abs_det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().abs().ln()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn random_affine(rng: &mut Rng, d: usize) -> Result<AffineBijector> {
    let diag = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    AffineBijector::new(normal_vec(rng, d), diag, normal_vec(rng, d))
}

/// Round trips and log-determinants over `n` random instances of each
/// bijector, plus a conditional MAF stack.
pub fn bijector_checks(seed: u64, n: usize) -> Result<Vec<Check>> {
    let mut rng = seeded(seed);
    let (mut rt, mut ld_err, mut inv_ld) = (0.0f64, 0.0f64, 0.0f64);
    let (mut bn_err, mut logit_err, mut chain_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let d = rng.random_range(1..=6);
        let b = random_affine(&mut rng, d)?;
        let x = normal_vec(&mut rng, d);
        let (y, ld) = b.forward(&x)?;
        let (back, ild) = b.inverse(&y)?;
        rt = rt.max(max_diff(&x, &back));
        inv_ld = inv_ld.max((ld + ild).abs());
        let dense = DMatrix::from_row_slice(d, d, &b.scale_matrix());
        ld_err = ld_err.max(rel(ld, ln_abs_det(&dense)));

        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
        let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let bn = BatchNormBijector::new(normal_vec(&mut rng, d), var, gamma, normal_vec(&mut rng, d), 1e-5)?;
        let (y, ld) = bn.forward(&x)?;
        rt = rt.max(max_diff(&x, &bn.inverse(&y)?.0));
        let jac = fd_jacobian(|v| Ok(bn.forward(v)?.0), &x, 1e-5)?;
        bn_err = bn_err.max(rel(ld, ln_abs_det(&jac)));

        let lt = LogitTransform::new(d, rng.random_range(1e-6..0.1))?;
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.95)).collect();
        let (y, ld) = lt.forward(&v)?;
        rt = rt.max(max_diff(&v, &lt.inverse(&y)?.0));
        let jac = fd_jacobian(|v| Ok(lt.forward(v)?.0), &v, 1e-6)?;
        logit_err = logit_err.max(rel(ld, ln_abs_det(&jac)));

        let links: Vec<Box<dyn Bijector>> = (0..3).map(|_| random_affine(&mut rng, d).map(|b| Box::new(b) as Box<dyn Bijector>)).collect::<Result<_>>()?;
        let chain = Chain::new(links)?;
        let (y, ld) = chain.forward(&x)?;
        rt = rt.max(max_diff(&x, &chain.inverse(&y)?.0));
        let jac = fd_jacobian(|v| Ok(chain.forward(v)?.0), &x, 1e-5)?;
        chain_err = chain_err.max(rel(ld, ln_abs_det(&jac)));
    }
    let (maf_rt, maf_ld) = maf_checks(&mut rng)?;
    Ok(vec![
        Check::at_most("bijector round-trip error", rt.max(maf_rt), 1e-9),
        Check::at_most("affine log-det vs dense determinant (rel.)", ld_err, 1e-8),
        Check::at_most("affine forward + inverse log-det", inv_ld, 1e-10),
        Check::at_most("batch-norm log-det vs FD Jacobian (rel.)", bn_err, 1e-6),
        Check::at_most("logit log-det vs FD Jacobian (rel.)", logit_err, 1e-6),
        Check::at_most("chain log-det vs FD Jacobian (rel.)", chain_err, 1e-6),
        Check::at_most("conditional MAF log-det vs FD Jacobian (rel.)", maf_ld, 1e-6),
    ])
}

fn maf_checks(rng: &mut Rng) -> Result<(f64, f64)> {
    let spec = MafSpec { flows: 2, mades_per_flow: 3, hidden: vec![16, 16], activation: crate::nn::Activation::Tanh, ..MafSpec::default() };
    let stack = MafStack::new("maf", 4, 2, &spec)?;
    let mut store = crate::params::ParameterStore::new();
    stack.init(&mut store, rng)?;
    let (mut rt, mut ld_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let cond = rng.normal(1, 2)?;
        let x = rng.normal(1, 4)?;
        let to_base = |v: &[f64]| -> Result<(Vec<f64>, f64)> {
            let mut ctx = Ctx::no_grad(&store, Mode::Eval);
            let xv = ctx.constant(Tensor::matrix(1, 4, v.to_vec())?);
            let cv = ctx.constant(cond.clone());
            let (u, ld) = stack.to_base(&mut ctx, xv, Some(cv))?;
            Ok((ctx.value(u).data().to_vec(), ctx.value(ld).data()[0]))
        };
        let (u, ld) = to_base(x.data())?;
        let back = stack.from_base(&store, &Tensor::matrix(1, 4, u)?, Some(&cond))?;
        rt = rt.max(max_diff(back.data(), x.data()));
        let jac = fd_jacobian(|v| Ok(to_base(v)?.0), x.data(), 1e-5)?;
        ld_err = ld_err.max(rel(ld, ln_abs_det(&jac)));
    }
    if !rt.is_finite() || !ld_err.is_finite() {
        return Err(Error::Numeric { term: "maf check".into(), value: rt + ld_err });
    }
    Ok((rt, ld_err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_factorization_suite_passes() {
        let c = factorization_checks(1, 5, 3).unwrap();
        assert!(c.iter().all(|c| c.passed), "{c:?}");
    }

    #[test]
    fn small_bijector_suite_passes() {
        let c = bijector_checks(2, 20).unwrap();
        assert!(c.iter().all(|c| c.passed), "{c:?}");
    }
}

#[cfg(test)]
mod grad_tests {
    #[test]
    fn gradient_suite_passes() {
        let c = super::gradient_checks(0).unwrap();
        assert!(c.iter().all(|c| c.passed), "{c:#?}");
    }
}
