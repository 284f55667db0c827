use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;
use sere_core::distributions::{
    kl_diag_diag, raw_from_scale, scale_floor, scale_from_raw_scalar, DiagGaussian, GaussianDiagParams,
    GaussianDiagRank1Params,
};
use sere_core::rng::seeded;

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Dense `N(loc, diag(d) + u uᵀ)` density through a Cholesky factor.
fn dense_log_prob(loc: &[f64], d: &[f64], u: &[f64], x: &[f64]) -> f64 {
    let n = loc.len();
    let uv = DVector::from_column_slice(u);
    let cov = DMatrix::from_diagonal(&DVector::from_column_slice(d)) + &uv * uv.transpose();
    let chol = cov.cholesky().expect("positive definite");
    let r = DVector::from_iterator(n, x.iter().zip(loc).map(|(a, b)| a - b));
    let sol = chol.solve(&r);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&sol))
}

fn vecs(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(
        (lq, rq, lp, rp) in (1usize..6).prop_flat_map(|n| (vecs(n, -3.0, 3.0), vecs(n, -4.0, 4.0), vecs(n, -3.0, 3.0), vecs(n, -4.0, 4.0)))
    ) {
        let q = GaussianDiagParams::new(lq.clone(), rq.clone()).unwrap();
        let p = GaussianDiagParams::new(lp, rp).unwrap();
        let k = kl_diag_diag(&q, &p).unwrap();
        prop_assert!(k >= 0.0);
        if q != p {
            prop_assert!(k > 0.0);
        }
        prop_assert!(kl_diag_diag(&q, &q).unwrap().abs() < 1e-14);
    }

    #[test]
    fn rank1_density_matches_dense_cholesky(
        (loc, raw, u, x) in (1usize..7).prop_flat_map(|n| (vecs(n, -2.0, 2.0), vecs(n, -3.0, 3.0), vecs(n, -1.5, 1.5), vecs(n, -3.0, 3.0)))
    ) {
        let g = GaussianDiagRank1Params::new(loc.clone(), raw, u.clone()).unwrap();
        let want = dense_log_prob(&loc, &g.diag(), &u, &x);
        let got = g.log_prob(&x).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn raw_scale_inverts_above_floor(s in 0.32f64..50.0) {
        let r = raw_from_scale(s).unwrap();
        prop_assert!((scale_from_raw_scalar(r) - s).abs() <= 1e-10 * s);
    }
}

#[test]
fn scale_is_positive_and_monotone_over_scan() {
    let mut prev = 0.0;
    for i in 0..=40_000 {
        let raw = -20.0 + i as f64 * 1e-3;
        let s = scale_from_raw_scalar(raw);
        assert!(s > 0.0 && s >= prev, "raw {raw}");
        assert!(s >= scale_floor());
        prev = s;
    }
    assert!((scale_from_raw_scalar(10.0) - 10.0000453989).abs() < 1e-9);
}

#[test]
fn kl_matches_monte_carlo_within_three_se() {
    let mut rng = seeded(11);
    let q = GaussianDiagParams::new(vec![0.3, -1.0, 0.8], vec![0.2, 1.5, -0.4]).unwrap();
    let p = GaussianDiagParams::new(vec![-0.5, 0.1, 0.0], vec![1.0, 0.0, 2.0]).unwrap();
    let samples: Vec<f64> = (0..100_000)
        .map(|_| {
            let (z, _) = q.sample(&mut rng).unwrap();
            q.log_prob(&z).unwrap() - p.log_prob(&z).unwrap()
        })
        .collect();
    let (m, se) = mean_and_se(&samples);
    let k = kl_diag_diag(&q, &p).unwrap();
    assert!((m - k).abs() <= 3.0 * se, "MC {m} ± {se} vs analytic {k}");
}

#[test]
fn sample_moments_within_three_se() {
    let mut rng = seeded(5);
    let g = GaussianDiagParams::new(vec![1.5, -2.0], vec![0.7, 3.0]).unwrap();
    let var = g.variance();
    let draws: Vec<Vec<f64>> = (0..100_000).map(|_| g.sample(&mut rng).unwrap().0).collect();
    for i in 0..2 {
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let (m, se) = mean_and_se(&col);
        assert!((m - g.loc[i]).abs() <= 3.0 * se);
        // squared deviations about the true mean: mean σ², spread 2σ⁴
        let sq: Vec<f64> = col.iter().map(|v| (v - g.loc[i]).powi(2)).collect();
        let (mv, sev) = mean_and_se(&sq);
        assert!((mv - var[i]).abs() <= 3.0 * sev, "var {mv} ± {sev} vs {}", var[i]);
    }
}

#[test]
fn rank1_density_integrates_to_one() {
    let mut rng = seeded(3);
    for _ in 0..3 {
        let loc = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let raw = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let u = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let g = GaussianDiagRank1Params::new(loc.clone(), raw, u).unwrap();
        let step = 0.04;
        let half = 12.0;
        let n = (2.0 * half / step) as usize;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [loc[0] - half + (i as f64 + 0.5) * step, loc[1] - half + (j as f64 + 0.5) * step];
                total += g.log_prob(&x).unwrap().exp();
            }
        }
        total *= step * step;
        assert!((total - 1.0).abs() <= 1e-3, "integral {total}");
    }
}

#[test]
fn moment_form_matches_reference_points() {
    let n = DiagGaussian::standard(1);
    assert!((n.log_prob(&[0.0]).unwrap() + 0.9189385332).abs() < 1e-9);
    assert!((n.log_prob(&[1.0]).unwrap() + 1.4189385332).abs() < 1e-9);
    let g = DiagGaussian::new(vec![2.0], vec![4.0]).unwrap();
    assert!((g.log_prob(&[0.0]).unwrap() + 2.1120857137).abs() < 1e-9);
}
