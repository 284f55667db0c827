use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;
use sere_core::bijectors::{AffineBijector, BatchNormBijector, Bijector, Chain, Identity, Inverted, LogitTransform};
use sere_core::distributions::{kl_moments, DiagGaussian};
use sere_core::rng::seeded;

fn affine_parts(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-3.0f64..3.0, n),
        prop::collection::vec(0.5f64..2.0, n),
        prop::collection::vec(-1.5f64..1.5, n),
        prop::collection::vec(-3.0f64..3.0, n),
    )
}

fn dense(b: &AffineBijector) -> DMatrix<f64> {
    let u = DVector::from_column_slice(b.perturb());
    DMatrix::from_diagonal(&DVector::from_column_slice(b.diag())) + &u * u.transpose()
}

fn mvn_log_prob(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("positive definite");
    let r = x - mean;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&chol.solve(&r)))
}

proptest! {
    #[test]
    fn affine_round_trip_and_log_dets((shift, diag, u, eps) in (1usize..8).prop_flat_map(affine_parts)) {
        let b = AffineBijector::new(shift.clone(), diag, u).unwrap();
        let (z, ld) = b.forward(&eps).unwrap();
        let (back, ild) = b.inverse(&z).unwrap();
        for (a, c) in eps.iter().zip(&back) {
            prop_assert!((a - c).abs() <= 1e-9);
        }
        prop_assert!((ld + ild).abs() <= 1e-10);
        let det = dense(&b).determinant();
        prop_assert!(det > 0.0);
        prop_assert!((ld - det.ln()).abs() <= 1e-8 * det.ln().abs().max(1.0));
    }

    #[test]
    fn affine_inverse_matches_dense_solve((shift, diag, u, z) in affine_parts(5)) {
        let b = AffineBijector::new(shift.clone(), diag, u).unwrap();
        let r = DVector::from_iterator(5, z.iter().zip(&shift).map(|(a, c)| a - c));
        let want = dense(&b).lu().solve(&r).expect("nonsingular");
        let (got, _) = b.inverse(&z).unwrap();
        for i in 0..5 {
            prop_assert!((got[i] - want[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn diagonal_case_inverts_elementwise((shift, diag, _u, z) in affine_parts(4)) {
        let b = AffineBijector::new(shift.clone(), diag.clone(), vec![0.0; 4]).unwrap();
        let (eps, _) = b.inverse(&z).unwrap();
        for i in 0..4 {
            prop_assert!((eps[i] - (z[i] - shift[i]) / diag[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn chain_with_its_inverse_is_identity((shift, diag, u, x) in affine_parts(3)) {
        let b = AffineBijector::new(shift, diag, u).unwrap();
        let chain = Chain::new(vec![Box::new(b.clone()), Box::new(Inverted(b))]).unwrap();
        let (y, ld) = chain.forward(&x).unwrap();
        for (a, c) in x.iter().zip(&y) {
            prop_assert!((a - c).abs() <= 1e-9);
        }
        prop_assert!(ld.abs() <= 1e-10);
    }
}

#[test]
fn reference_instances() {
    let b = AffineBijector::new(vec![0.0; 2], vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
    let (z, ld) = b.forward(&[0.7, -0.2]).unwrap();
    assert_eq!((z, ld), (vec![0.7, -0.2], 0.0));
    let b = AffineBijector::new(vec![0.0; 2], vec![2.0, 3.0], vec![1.0, 1.0]).unwrap();
    assert!((b.log_det() - 11f64.ln()).abs() < 1e-12);

    let bn = BatchNormBijector::new(vec![0.0], vec![1.0], vec![1.0], vec![0.0], 0.0).unwrap();
    assert_eq!(bn.forward(&[0.4]).unwrap(), (vec![0.4], 0.0));
    let bn = BatchNormBijector::new(vec![0.0], vec![4.0], vec![2.0], vec![0.0], 0.0).unwrap();
    assert!(bn.log_det().abs() < 1e-15);

    let lt = LogitTransform::new(1, 0.05).unwrap();
    assert!((lt.forward(&[0.0]).unwrap().0[0] - (0.05f64 / 0.95).ln()).abs() < 1e-12);
    let mid = (0.5 - 0.05) / 0.95;
    assert!(lt.forward(&[mid]).unwrap().0[0].abs() < 1e-12);

    let id = Chain::new(vec![Box::new(Identity(3)), Box::new(Identity(3))]).unwrap();
    assert_eq!(id.forward(&[1.0, 2.0, 3.0]).unwrap(), (vec![1.0, 2.0, 3.0], 0.0));
}

#[test]
fn pushed_forward_density_matches_histogram() {
    let b = AffineBijector::new(vec![0.4], vec![0.8], vec![0.6]).unwrap();
    let mut rng = seeded(21);
    let n = 200_000;
    let (lo, hi, bins) = (-3.0, 3.8, 34);
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for _ in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        let z = b.forward(&[e]).unwrap().0[0];
        if z >= lo && z < hi {
            counts[((z - lo) / w) as usize] += 1;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        // midpoint rule on a fine sub-grid of the bin
        let p: f64 = (0..50)
            .map(|j| {
                let z = lo + w * (k as f64 + (j as f64 + 0.5) / 50.0);
                let (e, ild) = b.inverse(&[z]).unwrap();
                (-0.5 * e[0] * e[0] - 0.5 * (2.0 * std::f64::consts::PI).ln() + ild).exp() * w / 50.0
            })
            .sum();
        let expect = p * n as f64;
        let sd = (expect * (1.0 - p)).sqrt();
        assert!((c as f64 - expect).abs() <= 4.0 * sd.max(1.0), "bin {k}: {c} vs {expect:.1}");
    }
}

#[test]
fn kl_is_invariant_under_a_shared_bijector() {
    let mut rng = seeded(8);
    let d = 3;
    let b = AffineBijector::new(vec![0.5, -1.0, 2.0], vec![1.2, 0.7, 1.6], vec![0.8, -0.4, 0.3]).unwrap();
    let q = DiagGaussian::new(vec![0.2, -0.4, 1.0], vec![0.6, 1.3, 0.9]).unwrap();
    let p = DiagGaussian::new(vec![-0.3, 0.0, 0.5], vec![1.0, 0.8, 2.0]).unwrap();
    // z-space densities: N(Sμ + b, S Σ Sᵀ) with dense algebra
    let s = dense(&b);
    let shift = DVector::from_column_slice(b.shift());
    let push = |g: &DiagGaussian| {
        let m = &s * DVector::from_column_slice(&g.mean) + &shift;
        let c = &s * DMatrix::from_diagonal(&DVector::from_column_slice(&g.var)) * s.transpose();
        (m, c)
    };
    let (mq, cq) = push(&q);
    let (mp, cp) = push(&p);
    let n = 100_000;
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let eps = q.transform(&e).unwrap();
            let z = DVector::from_vec(b.forward(&eps).unwrap().0);
            mvn_log_prob(&mq, &cq, &z) - mvn_log_prob(&mp, &cp, &z)
        })
        .collect();
    let m = vals.iter().sum::<f64>() / n as f64;
    let se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0) / n as f64).sqrt();
    let k = kl_moments(&q, &p).unwrap();
    assert!((m - k).abs() <= 3.0 * se, "z-space MC {m} ± {se} vs {k}");
}

#[test]
fn random_batchnorm_and_logit_round_trip() {
    let mut rng = seeded(4);
    for _ in 0..200 {
        let d = rng.random_range(1..5);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.99)).collect();
        let lt = LogitTransform::new(d, rng.random_range(1e-4..0.2)).unwrap();
        let (y, ld) = lt.forward(&v).unwrap();
        let (back, ild) = lt.inverse(&y).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 1e-9));
        assert!((ld + ild).abs() <= 1e-10);
        let bn = BatchNormBijector::new(
            v.clone(),
            (0..d).map(|_| rng.random_range(0.1..3.0)).collect(),
            (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            1e-5,
        )
        .unwrap();
        let (y, _) = bn.forward(&v).unwrap();
        assert!(v.iter().zip(&bn.inverse(&y).unwrap().0).all(|(a, b)| (a - b).abs() <= 1e-9));
    }
}
