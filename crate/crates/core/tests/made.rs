use proptest::prelude::*;
use rand::seq::SliceRandom;
use sere_core::made::{build_masks, DegreeRule, Made, MafSpec, MafStack, Ordering, ResidualParamHead};
use sere_core::nn::{Activation, MlpSpec};
use sere_core::params::{Ctx, Mode, ParameterStore};
use sere_core::rng::{seeded, NoiseSource};
use sere_core::Tensor;

/// Standard unconditional MADE with evenly spaced hidden degrees, written
/// directly from the degree rules: hidden unit `k` of `H` gets
/// `max(min_prev, ⌈k(D−1)/(H+1)⌉)`, hidden masks connect `m(k) ≥ m(j)`,
/// output masks connect `d > m(k)`.
fn reference_masks(dim: usize, hidden: &[usize], order: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let mut prev: Vec<usize> = order.to_vec();
    let mut out = Vec::new();
    for &h in hidden {
        let min_prev = *prev.iter().min().unwrap();
        let deg: Vec<usize> = (1..=h)
            .map(|k| if dim == 1 { 0 } else { ((k * (dim - 1) + h) / (h + 1)).max(min_prev).min(dim - 1) })
            .collect();
        let m: Vec<Vec<f64>> = prev.iter().map(|&a| deg.iter().map(|&b| f64::from(u8::from(b >= a))).collect()).collect();
        out.push(m);
        prev = deg;
    }
    out.push(prev.iter().map(|&a| order.iter().map(|&d| f64::from(u8::from(d > a))).collect()).collect());
    out
}

fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    for e in 0..x.len() {
        let mut p = x.to_vec();
        p[e] += h;
        let fp = f(&p);
        p[e] -= 2.0 * h;
        let fm = f(&p);
        for d in 0..m {
            jac[d][e] = (fp[d] - fm[d]) / (2.0 * h);
        }
    }
    jac
}

fn made_outputs(made: &Made, store: &ParameterStore, cond: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut ctx = Ctx::no_grad(store, Mode::Eval);
    let xv = ctx.constant(Tensor::matrix(1, x.len(), x.to_vec()).unwrap());
    let cv = (!cond.is_empty()).then(|| ctx.constant(Tensor::matrix(1, cond.len(), cond.to_vec()).unwrap()));
    let (mu, s) = made.forward(&mut ctx, cv, xv).unwrap();
    (ctx.value(mu).data().to_vec(), ctx.value(s).data().to_vec())
}

fn ordering() -> impl Strategy<Value = Ordering> {
    prop_oneof![Just(Ordering::Natural), Just(Ordering::Reversed), any::<u64>().prop_map(Ordering::Random)]
}

proptest! {
    #[test]
    fn path_matrix_is_strictly_triangular(
        c in 0usize..4,
        d in 1usize..7,
        hidden in prop::collection::vec(1usize..12, 1..4),
        order in ordering(),
        random_rule in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let rule = if random_rule { DegreeRule::Random } else { DegreeRule::Equal };
        let m = build_masks(c, d, &hidden, order, rule, seed).unwrap();
        let p = m.path_matrix();
        for e in 0..d {
            for o in 0..d {
                let connected = p.row(c + e)[o] > 0.0;
                if m.input_degrees[c + e] >= m.output_degrees[o] {
                    prop_assert!(!connected, "input {e} reaches output {o}");
                }
            }
        }
        for r in 0..c {
            prop_assert!(m.masks[0].row(r).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn unconditional_masks_match_reference(
        d in 1usize..8,
        hidden in prop::collection::vec(1usize..10, 1..4),
        order_seed in any::<u64>(),
    ) {
        let mut order: Vec<usize> = (1..=d).collect();
        order.shuffle(&mut seeded(order_seed));
        let m = build_masks(0, d, &hidden, Ordering::Random(order_seed), DegreeRule::Equal, 0).unwrap();
        prop_assert_eq!(&m.input_degrees, &order);
        let reference = reference_masks(d, &hidden, &order);
        prop_assert_eq!(m.masks.len(), reference.len());
        for (got, want) in m.masks.iter().zip(&reference) {
            let rows: Vec<Vec<f64>> = (0..got.rows()).map(|r| got.row(r).to_vec()).collect();
            prop_assert_eq!(&rows, want);
        }
    }
}

#[test]
fn jacobian_respects_degrees_and_context_reaches_every_output() {
    let mut rng = seeded(12);
    for (c, d, hidden) in [(0, 4, vec![16]), (2, 3, vec![12, 12]), (3, 5, vec![20, 20])] {
        let masks = build_masks(c, d, &hidden, Ordering::Reversed, DegreeRule::Equal, 0).unwrap();
        let made = Made::new("made", masks.clone(), Activation::Tanh);
        let mut store = ParameterStore::new();
        made.init(&mut store, &mut rng).unwrap();
        let cond = rng.normal(1, c).unwrap().into_data();
        let x = rng.normal(1, d).unwrap().into_data();
        for head in 0..2 {
            let f = |v: &[f64]| {
                let (mu, s) = made_outputs(&made, &store, &cond, v);
                if head == 0 { mu } else { s }
            };
            let jac = fd_jacobian(&f, &x);
            for o in 0..d {
                for e in 0..d {
                    if masks.input_degrees[c + e] >= masks.output_degrees[o] {
                        assert!(jac[o][e].abs() <= 1e-9, "d{o}/dx{e} = {}", jac[o][e]);
                    }
                }
            }
            if c > 0 {
                let g = |v: &[f64]| {
                    let (mu, s) = made_outputs(&made, &store, v, &x);
                    if head == 0 { mu } else { s }
                };
                let jc = fd_jacobian(&g, &cond);
                for (o, row) in jc.iter().enumerate() {
                    // hidden degrees start at C+1, so the first output in the ordering is a bias
                    if masks.output_degrees[o] == c + 1 {
                        assert!(row.iter().all(|v| *v == 0.0));
                    } else {
                        assert!(row.iter().any(|v| v.abs() > 1e-8), "output {o} ignores the context");
                    }
                }
            }
        }
    }
}

#[test]
fn zero_weights_give_bias_outputs() {
    let masks = build_masks(1, 3, &[6], Ordering::Natural, DegreeRule::Equal, 0).unwrap();
    let made = Made::new("made", masks, Activation::Relu);
    let mut store = ParameterStore::new();
    made.init(&mut store, &mut seeded(0)).unwrap();
    for (_, t) in store.params_mut() {
        t.data_mut().fill(0.0);
    }
    store.set("made/shift/bias", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
    store.set("made/log_scale/bias", Tensor::vector(vec![-0.5, 0.0, 0.5])).unwrap();
    for x in [[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]] {
        let (mu, s) = made_outputs(&made, &store, &[0.7], &x);
        assert_eq!(mu, vec![0.1, 0.2, 0.3]);
        assert_eq!(s, vec![-0.5, 0.0, 0.5]);
    }
}

fn stack(dim: usize, cond: usize, flows: usize, bn: bool) -> (MafStack, ParameterStore) {
    let spec = MafSpec { flows, mades_per_flow: 2, hidden: vec![10, 10], activation: Activation::Tanh, batch_norm: bn, ..MafSpec::default() };
    let s = MafStack::new("maf", dim, cond, &spec).unwrap();
    let mut store = ParameterStore::new();
    s.init(&mut store, &mut seeded(30)).unwrap();
    (s, store)
}

fn log_density(s: &MafStack, store: &ParameterStore, x: &Tensor, cond: Option<&Tensor>) -> Vec<f64> {
    let mut ctx = Ctx::no_grad(store, Mode::Eval);
    let xv = ctx.constant(x.clone());
    let cv = cond.map(|c| ctx.constant(c.clone()));
    let (u, ld) = s.to_base(&mut ctx, xv, cv).unwrap();
    let d = x.cols();
    (0..x.rows())
        .map(|r| {
            let u = ctx.value(u).row(r);
            let base: f64 = u.iter().map(|v| -0.5 * v * v).sum::<f64>() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
            base + ctx.value(ld).data()[r]
        })
        .collect()
}

#[test]
fn stack_inverts_and_each_step_is_triangular() {
    let (s, store) = stack(4, 2, 3, true);
    let mut rng = seeded(1);
    let cond = rng.normal(5, 2).unwrap();
    let u0 = rng.normal(5, 4).unwrap();
    let x = s.from_base(&store, &u0, Some(&cond)).unwrap();
    let mut ctx = Ctx::no_grad(&store, Mode::Eval);
    let xv = ctx.constant(x.clone());
    let cv = ctx.constant(cond.clone());
    let (u, _) = s.to_base(&mut ctx, xv, Some(cv)).unwrap();
    assert!(ctx.value(u).max_abs_diff(&u0) <= 1e-8);

    for made in s.flows.iter().flatten() {
        let c = cond.row(0).to_vec();
        let f = |v: &[f64]| {
            let mut ctx = Ctx::no_grad(&store, Mode::Eval);
            let xv = ctx.constant(Tensor::matrix(1, 4, v.to_vec()).unwrap());
            let cv = ctx.constant(Tensor::matrix(1, 2, c.clone()).unwrap());
            let (u, _) = made.inverse(&mut ctx, Some(cv), xv).unwrap();
            ctx.value(u).data().to_vec()
        };
        let jac = fd_jacobian(&f, x.row(0));
        let deg = &made.masks.output_degrees;
        for o in 0..4 {
            for e in 0..4 {
                if deg[e] > deg[o] {
                    assert!(jac[o][e].abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn two_dim_density_integrates_to_one() {
    let (s, store) = stack(2, 1, 2, true);
    let cond = Tensor::matrix(1, 1, vec![0.4]).unwrap();
    let (step, half) = (0.05, 9.0);
    let n = (2.0 * half / step) as usize;
    let mut pts = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            pts.push(-half + (i as f64 + 0.5) * step);
            pts.push(-half + (j as f64 + 0.5) * step);
        }
    }
    let x = Tensor::matrix(n * n, 2, pts).unwrap();
    let c = cond.repeat_rows(n * n);
    let total: f64 = log_density(&s, &store, &x, Some(&c)).iter().map(|l| l.exp()).sum::<f64>() * step * step;
    assert!((total - 1.0).abs() <= 1e-2, "integral {total}");
}

fn zeroed_stack(shift: f64) -> (MafStack, ParameterStore) {
    let (s, mut store) = stack(2, 0, 1, false);
    for (_, t) in store.params_mut() {
        t.data_mut().fill(0.0);
    }
    let b = &s.flows[0][0].name;
    store.set(&format!("{b}/shift/bias"), Tensor::vector(vec![shift, shift])).unwrap();
    (s, store)
}

#[test]
fn identity_and_shift_flows() {
    let mut rng = seeded(2);
    let x = rng.normal(6, 2).unwrap();
    let (s, store) = zeroed_stack(0.0);
    let lp = log_density(&s, &store, &x, None);
    for (r, l) in lp.iter().enumerate() {
        let base: f64 = x.row(r).iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
        assert!((l - base).abs() < 1e-12);
    }
    let (s, store) = zeroed_stack(1.5);
    let lp = log_density(&s, &store, &x, None);
    for (r, l) in lp.iter().enumerate() {
        let base: f64 = x.row(r).iter().map(|v| -0.5 * (v - 1.5).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
        assert!((l - base).abs() < 1e-12);
    }
    // shifted samples: mean moves by b within 3 SE
    let n = 10_000;
    let u0 = rng.normal(n, 2).unwrap();
    let xs = s.from_base(&store, &u0, None).unwrap();
    for col in 0..2 {
        let m: f64 = (0..n).map(|r| xs.row(r)[col]).sum::<f64>() / n as f64;
        assert!((m - 1.5).abs() <= 3.0 / (n as f64).sqrt());
    }
}

#[test]
fn identity_flow_samples_pass_ks_against_base() {
    let (s, store) = zeroed_stack(0.0);
    let n = 10_000;
    let u0 = seeded(9).normal(n, 2).unwrap();
    let xs = s.from_base(&store, &u0, None).unwrap();
    let mut v: Vec<f64> = (0..n).map(|r| xs.row(r)[0]).collect();
    v.sort_by(f64::total_cmp);
    let cdf = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let dmax = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // two-sided KS critical value at α = 0.01
    assert!(dmax < 1.628 / (n as f64).sqrt(), "KS statistic {dmax}");
}

/// Abramowitz–Stegun 7.1.26, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let y = 1.0
        - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t + 0.254_829_592)
            * t
            * (-x * x).exp();
    y.copysign(x)
}

#[test]
fn fresh_residual_head_is_identity_and_telescopes() {
    let spec = MlpSpec::relu(vec![8]);
    let heads: Vec<ResidualParamHead> = (0..3).map(|l| ResidualParamHead::new(&format!("head{l}"), 4, 2, 3, &spec)).collect();
    let mut store = ParameterStore::new();
    let mut rng = seeded(6);
    for h in &heads {
        h.init(&mut store, &mut rng).unwrap();
    }
    let g0 = rng.normal(3, 4).unwrap();
    let zs: Vec<Tensor> = (0..3).map(|_| rng.normal(3, 2).unwrap()).collect();
    let mut ctx = Ctx::no_grad(&store, Mode::Eval);
    let mut g = ctx.constant(g0.clone());
    for (h, z) in heads.iter().zip(&zs) {
        let zv = ctx.constant(z.clone());
        g = h.update(&mut ctx, g, zv).unwrap();
    }
    assert_eq!(ctx.value(g), &g0);

    // perturb the output layers, then γ_L − γ_0 = Σ r^l
    for (name, t) in store.params_mut() {
        if name.contains("/residual/") {
            for v in t.data_mut() {
                *v += 0.05;
            }
        }
    }
    let mut ctx = Ctx::no_grad(&store, Mode::Eval);
    let mut g = ctx.constant(g0.clone());
    let mut sum = g0.clone();
    for (h, z) in heads.iter().zip(&zs) {
        let zv = ctx.constant(z.clone());
        let next = h.update(&mut ctx, g, zv).unwrap();
        for ((s, a), b) in sum.data_mut().iter_mut().zip(ctx.value(next).data()).zip(ctx.value(g).data()) {
            *s += a - b;
        }
        g = next;
    }
    assert!(ctx.value(g).max_abs_diff(&sum) < 1e-12);
}
