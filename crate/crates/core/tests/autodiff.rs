use proptest::prelude::*;
use sere_core::autodiff::{Tape, Var};
use sere_core::Tensor;

type Op = fn(&mut Tape, Var) -> sere_core::Result<Var>;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// `f(x) = Σ w ⊙ build(x)`; returns the value and the tape gradient.
fn value_and_grad(
    x: &[f64],
    rows: usize,
    cols: usize,
    w: &[f64],
    build: &dyn Fn(&mut Tape, Var) -> sere_core::Result<Var>,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::matrix(rows, cols, x.to_vec()).unwrap());
    let y = build(&mut tape, xv).unwrap();
    let shape = tape.value(y).shape().to_vec();
    let wv = tape.constant(Tensor::new(shape, w[..tape.value(y).len()].to_vec()).unwrap());
    let p = tape.mul(y, wv).unwrap();
    let root = tape.sum(p).unwrap();
    let v = tape.scalar_value(root).unwrap();
    let g = tape.backward(root).unwrap();
    (v, g.get(xv).unwrap().data().to_vec())
}

fn fd_rel_error(
    x: &[f64],
    rows: usize,
    cols: usize,
    w: &[f64],
    build: &dyn Fn(&mut Tape, Var) -> sere_core::Result<Var>,
) -> f64 {
    let h = 1e-5;
    let (_, g) = value_and_grad(x, rows, cols, w, build);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.to_vec();
        p[i] += h;
        let fp = value_and_grad(&p, rows, cols, w, build).0;
        p[i] -= 2.0 * h;
        let fm = value_and_grad(&p, rows, cols, w, build).0;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

fn unary_ops() -> Vec<(&'static str, Op, f64, f64)> {
    vec![
        ("neg", |t, x| t.neg(x), -2.0, 2.0),
        ("exp", |t, x| t.exp(x), -2.0, 2.0),
        ("log", |t, x| t.log(x), 0.1, 2.0),
        ("sqrt", |t, x| t.sqrt(x), 0.1, 2.0),
        ("square", |t, x| t.square(x), -2.0, 2.0),
        ("tanh", |t, x| t.tanh(x), -2.0, 2.0),
        ("elu", |t, x| t.elu(x), -2.0, 2.0),
        ("softplus", |t, x| t.softplus(x), -2.0, 2.0),
        ("sigmoid", |t, x| t.sigmoid(x), -2.0, 2.0),
        ("logit", |t, x| t.logit(x), 0.05, 0.95),
        ("relu", |t, x| t.relu(x), -2.0, 2.0),
        ("scale", |t, x| t.scale(x, -1.7), -2.0, 2.0),
        ("offset", |t, x| t.offset(x, 0.3), -2.0, 2.0),
        ("sum_axis0", |t, x| t.sum_axis(x, 0), -2.0, 2.0),
        ("sum_axis1", |t, x| t.sum_axis(x, 1), -2.0, 2.0),
        ("mean", |t, x| t.mean(x), -2.0, 2.0),
        ("slice", |t, x| t.slice(x, 1, 2), -2.0, 2.0),
    ]
}

fn unit(v: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let vals: Vec<f64> = (0..m * k + k * n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64) / 250.0 - 2.0).collect();
        let (a, b) = vals.split_at(m * k);
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::matrix(m, k, a.to_vec()).unwrap());
        let bv = tape.constant(Tensor::matrix(k, n, b.to_vec()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        let want = naive_matmul(a, b, m, k, n);
        for (x, y) in tape.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn unary_primitives_match_finite_differences(u in prop::collection::vec(0.0f64..1.0, 6), w in prop::collection::vec(-1.0f64..1.0, 6)) {
        for (name, op, lo, hi) in unary_ops() {
            let mut x: Vec<f64> = u.iter().map(|&v| unit(v, lo, hi)).collect();
            if name == "relu" || name == "elu" {
                // keep away from the kink at zero
                for v in &mut x {
                    if v.abs() < 1e-3 {
                        *v = 0.5;
                    }
                }
            }
            let e = fd_rel_error(&x, 2, 3, &w, &|t, v| op(t, v));
            prop_assert!(e <= 1e-6, "{name}: rel. error {e}");
        }
    }

    #[test]
    fn binary_primitives_match_finite_differences(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(0.2f64..2.0, 6), w in prop::collection::vec(-1.0f64..1.0, 6)) {
        let bt = Tensor::matrix(2, 3, b.clone()).unwrap();
        let bcol = Tensor::matrix(2, 1, b[..2].to_vec()).unwrap();
        let bmat = Tensor::matrix(3, 2, b.clone()).unwrap();
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> sere_core::Result<Var>>)> = vec![
            ("add", Box::new(|t: &mut Tape, x| { let c = t.leaf(bt.clone()); t.add(x, c) })),
            ("sub", Box::new(|t: &mut Tape, x| { let c = t.leaf(bt.clone()); t.sub(c, x) })),
            ("mul", Box::new(|t: &mut Tape, x| { let c = t.leaf(bt.clone()); t.mul(x, c) })),
            ("div", Box::new(|t: &mut Tape, x| { let c = t.leaf(bt.clone()); t.div(x, c) })),
            ("div_by_x", Box::new(|t: &mut Tape, x| { let c = t.leaf(bt.clone()); let s = t.square(x)?; let d = t.offset(s, 0.5)?; t.div(c, d) })),
            ("mul_broadcast", Box::new(|t: &mut Tape, x| { let c = t.leaf(bcol.clone()); t.mul(x, c) })),
            ("matmul_left", Box::new(|t: &mut Tape, x| { let c = t.leaf(bmat.clone()); t.matmul(x, c) })),
            ("matmul_right", Box::new(|t: &mut Tape, x| { let c = t.leaf(bmat.clone()); t.matmul(c, x) })),
            ("concat", Box::new(|t: &mut Tape, x| { let c = t.leaf(bt.clone()); let s = t.square(x)?; t.concat(&[c, x, s]) })),
        ];
        let w = [w.clone(), w.clone(), w.clone()].concat();
        for (name, f) in cases {
            let e = fd_rel_error(&a, 2, 3, &w, f.as_ref());
            prop_assert!(e <= 1e-6, "{name}: rel. error {e}");
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences(x in prop::collection::vec(-2.0f64..2.0, 8), w in prop::collection::vec(-1.0f64..1.0, 8)) {
        let build = |t: &mut Tape, x: Var| -> sere_core::Result<Var> {
            let a = t.tanh(x)?;
            let b = t.softplus(x)?;
            let c = t.mul(a, b)?;
            let e = t.elu(c)?;
            let s = t.sigmoid(x)?;
            let d = t.div(e, s)?;
            let q = t.sum_axis(d, 1)?;
            let r = t.mul(d, q)?;
            let m = t.exp(r)?;
            t.log(m)
        };
        let e = fd_rel_error(&x, 2, 4, &w, &build);
        prop_assert!(e <= 1e-6, "rel. error {e}");
    }

    #[test]
    fn forward_replay_is_bit_identical(x in prop::collection::vec(-2.0f64..2.0, 6)) {
        let run = || {
            let mut t = Tape::new();
            let v = t.leaf(Tensor::matrix(3, 2, x.clone()).unwrap());
            let a = t.softplus(v).unwrap();
            let b = t.sum_axis(a, 0).unwrap();
            let c = t.mul(v, b).unwrap();
            let s = t.tanh(c).unwrap();
            t.value(s).clone()
        };
        prop_assert_eq!(run().data().to_vec(), run().data().to_vec());
    }
}

#[test]
fn activations_match_closed_forms() {
    use sere_core::autodiff::{elu, softplus};
    for x in [0.0, 1.0, -1.0, 10.0, -10.0] {
        let sp = (1.0 + f64::exp(x)).ln();
        let el = if x > 0.0 { x } else { f64::exp(x) - 1.0 };
        assert!((softplus(x) - sp).abs() <= 1e-12, "softplus({x})");
        assert!((elu(x) - el).abs() <= 1e-12, "elu({x})");
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![x]));
        let r = t.relu(v).unwrap();
        assert_eq!(t.value(r).data()[0], x.max(0.0));
    }
    assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((elu(-5.0) - (-0.993262053)).abs() < 1e-9);
}
