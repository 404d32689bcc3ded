//! Finite-difference checks of every differentiable op over randomized
//! shapes, plus the softmax, Adam and determinism properties.

use autodiff::{
    check_gradients, AdamConfig, AdamState, GradCheckOptions, Graph, ParamGrads, ParamStore,
    Result, RngStream, Tensor, Var,
};
use proptest::prelude::*;

const SEEDS: u64 = 100;

fn rand_tensor(rng: &mut RngStream, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so that no gradient
/// is trivially constant.
fn weighted_sum(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let mut rng = RngStream::new(seed ^ 0xabcdef);
    let w = g.constant(rand_tensor(&mut rng, r, c, -1.0, 1.0));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn assert_op_gradients<F>(name: &str, make: impl Fn(&mut RngStream) -> ParamStore, build: F)
where
    F: for<'a> Fn(&'a ParamStore, &mut Graph<'a>, u64) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed);
        let mut ps = make(&mut rng);
        let report = check_gradients(
            &mut ps,
            |m, g| build(m, g, seed),
            GradCheckOptions::default(),
        )
        .unwrap();
        worst = worst.max(report.max_rel_err());
        assert!(
            report.passed(),
            "{name} seed {seed}: {:?}",
            report.failures().collect::<Vec<_>>()
        );
    }
    assert!(worst <= 1e-4, "{name}: {worst}");
}

fn dims(rng: &mut RngStream) -> (usize, usize, usize) {
    (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(3))
}

fn p(ps: &ParamStore, g: &mut Graph<'_>, name: &str) -> Var {
    g.param(ps.id(name).unwrap())
}

#[test]
fn matmul_gradients() {
    assert_op_gradients(
        "matmul",
        |rng| {
            let (m, k, n) = dims(rng);
            let mut ps = ParamStore::new();
            ps.add("a", rand_tensor(rng, m, k, -1.0, 1.0));
            ps.add("b", rand_tensor(rng, k, n, -1.0, 1.0));
            ps
        },
        |ps, g, s| {
            let (a, b) = (p(ps, g, "a"), p(ps, g, "b"));
            let c = g.matmul(a, b)?;
            weighted_sum(g, c, s)
        },
    );
}

#[test]
fn elementwise_binary_gradients() {
    assert_op_gradients(
        "add/sub/mul",
        |rng| {
            let (m, n, _) = dims(rng);
            let mut ps = ParamStore::new();
            ps.add("a", rand_tensor(rng, m, n, -1.0, 1.0));
            ps.add("b", rand_tensor(rng, m, n, -1.0, 1.0));
            ps
        },
        |ps, g, s| {
            let (a, b) = (p(ps, g, "a"), p(ps, g, "b"));
            let x = g.add(a, b)?;
            let y = g.sub(a, b)?;
            let z = g.mul(x, y)?;
            let w = g.affine(z, 0.7, 0.3);
            weighted_sum(g, w, s)
        },
    );
}

#[test]
fn broadcast_gradients() {
    assert_op_gradients(
        "add_row/mul_col",
        |rng| {
            let (m, n, _) = dims(rng);
            let mut ps = ParamStore::new();
            ps.add("a", rand_tensor(rng, m, n, -1.0, 1.0));
            ps.add("r", rand_tensor(rng, 1, n, -1.0, 1.0));
            ps.add("c", rand_tensor(rng, m, 1, -1.0, 1.0));
            ps
        },
        |ps, g, s| {
            let (a, r, c) = (p(ps, g, "a"), p(ps, g, "r"), p(ps, g, "c"));
            let x = g.add_row(a, r)?;
            let y = g.mul_col(x, c)?;
            weighted_sum(g, y, s)
        },
    );
}

#[test]
fn unary_gradients() {
    assert_op_gradients(
        "tanh/sigmoid/exp/log",
        |rng| {
            let (m, n, _) = dims(rng);
            let mut ps = ParamStore::new();
            ps.add("x", rand_tensor(rng, m, n, -2.0, 2.0));
            ps.add("pos", rand_tensor(rng, m, n, 0.2, 3.0));
            ps
        },
        |ps, g, s| {
            let (x, pos) = (p(ps, g, "x"), p(ps, g, "pos"));
            let a = g.tanh(x);
            let b = g.sigmoid(x);
            let c = g.exp(x);
            let d = g.log(pos)?;
            let ab = g.add(a, b)?;
            let cd = g.add(c, d)?;
            let all = g.mul(ab, cd)?;
            weighted_sum(g, all, s)
        },
    );
}

#[test]
fn tanh_derivative_at_one() {
    let mut ps = ParamStore::new();
    ps.add("x", Tensor::scalar(1.0));
    let report = check_gradients(
        &mut ps,
        |m, g| {
            let x = g.param(m.id("x").unwrap());
            Ok(g.tanh(x))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    let c = &report.params[0];
    assert!((c.worst_analytic - c.worst_numeric).abs() < 1e-6);
    assert!((c.worst_analytic - (1.0 - 1f64.tanh().powi(2))).abs() < 1e-15);
}

#[test]
fn matmul_sum_gradient_matches_central_differences() {
    let mut ps = ParamStore::new();
    ps.add("a", Tensor::from_rows(&[&[1.0, 2.0]]));
    let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
    let report = check_gradients(
        &mut ps,
        |m, g| {
            let a = g.param(m.id("a").unwrap());
            let b = g.constant(b.clone());
            let c = g.matmul(a, b)?;
            Ok(g.sum(c))
        },
        GradCheckOptions {
            step: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-6);
    let mut ps2 = ParamStore::new();
    let a = ps2.add("a", Tensor::from_rows(&[&[1.0, 2.0]]));
    let mut g = Graph::new(&ps2);
    let av = g.param(a);
    let bv = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
    let c = g.matmul(av, bv).unwrap();
    let l = g.sum(c);
    let grads = g.backward(l).unwrap().into_param_grads();
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn softmax_gradients() {
    assert_op_gradients(
        "softmax",
        |rng| {
            let (m, n, _) = dims(rng);
            let mut ps = ParamStore::new();
            ps.add("x", rand_tensor(rng, m, n + 1, -3.0, 3.0));
            ps
        },
        |ps, g, s| {
            let x = p(ps, g, "x");
            let y = g.softmax_rows(x)?;
            weighted_sum(g, y, s)
        },
    );
}

#[test]
fn masked_softmax_gradients() {
    assert_op_gradients(
        "masked_softmax",
        |rng| {
            let mut ps = ParamStore::new();
            ps.add("x", rand_tensor(rng, 2, 4, -3.0, 3.0));
            ps
        },
        |ps, g, s| {
            let x = p(ps, g, "x");
            let keep = [true, false, true, true, false, true, false, false];
            let y = g.masked_softmax_rows(x, &keep)?;
            weighted_sum(g, y, s)
        },
    );
}

#[test]
fn structural_gradients() {
    assert_op_gradients(
        "concat/slice/select/group_mean/reshape/transpose",
        |rng| {
            let mut ps = ParamStore::new();
            ps.add("a", rand_tensor(rng, 3, 2, -1.0, 1.0));
            ps.add("b", rand_tensor(rng, 3, 3, -1.0, 1.0));
            ps
        },
        |ps, g, s| {
            let (a, b) = (p(ps, g, "a"), p(ps, g, "b"));
            let c = g.concat_cols(&[a, b, a])?;
            let sl = g.slice_cols(c, 1, 5)?;
            let rows = g.concat_rows(&[sl, sl])?;
            let sel = g.select_rows(rows, &[0, 4, 4, 2])?;
            let gm = g.group_mean_rows(sel, &[vec![0, 1], vec![2], vec![1, 2, 3]])?;
            let rs = g.reshape(gm, 5, 3)?;
            let t = g.transpose(rs);
            weighted_sum(g, t, s)
        },
    );
}

#[test]
fn reduction_gradients() {
    assert_op_gradients(
        "sum/sum_cols/max_cols/gather_sum",
        |rng| {
            let mut ps = ParamStore::new();
            ps.add("x", rand_tensor(rng, 3, 4, -1.0, 1.0));
            ps
        },
        |ps, g, s| {
            let x = p(ps, g, "x");
            let a = g.sum_cols(x);
            let b = g.max_cols(x)?;
            let c = g.gather_sum(x, &[vec![0, 2], vec![3, 3], vec![1]])?;
            let ab = g.concat_cols(&[a, b, c])?;
            let total = weighted_sum(g, ab, s)?;
            let all = g.sum(x);
            g.add(total, all)
        },
    );
}

#[test]
fn batched_attention_gradients() {
    assert_op_gradients(
        "batched_dot/batched_weighted_sum/block_add",
        |rng| {
            let (b, n, d) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
            let mut ps = ParamStore::new();
            ps.add("q", rand_tensor(rng, b, d, -1.0, 1.0));
            ps.add("k", rand_tensor(rng, n * b, d, -1.0, 1.0));
            ps
        },
        |ps, g, s| {
            let (q, k) = (p(ps, g, "q"), p(ps, g, "k"));
            let kk = g.block_add(k, q)?;
            let scores = g.batched_dot(q, kk)?;
            let w = g.softmax_rows(scores)?;
            let ctx = g.batched_weighted_sum(w, k)?;
            weighted_sum(g, ctx, s)
        },
    );
}

#[test]
fn likelihood_and_entropy_gradients() {
    assert_op_gradients(
        "nll_rows/entropy_rows",
        |rng| {
            let mut ps = ParamStore::new();
            ps.add("x", rand_tensor(rng, 3, 4, -2.0, 2.0));
            ps
        },
        |ps, g, s| {
            let x = p(ps, g, "x");
            let pr = g.softmax_rows(x)?;
            let nll = g.nll_rows(pr, &[Some(1), None, Some(3)])?;
            let h = g.entropy_rows(pr)?;
            let hs = weighted_sum(g, h, s)?;
            g.add(nll, hs)
        },
    );
}

#[test]
fn masking_gradients() {
    assert_op_gradients(
        "mask_mul/mask_rows/where_rows",
        |rng| {
            let mut ps = ParamStore::new();
            ps.add("a", rand_tensor(rng, 3, 2, -1.0, 1.0));
            ps.add("b", rand_tensor(rng, 3, 2, -1.0, 1.0));
            ps
        },
        |ps, g, s| {
            let (a, b) = (p(ps, g, "a"), p(ps, g, "b"));
            let w = g.where_rows(&[true, false, true], a, b)?;
            let m = g.mask_rows(w, &[true, true, false])?;
            let mask = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 2.0], &[2.0, 2.0]]);
            let d = g.mask_mul(m, mask)?;
            weighted_sum(g, d, s)
        },
    );
}

#[test]
fn multiple_consumers_sum_contributions() {
    assert_op_gradients(
        "fan-out",
        |rng| {
            let mut ps = ParamStore::new();
            ps.add("x", rand_tensor(rng, 2, 3, -1.0, 1.0));
            ps
        },
        |ps, g, s| {
            let x = p(ps, g, "x");
            let a = g.tanh(x);
            let b = g.mul(x, a)?;
            let c = g.add(b, x)?;
            let d = g.sigmoid(c);
            let e = g.mul(d, x)?;
            weighted_sum(g, e, s)
        },
    );
}

#[test]
fn composite_mlp_loss() {
    assert_op_gradients(
        "mlp",
        |rng| {
            let mut ps = ParamStore::new();
            ps.add("x", rand_tensor(rng, 4, 3, -1.0, 1.0));
            ps.add("w1", rand_tensor(rng, 3, 5, -1.0, 1.0));
            ps.add("b1", rand_tensor(rng, 1, 5, -0.5, 0.5));
            ps.add("w2", rand_tensor(rng, 5, 3, -1.0, 1.0));
            ps.add("b2", rand_tensor(rng, 1, 3, -0.5, 0.5));
            ps
        },
        |ps, g, _| {
            let x = p(ps, g, "x");
            let (w1, b1, w2, b2) = (p(ps, g, "w1"), p(ps, g, "b1"), p(ps, g, "w2"), p(ps, g, "b2"));
            let h = g.matmul(x, w1)?;
            let h = g.add_row(h, b1)?;
            let h = g.tanh(h);
            let o = g.matmul(h, w2)?;
            let o = g.add_row(o, b2)?;
            let pr = g.softmax_rows(o)?;
            g.nll_rows(pr, &[Some(0), Some(2), Some(1), Some(1)])
        },
    );
}

#[test]
fn adam_matches_scripted_reference() {
    // Reference Adam written out longhand for two steps on w = [0.5, -1.0].
    let grads = [[0.2, -0.4], [0.2, -0.4]];
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    let mut w_ref = [0.5f64, -1.0];
    let mut m = [0.0f64; 2];
    let mut v = [0.0f64; 2];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for j in 0..2 {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / (1.0 - b1.powi(t));
            let vh = v[j] / (1.0 - b2.powi(t));
            w_ref[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    let mut ps = ParamStore::new();
    let id = ps.add("w", Tensor::row_vector(&[0.5, -1.0]));
    let mut st = AdamState::new(&ps, AdamConfig::default());
    for g in grads {
        st.step(&mut ps, &ParamGrads(vec![Some(Tensor::row_vector(&g))]))
            .unwrap();
    }
    assert_eq!(ps.get(id).data(), &w_ref);
    assert_eq!(st.step, 2);
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut rng = RngStream::new(99);
        let mut ps = ParamStore::new();
        let w = ps.add("w", rand_tensor(&mut rng, 4, 4, -1.0, 1.0));
        let mut g = Graph::new(&ps);
        let x = g.param(w);
        let d = g.dropout(x, 0.5, autodiff::Mode::Train, &mut rng).unwrap();
        let y = g.matmul(d, x).unwrap();
        let s = g.softmax_rows(y).unwrap();
        let l = g.nll_rows(s, &[Some(0), Some(1), Some(2), Some(3)]).unwrap();
        let loss = g.value(l).data()[0];
        let grads = g.backward(l).unwrap().into_param_grads();
        (loss.to_bits(), grads.get(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..4,
        vals in proptest::collection::vec(-1e6f64..1e6, 1..24),
    ) {
        let cols = vals.len().div_ceil(rows).max(1);
        let mut data = vals.clone();
        data.resize(rows * cols, 0.0);
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::from_vec(rows, cols, data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let t = g.value(y);
        for r in 0..rows {
            let s: f64 = t.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(t.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn eval_dropout_is_identity(vals in proptest::collection::vec(-1e3f64..1e3, 1..20), seed in 0u64..1000) {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let mut rng = RngStream::new(seed);
        let x = g.constant(Tensor::row_vector(&vals));
        let y = g.dropout(x, 0.5, autodiff::Mode::Eval, &mut rng).unwrap();
        prop_assert_eq!(g.value(y).data(), &vals[..]);
    }
}
