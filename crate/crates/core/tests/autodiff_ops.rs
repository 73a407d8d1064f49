use epalm_core::autodiff::gradcheck::GradCheckOptions;
use epalm_core::autodiff::{grad_check, AttentionMask, Graph, ParamStore};
use epalm_core::{Error, Tensor};
use proptest::prelude::*;

fn store() -> ParamStore<f64> {
    ParamStore::new()
}

#[test]
fn matmul_identity_and_hand_values() {
    let s = store();
    let mut g = Graph::new(&s);
    let eye = g.input(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = g.input(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(c), g.value(b));

    let a = g.input(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = g.input(2, 1, vec![1.0, 1.0]).unwrap();
    let c = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(c), &[3.0, 7.0]);
}

#[test]
fn matmul_dimension_error_names_both_shapes() {
    let s = store();
    let mut g = Graph::new(&s);
    let a = g.input(2, 3, vec![0.0; 6]).unwrap();
    let b = g.input(2, 3, vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn elementwise_fixed_points() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(1, 3, vec![-1.0, 0.0, 2.5]).unwrap();
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r), &[0.0, 0.0, 2.5]);
    let z = g.input(1, 3, vec![0.0; 3]).unwrap();
    let y = g.add(x, z).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let zero = g.input(1, 1, vec![0.0]).unwrap();
    let gz = g.gelu(zero).unwrap();
    assert_eq!(g.value(gz), &[0.0]);
    // tanh approximation at x = 1: 0.5·(1 + tanh(√(2/π)·1.044715))
    let one = g.input(1, 1, vec![1.0]).unwrap();
    let g1 = g.gelu(one).unwrap();
    let expect = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715f64).tanh());
    assert!((g.value(g1)[0] - expect).abs() < 1e-15);
}

#[test]
fn broadcast_only_over_leading_rows() {
    let s = store();
    let mut g = Graph::new(&s);
    let a = g.input(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = g.input(1, 2, vec![10.0, 20.0]).unwrap();
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c), &[11.0, 22.0, 13.0, 24.0]);
    let bad = g.input(1, 3, vec![0.0; 3]).unwrap();
    assert!(g.add(a, bad).is_err());
}

#[test]
fn softmax_cases() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(1, 3, vec![0.0; 3]).unwrap();
    let y = g.softmax(x).unwrap();
    for &v in g.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.input(1, 2, vec![1000.0, 0.0]).unwrap();
    let y = g.softmax(x).unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y)[1] >= 0.0 && g.value(y)[1] < 1e-300);
    let x = g.input(1, 2, vec![2f64.ln(), 0.0]).unwrap();
    let y = g.softmax(x).unwrap();
    assert!((g.value(y)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(y)[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn masked_softmax_rows_sum_to_one_over_allowed() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(3, 3, vec![0.3, -1.0, 2.0, 0.1, 0.2, 0.3, 5.0, -5.0, 0.0]).unwrap();
    let y = g.masked_softmax(x, &AttentionMask::causal(3)).unwrap();
    let v = g.value(y);
    assert_eq!(v[1], 0.0);
    assert_eq!(v[2], 0.0);
    assert!((v[0] - 1.0).abs() < 1e-15);
    for i in 0..3 {
        let sum: f64 = v[i * 3..i * 3 + 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_cases() {
    let s = store();
    let mut g = Graph::new(&s);
    let gain = g.input(1, 2, vec![1.0, 1.0]).unwrap();
    let zero = g.input(1, 2, vec![0.0, 0.0]).unwrap();
    let c = g.input(1, 2, vec![3.0, 3.0]).unwrap();
    let y = g.layer_norm(c, gain, zero, 1e-5).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0]);

    let x = g.input(1, 2, vec![1.0, -1.0]).unwrap();
    let y = g.layer_norm(x, gain, zero, 1e-5).unwrap();
    let k = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y)[0] - k).abs() < 1e-15);
    assert!((g.value(y)[1] + k).abs() < 1e-15);

    let b = g.input(1, 2, vec![0.5, -2.0]).unwrap();
    let y = g.layer_norm(c, gain, b, 1e-5).unwrap();
    assert_eq!(g.value(y), &[0.5, -2.0]);

    let wrong = g.input(1, 3, vec![1.0; 3]).unwrap();
    assert!(g.layer_norm(x, wrong, zero, 1e-5).is_err());
}

#[test]
fn embedding_gather_scatter_and_range() {
    let mut s = store();
    let t = s
        .add("table", Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true)
        .unwrap();
    let mut g = Graph::new(&s);
    let tn = g.param(t);
    let e = g.embedding(tn, &[0]).unwrap();
    assert_eq!(g.value(e), &[1.0, 2.0]);
    let e = g.embedding(tn, &[2, 2, 2, 1]).unwrap();
    let loss = g.sum(e).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.params().get(t).unwrap(), &[0.0, 0.0, 1.0, 1.0, 3.0, 3.0]);
    match g.embedding(tn, &[3]).unwrap_err() {
        Error::Index { index, .. } => assert_eq!(index, 3),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn cross_entropy_cases() {
    let s = store();
    let mut g = Graph::new(&s);
    let u = g.input(2, 4, vec![0.7; 8]).unwrap();
    let l = g.cross_entropy(u, &[1, 3], &[true, true]).unwrap();
    assert!((g.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-15);

    let x = g.input(1, 2, vec![2.0, 0.0]).unwrap();
    let l = g.cross_entropy(x, &[0], &[true]).unwrap();
    let expect = (1.0 + (-2.0f64).exp()).ln();
    assert!((g.scalar(l).unwrap() - expect).abs() < 1e-15);
    assert!((g.scalar(l).unwrap() - 0.1269).abs() < 1e-4);

    let big = g.input(1, 3, vec![200.0, 0.0, 0.0]).unwrap();
    let l = g.cross_entropy(big, &[0], &[true]).unwrap();
    assert!(g.scalar(l).unwrap() < 1e-80);

    // masked rows never contribute
    let x = g.input(2, 2, vec![2.0, 0.0, -9.0, 9.0]).unwrap();
    let l = g.cross_entropy(x, &[0, 0], &[true, false]).unwrap();
    assert!((g.scalar(l).unwrap() - expect).abs() < 1e-15);

    assert!(matches!(g.cross_entropy(x, &[0, 0], &[false, false]), Err(Error::AllMasked)));
}

#[test]
fn backward_sum_gives_ones() {
    let mut s = store();
    let w = s.add("w", Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap(), true).unwrap();
    let mut g = Graph::new(&s);
    let wn = g.param(w);
    let l = g.sum(wn).unwrap();
    let b = g.backward(l).unwrap();
    assert_eq!(b.params().get(w).unwrap(), &[1.0; 6]);
}

#[test]
fn frozen_weight_passes_gradient_but_receives_none() {
    let mut s = store();
    let w = s.add("frozen", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false).unwrap();
    let mut g = Graph::new(&s);
    let x = g.input_with_grad(1, 2, vec![1.0, 1.0]).unwrap();
    let wn = g.param(w);
    let y = g.matmul(x, wn).unwrap();
    let l = g.sum(y).unwrap();
    let b = g.backward(l).unwrap();
    assert_eq!(b.node(x).unwrap(), &[3.0, 7.0]);
    assert!(b.params().get(w).is_none());
    assert!(b.node(wn).is_none());
}

#[test]
fn grads_accumulate_until_zeroed() {
    let mut s = store();
    let w = s.add("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true).unwrap();
    let grads = {
        let mut g = Graph::new(&s);
        let wn = g.param(w);
        let l = g.sum(wn).unwrap();
        g.backward(l).unwrap().into_params()
    };
    s.accumulate(&grads);
    s.accumulate(&grads);
    assert_eq!(s.tensor(w).grad().unwrap(), &[2.0, 2.0]);
    s.zero_grads();
    assert_eq!(s.tensor(w).grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn non_finite_is_an_error() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(1, 1, vec![f64::MAX]).unwrap();
    let y = g.scale(x, 10.0);
    assert!(matches!(y, Err(Error::NonFinite(_))));
}

#[test]
fn grad_check_linear_is_exact() {
    let mut s = store();
    let w = s.add("w", Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap(), true).unwrap();
    let report = grad_check(
        &s,
        |g| {
            let x = g.input(2, 3, vec![1.0, 2.0, 3.0, -0.5, 0.5, 0.25])?;
            let wn = g.param(w);
            let y = g.matmul(x, wn)?;
            g.sum(y)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_softmax_cross_entropy_chain() {
    let mut s = store();
    let w = s
        .add(
            "w",
            Tensor::new(vec![3, 4], (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect()).unwrap(),
            true,
        )
        .unwrap();
    let report = grad_check(
        &s,
        |g| {
            let x = g.input(3, 3, vec![0.2, -0.4, 1.0, 0.3, 0.3, -0.7, 1.2, 0.0, 0.5])?;
            let wn = g.param(w);
            let y = g.matmul(x, wn)?;
            let p = g.softmax(y)?;
            let z = g.scale(p, 3.0)?;
            g.cross_entropy(z, &[0, 3, 1], &[true, true, false])
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn grad_check_rejects_non_scalar() {
    let mut s = store();
    let w = s.add("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true).unwrap();
    let r = grad_check(&s, |g| Ok(g.param(w)), &GradCheckOptions::default());
    assert!(r.is_err());
}

#[test]
fn corrupted_analytic_gradient_is_detected() {
    let mut s = store();
    let w = s.add("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true).unwrap();
    let opts = GradCheckOptions {
        corrupt_analytic: Some(1.5),
        ..GradCheckOptions::default()
    };
    let r = grad_check(
        &s,
        |g| {
            let wn = g.param(w);
            let y = g.mul(wn, wn)?;
            g.sum(y)
        },
        &opts,
    )
    .unwrap();
    assert!(r.max_rel_error > 0.1);
    assert_eq!(r.worst_param, "w");
}

/// Builds a composite of every differentiable op over random inputs.
fn composite_loss(g: &mut Graph<'_, f64>, ids: &[epalm_core::autodiff::ParamId; 4], rows: usize) -> epalm_core::Result<epalm_core::autodiff::NodeId> {
    let [x, w, gain, bias] = ids.map(|i| g.param(i));
    let h = g.matmul(x, w)?;
    let n = g.layer_norm(h, gain, bias, 1e-5)?;
    let a = g.gelu(n)?;
    // Squared first so finite differences never straddle the kink.
    let hh = g.mul(h, h)?;
    let r = g.relu(hh)?;
    let m = g.mul(a, r)?;
    let s = g.add(m, bias)?;
    let att = g.matmul_t(s, s)?;
    let p = g.masked_softmax(att, &AttentionMask::causal(rows))?;
    let mixed = g.matmul(p, s)?;
    let left = g.slice_cols(mixed, 0, 2)?;
    let right = g.slice_cols(mixed, 2, 4)?;
    let swapped = g.concat_cols(&[right, left])?;
    let top = g.slice_rows(swapped, 0, 1)?;
    let stacked = g.concat_rows(&[swapped, top])?;
    let table = g.scale(stacked, 0.7)?;
    let e = g.embedding(table, &[0, rows, 0])?;
    let mut targets = vec![1, 3, 0];
    targets.truncate(3);
    g.cross_entropy(e, &targets, &[true, true, true])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn finite_differences_agree_on_composite(rows in 2usize..5, seed in 0u64..1000) {
        let mut rng = epalm_core::rng::RngState::new(seed);
        let mut s = store();
        let x = s.add("x", Tensor::new(vec![rows, 3], rng.normal_vec(1.0, rows * 3)).unwrap(), true).unwrap();
        let w = s.add("w", Tensor::new(vec![3, 4], rng.normal_vec(0.8, 12)).unwrap(), true).unwrap();
        let gain = s.add("gain", Tensor::new(vec![4], rng.normal_vec(1.0, 4)).unwrap(), true).unwrap();
        let bias = s.add("bias", Tensor::new(vec![4], rng.normal_vec(0.5, 4)).unwrap(), true).unwrap();
        let ids = [x, w, gain, bias];
        let report = grad_check(&s, |g| composite_loss(g, &ids, rows), &GradCheckOptions { coords_per_param: 64, ..Default::default() }).unwrap();
        // Random composites can be badly conditioned; backward bugs show up as O(1) errors.
        prop_assert!(report.max_rel_error < 1e-3, "{:?}", report);
    }

    #[test]
    fn output_shapes_are_functions_of_input_shapes(m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.input(m, k, vec![0.5; m * k]).unwrap();
        let b = g.input(k, n, vec![0.25; k * n]).unwrap();
        let c = g.matmul(a, b).unwrap();
        prop_assert_eq!(g.shape(c), (m, n));
        let t = g.matmul_t(a, a).unwrap();
        prop_assert_eq!(g.shape(t), (m, m));
        let sm = g.softmax(c).unwrap();
        prop_assert_eq!(g.shape(sm), (m, n));
        let r = g.concat_rows(&[a, a]).unwrap();
        prop_assert_eq!(g.shape(r), (2 * m, k));
        let cc = g.concat_cols(&[a, c]).unwrap();
        prop_assert_eq!(g.shape(cc), (m, k + n));
    }

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let s = store();
        let mut g = Graph::new(&s);
        let n = vals.len();
        let x = g.input(1, n, vals).unwrap();
        let y = g.softmax(x).unwrap();
        let sum: f64 = g.value(y).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(g.value(y).iter().all(|&p| p >= 0.0));
    }
}
