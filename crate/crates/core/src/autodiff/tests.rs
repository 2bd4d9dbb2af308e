use super::*;
use crate::gradcheck;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn conv2d_shape_and_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 5, 5]));
    let k = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);

    let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let k = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[9.0]);

    let x = g.constant(Tensor::ones(vec![1, 1, 4, 4]));
    let k = g.constant(Tensor::ones(vec![1, 1, 2, 2]));
    let y = g.conv2d(x, k, None, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv2d_is_cross_correlation() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]));
    let k = g.constant(t(&[1, 1, 1, 2], &[1.0, 10.0]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[21.0, 32.0]);
}

#[test]
fn conv2d_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    let wrong_cin = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, wrong_cin, None, 1, 0), Err(Error::Dimension(_))));
    let too_big = g.constant(Tensor::zeros(vec![1, 2, 5, 5]));
    assert!(matches!(g.conv2d(x, too_big, None, 1, 0), Err(Error::Dimension(_))));
    let k = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    assert!(g.conv2d(x, k, None, 0, 0).is_err());
    let huge = g.constant(Tensor::full(vec![1, 2, 3, 3], f64::MAX));
    let hx = g.constant(Tensor::full(vec![1, 2, 3, 3], f64::MAX));
    assert!(matches!(g.conv2d(hx, huge, None, 1, 0), Err(Error::Numeric(_))));
}

#[test]
fn add_values_and_grads() {
    let mut g = Graph::<f64>::new();
    let a = g.param(t(&[2], &[1.0, 2.0]));
    let b = g.param(t(&[2], &[3.0, 4.0]));
    let z = g.constant(t(&[2], &[0.0, 0.0]));
    let id = g.add(a, z).unwrap();
    assert_eq!(g.value(id).data(), &[1.0, 2.0]);
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    let loss = g.sum(s).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2]));
    let b = g.constant(Tensor::zeros(vec![3]));
    assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
}

#[test]
fn concat_layout_and_grads() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.param(Tensor::new(vec![1, 3, 1, 2], (5..11).map(f64::from).collect()).unwrap());
    let one = g.concat_channels(&[a]).unwrap();
    assert_eq!(g.value(one), g.value(a));
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[1, 5, 1, 2]);
    assert_eq!(&g.value(c).data()[..4], &[1.0, 2.0, 3.0, 4.0]);
    let loss = g.sum(c).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
    assert_eq!(g.grad(b).unwrap(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let b = g.constant(Tensor::zeros(vec![1, 1, 3, 2]));
    assert!(matches!(g.concat_channels(&[a, b]), Err(Error::Dimension(_))));
    assert!(g.concat_channels(&[]).is_err());
}

#[test]
fn concat_then_slice_restores_gradient_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::ones(vec![2, 2, 3, 3]));
    let b = g.param(Tensor::ones(vec![2, 3, 3, 3]));
    let c = g.concat_channels(&[a, b]).unwrap();
    let sa = g.slice_channels(c, 0, 2).unwrap();
    let sb = g.slice_channels(c, 2, 3).unwrap();
    assert_eq!(g.value(sa), g.value(a));
    assert_eq!(g.value(sb), g.value(b));
    let la = g.weighted_sum(sa, vec![2.0; 36]).unwrap();
    let lb = g.sum(sb).unwrap();
    let loss = g.add(la, lb).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[2.0; 36][..]);
    assert_eq!(g.grad(b).unwrap(), &[1.0; 54][..]);
}

#[test]
fn relu_values_and_grads() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let neg = g.constant(t(&[3], &[-1.0, -2.0, -0.5]));
    let y = g.relu(neg).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 3]);

    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[-1.0, 2.0, 0.0]));
    let y = g.relu(x).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
}

fn bn(x: Tensor<f64>, gamma: &[f64], beta: &[f64], state: &mut BatchNormState<f64>, mode: Mode) -> Vec<f64> {
    let c = gamma.len();
    let mut g = Graph::new();
    let x = g.constant(x);
    let gm = g.constant(t(&[c], gamma));
    let bt = g.constant(t(&[c], beta));
    let y = g.batch_norm(x, gm, bt, state, mode).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn batch_norm_batch_statistics() {
    let mut state = BatchNormState::new(1);
    let out = bn(t(&[2, 1, 1, 1], &[1.0, 3.0]), &[1.0], &[0.0], &mut state, Mode::Train);
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    close(&out, &[-expect, expect], 1e-12);
    assert!((expect - 0.999995).abs() < 1e-6);
    // momentum 0.9 toward mean 2 and biased variance 1
    close(&state.running_mean, &[0.2], 1e-12);
    close(&state.running_var, &[1.0], 1e-12);
}

#[test]
fn batch_norm_zero_gamma_gives_beta() {
    let x = Tensor::new(vec![2, 2, 2, 1], vec![1.0, -4.0, 0.5, 7.0, 3.0, 2.0, -1.0, 0.0]).unwrap();
    let mut state = BatchNormState::new(2);
    let out = bn(x, &[0.0, 0.0], &[0.25, -1.5], &mut state, Mode::Train);
    close(&out, &[0.25, 0.25, -1.5, -1.5, 0.25, 0.25, -1.5, -1.5], 0.0);
}

#[test]
fn batch_norm_infer_identity_statistics() {
    let data = vec![0.3, -2.0, 5.0, 1.25];
    let mut state = BatchNormState::new(1);
    let before = state.clone();
    let out = bn(t(&[1, 1, 2, 2], &data), &[1.0], &[0.0], &mut state, Mode::Infer);
    close(&out, &data, 1e-4);
    assert_eq!(state, before);
}

#[test]
fn empty_batches_cannot_be_built() {
    assert!(matches!(Tensor::<f64>::new(vec![0, 1, 2, 2], vec![]), Err(Error::Dimension(_))));
}

#[test]
fn pooling_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let avg = g.pool2d(x, PoolKind::Avg, 2, 2).unwrap();
    let max = g.pool2d(x, PoolKind::Max, 2, 2).unwrap();
    assert_eq!(g.value(avg).data(), &[2.5]);
    assert_eq!(g.value(max).data(), &[4.0]);

    let c = g.constant(Tensor::full(vec![1, 2, 4, 4], 1.5));
    for kind in [PoolKind::Avg, PoolKind::Max] {
        let y = g.pool2d(c, kind, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.5));
    }
    assert!(matches!(g.pool2d(x, PoolKind::Max, 3, 1), Err(Error::Dimension(_))));
}

#[test]
fn max_pool_ties_route_to_first_index() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(vec![1, 1, 2, 2], 7.0));
    let y = g.pool2d(x, PoolKind::Max, 2, 2).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn global_avg_pool_values() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.shape(y), &[1, 1]);
    assert_eq!(g.value(y).data(), &[2.5]);
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);

    let mut g = Graph::<f64>::new();
    let single = g.constant(t(&[1, 1, 1, 1], &[-3.5]));
    let y = g.global_avg_pool(single).unwrap();
    assert_eq!(g.value(y).data(), &[-3.5]);
    let c = g.constant(Tensor::full(vec![2, 3, 5, 5], 0.75));
    let y = g.global_avg_pool(c).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
}

#[test]
fn dense_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[1.5, -2.0, 0.0, 4.0]));
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero = g.constant(Tensor::zeros(vec![2]));
    let y = g.dense(x, eye, zero).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let x = g.constant(t(&[1, 2], &[1.0, 1.0]));
    let w = g.constant(t(&[2, 1], &[1.0, 2.0]));
    let b = g.constant(t(&[1], &[0.5]));
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.5]);

    let bad = g.constant(Tensor::zeros(vec![3, 1]));
    assert!(matches!(g.dense(x, bad, b), Err(Error::Dimension(_))));
}

fn softmax_of(row: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, row.len()], row));
    let y = g.softmax(x).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_values() {
    close(&softmax_of(&[0.0, 0.0]), &[0.5, 0.5], 1e-15);
    close(&softmax_of(&[1000.0, 1000.0]), &[0.5, 0.5], 1e-15);
    close(&softmax_of(&[2f64.ln(), 0.0]), &[2.0 / 3.0, 1.0 / 3.0], 1e-12);
}

fn sce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(t(&[labels.len(), k], logits));
    let l = g.sparse_categorical_cross_entropy(x, labels).unwrap();
    g.value(l).data()[0]
}

#[test]
fn cross_entropy_values() {
    // probs [1, 0] after clamping
    let confident = sce(&[0.0, -1e4], 2, &[0]);
    assert!(confident.abs() < 1e-12, "{confident}");
    assert!((sce(&[0.0, 0.0], 2, &[1]) - 2f64.ln()).abs() < 1e-12);
    let mean = sce(&[0.0, 0.0, 0.0, -1e4], 2, &[1, 0]);
    assert!((mean - 0.346574).abs() < 1e-6, "{mean}");
    // confident mistake is bounded by the clamp
    let wrong = sce(&[0.0, -1e4], 2, &[1]);
    assert!((wrong - (-(LOG_CLAMP.ln()))).abs() < 1e-9, "{wrong}");

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2]));
    assert!(matches!(g.sparse_categorical_cross_entropy(x, &[2]), Err(Error::Data(_))));
    assert!(g.sparse_categorical_cross_entropy(x, &[0, 1]).is_err());
}

#[test]
fn backward_sum_and_fan_out() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[0.5, -1.0, 2.0]));
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 3]);

    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[0.5, -1.0, 2.0]));
    let y = g.add(x, x).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.add(x, c).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(x).is_some());
    assert!(g.grad(c).is_none());
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(Error::Graph(_))));
}

#[test]
fn every_op_matches_finite_differences_on_five_seeds() {
    for seed in 0..5 {
        let reports = gradcheck::check_ops(seed, 1e-4).unwrap();
        assert!(reports.len() >= 13);
        for r in reports {
            assert!(r.passed, "{} seed {seed}: {}", r.name, r.max_rel_err);
        }
    }
}

#[test]
fn forward_is_pure() {
    let build = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2, 2, 4, 4], (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap());
        let k = g.param(Tensor::new(vec![3, 2, 3, 3], (0..54).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap());
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let gm = g.param(Tensor::ones(vec![3]));
        let bt = g.param(Tensor::zeros(vec![3]));
        let mut state = BatchNormState::new(3);
        let y = g.batch_norm(y, gm, bt, &mut state, Mode::Train).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.pool2d(y, PoolKind::Max, 2, 2).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        let y = g.softmax(y).unwrap();
        let y = g.value(y).clone();
        (y, state)
    };
    let (a, sa) = build();
    let (b, sb) = build();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(
        row in prop::collection::vec(-50.0f64..50.0, 1..8),
        shift in -500.0f64..500.0,
    ) {
        let p = softmax_of(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let q = softmax_of(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv_output_shape_formula(
        h in 1usize..10, w in 1usize..10, k in 1usize..5, p in 0usize..3, s in 1usize..4,
    ) {
        prop_assume!(k <= h + 2 * p && k <= w + 2 * p);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, h, w]));
        let kern = g.constant(Tensor::zeros(vec![2, 1, k, k]));
        let y = g.conv2d(x, kern, None, s, p).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 2, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1][..]);
    }
}
