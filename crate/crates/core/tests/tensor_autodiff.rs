use std::sync::Arc;

use causald_core::tensor::{
    adagrad_step, grad_check, read_container, write_container, AdagradState, Graph, ParamStore,
    Tensor, TensorError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_input(g: &mut Graph, name: &str, v: f64) -> causald_core::NodeId {
    g.input(name, Tensor::scalar(v), true)
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::scalar(0.0), false);
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), false);
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let out = g.matmul(i, v).unwrap();
    assert_eq!(g.value(out).shape(), &[2, 1]);
    assert_eq!(g.value(out).data(), &[3.0, 4.0]);
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    match g.matmul(a, b) {
        Err(TensorError::Shape { node, op, .. }) => {
            assert_eq!(node, 2);
            assert_eq!(op, "matmul");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(f64::MAX));
    let r = g.scale(a, 10.0);
    assert!(matches!(r, Err(TensorError::NonFinite { .. })));
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = scalar_input(&mut g, "x", 3.0);
    let sq = g.mul(x, x).unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.wrt(x).item(), 6.0);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = scalar_input(&mut g, "x", 2.0);
    let w = scalar_input(&mut g, "w", 5.0);
    let dx = g.detach(x).unwrap();
    let loss = g.mul(dx, w).unwrap();
    assert_eq!(g.value(loss).item(), 10.0);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).item(), 2.0);
    assert_eq!(grads.wrt(x).item(), 0.0);
}

#[test]
fn mean_sigmoid_gradient_is_one_eighth() {
    // sigma'(0) = 1/4, mean over two entries contributes 1/2.
    let mut g = Graph::new();
    let x = g.input("x", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), true);
    let s = g.sigmoid(x).unwrap();
    let m = g.mean(s).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.wrt(x).data(), &[0.125, 0.125]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::column(vec![1.0, 2.0]), true);
    assert!(matches!(
        g.backward(x),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(1.5));
    store.add("b", Tensor::column(vec![1.0, 2.0]));
    let mut g = Graph::new();
    let an = g.param(&store, a);
    let loss = g.mul(an, an).unwrap();
    let grads = g.backward(loss).unwrap().for_store(&store);
    assert_eq!(grads[0].item(), 3.0);
    assert_eq!(grads[1].data(), &[0.0, 0.0]);
}

#[test]
fn evaluate_rebinds_inputs() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::scalar(1.0), false);
    let y = g.mul(x, x).unwrap();
    let out = g.evaluate(&[("x", Tensor::scalar(4.0))], &[y]).unwrap();
    assert_eq!(out[0].item(), 16.0);
    assert!(matches!(
        g.evaluate(&[("nope", Tensor::scalar(1.0))], &[y]),
        Err(TensorError::UnknownInput(_))
    ));
}

#[test]
fn grad_check_square() {
    let mut g = Graph::new();
    let x = scalar_input(&mut g, "x", 3.0);
    let sq = g.mul(x, x).unwrap();
    let err = grad_check(&mut g, sq, x, 1e-4).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn grad_check_logistic_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w: Vec<f64> = (0..5).map(|_| rng.random_range(-0.3..0.3)).collect();
    let x: Vec<f64> = (0..5).map(|_| rng.random_range(-0.3..0.3)).collect();
    let mut g = Graph::new();
    let wn = g.input("w", Tensor::matrix(5, 1, w).unwrap(), true);
    let xn = g.input("x", Tensor::matrix(1, 5, x).unwrap(), true);
    let logit = g.matmul(xn, wn).unwrap();
    let p = g.sigmoid(logit).unwrap();
    let one = g.constant(Tensor::scalar(1.0));
    let loss = g.bce(p, one, None).unwrap();
    assert!(grad_check(&mut g, loss, wn, 1e-4).unwrap() < 1e-4);
    assert!(grad_check(&mut g, loss, xn, 1e-4).unwrap() < 1e-4);
}

#[test]
fn grad_check_constant_loss_is_zero() {
    let mut g = Graph::new();
    let x = scalar_input(&mut g, "x", 1.0);
    let c = g.constant(Tensor::scalar(2.0));
    let loss = g.mul(c, c).unwrap();
    assert_eq!(g.backward(loss).unwrap().wrt(x).item(), 0.0);
    assert_eq!(grad_check(&mut g, loss, x, 1e-4).unwrap(), 0.0);
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Every op in one graph, checked against central differences.
#[test]
fn grad_check_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, l, d) = (3, 4, 3);
    let lengths: Arc<[usize]> = Arc::from(vec![4usize, 2, 0]);
    let mut g = Graph::new();
    let table = g.input("table", random_matrix(&mut rng, 6, d), true);
    let idx: Arc<[usize]> = (0..b * l).map(|i| i % 6).collect::<Vec<_>>().into();
    let hist = g.gather(table, idx).unwrap();
    let w = g.input("w", random_matrix(&mut rng, d, 2), true);
    let bias = g.input("bias", Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(), true);
    let h = g.linear(hist, w, bias).unwrap();
    let h = g.sigmoid(h).unwrap();
    let cat = g.concat(&[h, hist]).unwrap();
    let s1 = g.slice_cols(cat, 1, 4).unwrap();
    let rs = g.row_sum(s1).unwrap();
    let logits = g.reshape(rs, &[b, l]).unwrap();
    let att = g.masked_softmax(logits, lengths.clone()).unwrap();
    let pooled = g.weighted_pool(att, hist, lengths.clone()).unwrap();
    let mean_pooled = g.mean_pool(hist, lengths).unwrap();
    let both = g.sub(pooled, mean_pooled).unwrap();
    let soft = g.softmax(both).unwrap();
    let scaled = g.scale(soft, 3.0).unwrap();
    let prod = g.mul(scaled, pooled).unwrap();
    let sq = g.sum_squares(prod).unwrap();
    let sum = g.sum(prod).unwrap();
    let tot = g.add(sq, sum).unwrap();
    let left = g.input("left", random_matrix(&mut rng, 3, 4), true);
    let right = g.input("right", random_matrix(&mut rng, 5, 4), true);
    let pw = g.input("pw", random_matrix(&mut rng, 4, 1), true);
    let pb = g.input("pb", Tensor::new(vec![1], vec![0.3]).unwrap(), true);
    let pm = g.pairwise_mlp_mean(left, right, pw, pb).unwrap();
    let targets = g.constant(Tensor::column(vec![1.0, 0.0, 1.0, 0.0, 1.0]));
    let bce = g.bce(pm, targets, Some(Arc::from(vec![1.0, 2.0, 0.5, 1.0, 1.0]))).unwrap();
    let relu_in = g.input("r", random_matrix(&mut rng, 2, 3), true);
    let r = g.relu(relu_in).unwrap();
    let rm = g.mean(r).unwrap();
    let t1 = g.add(tot, bce).unwrap();
    let loss = g.add(t1, rm).unwrap();
    for node in [table, w, bias, left, right, pw, pb, relu_in] {
        let err = grad_check(&mut g, loss, node, 1e-5).unwrap();
        assert!(err < 1e-4, "node {node:?} relative error {err}");
    }
}

#[test]
fn masked_positions_get_zero_weight_and_zero_gradient() {
    let mut g = Graph::new();
    let x = g.input(
        "x",
        Tensor::matrix(2, 3, vec![0.5, 1.0, 9.0, 2.0, -1.0, 3.0]).unwrap(),
        true,
    );
    let s = g.masked_softmax(x, Arc::from(vec![2usize, 0])).unwrap();
    let v = g.value(s).data().to_vec();
    assert_eq!(v[2], 0.0);
    assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
    let sq = g.sum_squares(s).unwrap();
    let grads = g.backward(sq).unwrap().wrt(x);
    assert_eq!(grads.data()[2], 0.0);
    assert_eq!(&grads.data()[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn adagrad_hand_example() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::scalar(1.0));
    let mut state = AdagradState::new(&store, 0.01, 1e-10);
    adagrad_step(&mut store, &[Tensor::scalar(0.5)], &mut state).unwrap();
    assert_eq!(state.accumulators[0].item(), 0.25);
    let p = store.get(store.id(0)).item();
    assert!((p - 0.99).abs() < 1e-9, "{p}");
}

#[test]
fn adagrad_zero_gradient_is_a_no_op() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::scalar(1.0));
    let mut state = AdagradState::new(&store, 0.01, 1e-10);
    adagrad_step(&mut store, &[Tensor::scalar(0.0)], &mut state).unwrap();
    assert_eq!(store.get(store.id(0)).item(), 1.0);
    assert_eq!(state.accumulators[0].item(), 0.0);
}

#[test]
fn adagrad_second_step_is_smaller() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::scalar(1.0));
    let mut state = AdagradState::new(&store, 0.01, 1e-10);
    let g = [Tensor::scalar(0.5)];
    adagrad_step(&mut store, &g, &mut state).unwrap();
    let p1 = store.get(store.id(0)).item();
    adagrad_step(&mut store, &g, &mut state).unwrap();
    let p2 = store.get(store.id(0)).item();
    assert!((p1 - p2) < (1.0 - p1));
}

#[test]
fn adagrad_rejects_shape_mismatch() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::scalar(1.0));
    let mut state = AdagradState::new(&store, 0.01, 1e-10);
    let bad = [Tensor::column(vec![1.0, 2.0])];
    assert!(adagrad_step(&mut store, &bad, &mut state).is_err());
}

proptest! {
    #[test]
    fn adagrad_accumulators_never_decrease(grads in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(0.0));
        let mut state = AdagradState::new(&store, 0.01, 1e-10);
        let mut last = 0.0;
        for gv in grads {
            adagrad_step(&mut store, &[Tensor::scalar(gv)], &mut state).unwrap();
            let acc = state.accumulators[0].item();
            prop_assert!(acc >= last);
            last = acc;
        }
    }

    #[test]
    fn evaluate_is_pure(vals in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(), false);
        let s = g.softmax(x).unwrap();
        let t = g.sigmoid(s).unwrap();
        let m = g.mean(t).unwrap();
        let bind = [("x", Tensor::matrix(2, 3, vals).unwrap())];
        let a = g.evaluate(&bind, &[s, m]).unwrap();
        let b = g.evaluate(&bind, &[s, m]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn container_round_trip(data in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..12), name in "[a-z_.0-9]{1,12}") {
        let n = data.len();
        let t = Tensor::new(vec![n], data).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &[(name.clone(), t.clone())]).unwrap();
        let back = read_container(&buf[..]).unwrap();
        prop_assert_eq!(back, vec![(name, t)]);
    }
}
