use causald_core::data::{leave_last_out, UserSequence};
use causald_core::models::{fm_pairwise, train_base, Arch, Batch, ModelConfig, RecModel, TrainConfig};
use causald_core::tensor::grad_check_entries;
use causald_core::{Graph, Tensor};
use proptest::prelude::*;

fn model(arch: Arch, seed: u64) -> RecModel {
    RecModel::new(ModelConfig::new(arch, 6, 20), seed).unwrap()
}

fn item_row(m: &RecModel, item: usize) -> Vec<f64> {
    let (_, t) = m.store.iter().find(|(n, _)| *n == "item_emb").unwrap();
    t.row(item).to_vec()
}

#[test]
fn singleton_history_gets_full_attention() {
    let m = model(Arch::Din, 1);
    let batch = Batch::new([(0, &[7u32][..], 3, 1.0)]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch).unwrap();
    assert_eq!(g.value(fwd.attention.unwrap()).data(), &[1.0]);
    assert_eq!(g.value(fwd.mediator).data(), item_row(&m, 7).as_slice());
}

#[test]
fn identical_items_share_attention() {
    let m = model(Arch::Din, 2);
    let batch = Batch::new([(0, &[4u32, 4][..], 9, 1.0)]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch).unwrap();
    assert_eq!(g.value(fwd.attention.unwrap()).data(), &[0.5, 0.5]);
}

#[test]
fn padding_gets_zero_attention_and_leaves_mediator_unchanged() {
    for arch in [Arch::Din, Arch::DeepFm] {
        let m = model(arch, 3);
        let h = [1u32, 5, 2];
        let rows = [(2u32, &h[..], 11u32, 1.0)];
        let plain = m.encode(&Batch::padded(&rows, 3)).unwrap().0;
        let padded_batch = Batch::padded(&rows, 9);
        let padded = m.encode(&padded_batch).unwrap().0;
        assert_eq!(plain, padded);
        if arch == Arch::Din {
            let mut g = Graph::new();
            let fwd = m.forward(&mut g, &padded_batch).unwrap();
            assert!(g.value(fwd.attention.unwrap()).data()[3..].iter().all(|&w| w == 0.0));
        }
    }
}

#[test]
fn empty_history_gives_zero_mediator() {
    let m = model(Arch::Din, 4);
    let (med, _) = m.encode(&Batch::new([(0, &[][..], 3, 1.0)])).unwrap();
    assert!(med.data().iter().all(|&x| x == 0.0));
}

#[test]
fn deepfm_mediator_is_twice_the_embedding() {
    let m = model(Arch::DeepFm, 5);
    let (med, _) = m.encode(&Batch::new([(1, &[1u32, 2][..], 3, 1.0)])).unwrap();
    assert_eq!(med.shape(), &[1, 16]);
}

#[test]
fn fm_of_orthogonal_fields_is_zero() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap());
    let fm = fm_pairwise(&mut g, &[a, b]).unwrap();
    assert_eq!(g.value(fm).item(), 0.0);
}

#[test]
fn fm_matches_pairwise_loop() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let fields: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut brute = 0.0;
        for i in 0..3 {
            for j in i + 1..3 {
                brute += fields[i].iter().zip(&fields[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut g = Graph::new();
        let nodes: Vec<_> = fields
            .iter()
            .map(|f| g.constant(Tensor::matrix(1, 8, f.clone()).unwrap()))
            .collect();
        let fm = fm_pairwise(&mut g, &nodes).unwrap();
        assert!((g.value(fm).item() - brute).abs() < 1e-10);
    }
}

#[test]
fn zero_predictor_gives_one_half() {
    let mut m = model(Arch::Din, 6);
    let ids: Vec<_> = m
        .store
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.starts_with("pred."))
        .map(|(i, _)| m.store.id(i))
        .collect();
    for id in ids {
        m.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let p = m.score(&Batch::new([(0, &[1u32, 2][..], 3, 1.0)])).unwrap();
    assert_eq!(p, vec![0.5]);
}

#[test]
fn bce_reference_values() {
    let bce = |p: f64, y: f64| {
        let mut g = Graph::new();
        let pn = g.constant(Tensor::column(vec![p]));
        let yn = g.constant(Tensor::column(vec![y]));
        let l = g.bce(pn, yn, None).unwrap();
        g.value(l).item()
    };
    assert!((bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((bce(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(bce(1.0, 1.0) < 1e-11);
    assert!((bce(0.8, 0.0) - 1.6094379124341003).abs() < 1e-12);
}

fn grad_check_model(arch: Arch) {
    let m = model(arch, 7);
    let batch = Batch::new([
        (0, &[1u32, 2, 3][..], 4, 1.0),
        (3, &[5u32][..], 6, 0.0),
        (5, &[7u32, 8][..], 9, 1.0),
    ]);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch).unwrap();
    let loss = m.rec_loss(&mut g, &fwd, &batch, None, 1e-3).unwrap();
    for (name, node) in fwd.params.clone() {
        let n = g.value(node).len();
        let entries: Vec<usize> = if name.ends_with("_emb") {
            (0..n).step_by(3).collect()
        } else {
            (0..n).collect()
        };
        let err = grad_check_entries(&mut g, loss, node, &entries, 1e-5).unwrap();
        assert!(err < 1e-4, "{arch} {name}: relative error {err}");
    }
}

#[test]
fn din_full_model_grad_check() {
    grad_check_model(Arch::Din);
}

#[test]
fn deepfm_full_model_grad_check() {
    grad_check_model(Arch::DeepFm);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cdtn");
    for arch in [Arch::Din, Arch::DeepFm] {
        let m = model(arch, 8);
        m.save(&path).unwrap();
        assert_eq!(RecModel::load(&path).unwrap(), m);
    }
}

fn toy_sequences() -> Vec<UserSequence> {
    (0..40u32)
        .map(|u| {
            let items: Vec<u32> = (0..12).map(|k| (u * 7 + k * 3) % 150).collect();
            UserSequence {
                user: u,
                timestamps: (0..items.len() as i64).collect(),
                items,
            }
        })
        .collect()
}

#[test]
fn training_reduces_loss() {
    let (train, _) = leave_last_out(&toy_sequences(), 150, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 64,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    for arch in [Arch::Din, Arch::DeepFm] {
        let (_, logs) = train_base(ModelConfig::new(arch, 40, 150), &train, &cfg, 1).unwrap();
        assert!(logs[2].rec < logs[0].rec, "{arch}: {logs:?}");
    }
}

#[test]
fn training_is_seeded() {
    let (train, _) = leave_last_out(&toy_sequences(), 150, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 50,
        ..TrainConfig::default()
    };
    let a = train_base(ModelConfig::new(Arch::Din, 40, 150), &train, &cfg, 3).unwrap().0;
    let b = train_base(ModelConfig::new(Arch::Din, 40, 150), &train, &cfg, 3).unwrap().0;
    assert_eq!(a, b);
}

fn arb_rows() -> impl Strategy<Value = Vec<(u32, Vec<u32>, u32)>> {
    prop::collection::vec(
        (0u32..6, prop::collection::vec(0u32..20, 0..8), 0u32..20),
        1..8,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_ignore_batch_company(rows in arb_rows(), seed in any::<u64>()) {
        for arch in [Arch::Din, Arch::DeepFm] {
            let m = model(arch, seed);
            let together = m
                .score(&Batch::new(rows.iter().map(|(u, h, t)| (*u, h.as_slice(), *t, 1.0))))
                .unwrap();
            for (k, (u, h, t)) in rows.iter().enumerate() {
                let alone = m.score(&Batch::new([(*u, h.as_slice(), *t, 1.0)])).unwrap()[0];
                prop_assert!((alone - together[k]).abs() < 1e-12);
                prop_assert!(alone > 0.0 && alone < 1.0);
            }
        }
    }
}
