mod common;

use common::*;
use dpmem_core::arch::{build_model, swap_subfunction_f, ArchKind, BackboneConfig, Exchange, FKind, Model};
use dpmem_core::autodiff::{GradCollector, Nonlinearity, RetainPolicy};
use dpmem_core::clip::{summed_grads, PerExampleModel};
use dpmem_core::ledger::{Category, Session};
use dpmem_core::tensor::{Tensor};

fn model(kind: ArchKind, seed: u64) -> Model<f64> {
    build_model(kind, &tiny_backbone(), &tiny_tuning(), seed).unwrap()
}

#[test]
fn every_architecture_passes_gradcheck() {
    let batch = random_batch(3, 4, 11, 3, 5);
    for kind in ArchKind::ALL {
        let mut m = model(kind, 1);
        perturb_trainable(m.params_mut(), 7, 0.3);
        let (err, at) = worst_gradcheck(&mut m, &batch, 12);
        assert!(err < 1e-4, "{kind}: {err} at {at}");
    }
}

#[test]
fn every_f_kind_passes_gradcheck() {
    let batch = random_batch(3, 4, 11, 3, 6);
    for f in FKind::ALL {
        let mut t = tiny_tuning();
        t.rev.f_kind = f;
        let mut m: Model<f64> = build_model(ArchKind::Reversible, &tiny_backbone(), &t, 2).unwrap();
        m.set_rank_mask(Some(vec![1.0, 0.0]));
        perturb_trainable(m.params_mut(), 8, 0.3);
        let (err, at) = worst_gradcheck(&mut m, &batch, 12);
        assert!(err < 1e-4, "{f}: {err} at {at}");
    }
}

#[test]
fn trainable_partitions() {
    let bb = BackboneConfig {
        depth: 4,
        width: 64,
        ffn_hidden: 256,
        vocab: 1000,
        seq_len: 8,
        num_classes: 4,
        nonlinearity: Nonlinearity::Gelu,
    };
    let t = Default::default();
    let full: Model<f32> = build_model(ArchKind::Full, &bb, &t, 0).unwrap();
    assert_eq!(full.params().trainable_numel(), full.params().total_numel());
    assert_eq!(full.manifest().trainable_percent, 100.0);

    let bitfit: Model<f32> = build_model(ArchKind::Bitfit, &bb, &t, 0).unwrap();
    let biases = 4 * (256 + 64) + 4;
    let head = 64 * 4;
    assert_eq!(bitfit.params().trainable_numel(), biases + head);
    let total = 1000 * 64 + 4 * (2 * 64 * 256 + 256 + 64) + 64 * 4 + 4;
    assert_eq!(bitfit.params().total_numel(), total);
    assert!(bitfit
        .params()
        .trainable()
        .all(|p| p.name().ends_with(".b1") || p.name().ends_with(".b2") || p.name().starts_with("head.")));
    assert!(bitfit.manifest().trainable_percent < 1.0);
}

#[test]
fn zero_init_deltas_leave_logits_unchanged() {
    let batch = random_batch(4, 4, 11, 3, 9);
    let frozen = model(ArchKind::Bitfit, 3).logits(&batch).unwrap();
    for kind in [ArchKind::Lora, ArchKind::Adapter, ArchKind::Full] {
        let out = model(kind, 3).logits(&batch).unwrap();
        assert_eq!(out.data(), frozen.data(), "{kind}");
    }
}

#[test]
fn frozen_parameters_never_receive_gradients() {
    let batch = random_batch(3, 4, 11, 3, 10);
    for kind in ArchKind::ALL {
        let m = model(kind, 1);
        let (grads, _) = summed_grads(&m, &batch).unwrap();
        for name in grads.keys() {
            assert!(m.params().get(name).unwrap().trainable(), "{kind}: {name}");
        }
        assert!(m.params().iter().all(|p| p.grad().is_none()));
    }
}

#[test]
fn side_with_zero_taps_sees_only_its_biases() {
    let mut m = model(ArchKind::Side, 4);
    let names: Vec<String> = m.params().iter().map(|p| p.name().to_string()).collect();
    for name in &names {
        if name.ends_with(".w") && (name.starts_with("side.down") || name.contains(".tap")) {
            let p = m.params_mut().get_mut(name).unwrap();
            p.value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let a = m.logits(&random_batch(2, 4, 11, 3, 1)).unwrap();
    let b = m.logits(&random_batch(2, 4, 11, 3, 2)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn side_backbone_activations_are_not_retained() {
    let bb = BackboneConfig {
        depth: 3,
        width: 32,
        ffn_hidden: 128,
        vocab: 20,
        seq_len: 8,
        num_classes: 3,
        nonlinearity: Nonlinearity::Gelu,
    };
    let mut t = tiny_tuning();
    t.side.reduction = 4;
    let m: Model<f64> = build_model(ArchKind::Side, &bb, &t, 0).unwrap();
    let batch = random_batch(4, 8, 20, 3, 0);
    let session = Session::start();
    summed_grads(&m, &batch).unwrap();
    let r = session.finish().unwrap();
    let hidden_block = 4 * 8 * 128 * 8;
    // backbone keeps at most one block's hidden layer alive at a time plus the taps' inputs
    assert!(r.scope_activations("backbone") < 2 * hidden_block + 4 * 4 * 8 * 32 * 8, "{r:?}");
    assert!(r.scope_activations("side") > 0);
}

fn rev_model(depth: usize, exchange: Exchange, seed: u64) -> Model<f64> {
    let mut bb = tiny_backbone();
    bb.depth = depth;
    let mut t = tiny_tuning();
    t.rev.exchange = exchange;
    t.rev.alpha = 0.9;
    t.rev.beta = 0.8;
    let mut m: Model<f64> = build_model(ArchKind::Reversible, &bb, &t, seed).unwrap();
    perturb_trainable(m.params_mut(), seed + 100, 0.3);
    m
}

fn embedded(m: &Model<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = dpmem_core::rng::SeededRng::new(seed);
    let data = (0..2 * 4 * 8).map(|_| rng.gaussian()).collect();
    let _ = m;
    Tensor::from_vec(&[2, 4, 8], data, Category::Activations).unwrap()
}

#[test]
fn block_inverse_round_trip() {
    for exchange in [Exchange::Once, Exchange::EveryBlock, Exchange::Never] {
        let m = rev_model(3, exchange, 11);
        for i in 0..3 {
            let (x1, x2) = (embedded(&m, 1), embedded(&m, 2));
            let (y1, y2) = m.rev_block_forward(i, x1.clone(), x2.clone()).unwrap();
            let (r1, r2) = m.rev_inverse(i, y1, y2).unwrap();
            let err = x1.data().iter().zip(r1.data()).chain(x2.data().iter().zip(r2.data()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "{exchange:?} block {i}: {err}");
        }
    }
}

#[test]
fn zero_f_and_g_give_closed_form() {
    let mut m = rev_model(3, Exchange::Never, 12);
    let names: Vec<String> = m.params().iter().map(|p| p.name().to_string()).collect();
    for n in names.iter().filter(|n| n.starts_with("block")) {
        m.params_mut().get_mut(n).unwrap().value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = embedded(&m, 3);
    let (mut a, mut b) = (x.clone(), x.clone());
    for i in 0..3 {
        (a, b) = m.rev_block_forward(i, a, b).unwrap();
    }
    for ((p, q), v) in a.data().iter().zip(b.data()).zip(x.data()) {
        assert!((p - 0.9f64.powi(3) * v).abs() < 1e-14);
        assert!((q - 0.8f64.powi(3) * v).abs() < 1e-14);
    }
}

#[test]
fn rev_logits_match_store_all_and_grads_match() {
    let batch = random_batch(3, 4, 11, 3, 13);
    let mut bb = tiny_backbone();
    bb.depth = 6;
    let mut t = tiny_tuning();
    t.rev.alpha = 0.7;
    let mut m: Model<f64> = build_model(ArchKind::Reversible, &bb, &t, 5).unwrap();
    perturb_trainable(m.params_mut(), 55, 0.3);
    let rev_logits = m.logits(&batch).unwrap();
    let mut rev = GradCollector::sum();
    m.loss_backward(&batch, None, &mut rev).unwrap();
    let m = m.with_retain(RetainPolicy::StoreAll);
    let mut all = GradCollector::sum();
    m.loss_backward(&batch, None, &mut all).unwrap();
    let err = max_rel_diff(&rev.into_grads(), &all.into_grads());
    assert!(err < 1e-8, "{err}");
    let store_all_logits = {
        let m2 = m;
        m2.loss(&batch).unwrap();
        m2.logits(&batch).unwrap()
    };
    for (a, b) in rev_logits.data().iter().zip(store_all_logits.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn float32_depth8_drift() {
    let mut bb = tiny_backbone();
    bb.depth = 8;
    let m: Model<f32> = build_model(ArchKind::Reversible, &bb, &tiny_tuning(), 3).unwrap();
    let batch = random_batch(2, 4, 11, 3, 2);
    let (state, _) = m.rev_forward(&batch).unwrap();
    let (mut a, mut b) = (state.x1, state.x2);
    for i in (0..8).rev() {
        (a, b) = m.rev_inverse(i, a, b).unwrap();
    }
    let x0 = m.params().get("embed").unwrap().value();
    let d = 8;
    let mut worst = 0.0f32;
    for (r, &tok) in batch.tokens().iter().enumerate() {
        for j in 0..d {
            let want = x0.data()[tok * d + j];
            worst = worst.max((a.data()[r * d + j] - want).abs()).max((b.data()[r * d + j] - want).abs());
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn reversible_activation_memory_is_flat_in_depth() {
    let peak = |depth| {
        let mut bb = tiny_backbone();
        bb.depth = depth;
        let m: Model<f64> = build_model(ArchKind::Reversible, &bb, &tiny_tuning(), 1).unwrap();
        let batch = random_batch(4, 4, 11, 3, 3);
        let s = Session::start();
        let mut c = GradCollector::sum();
        m.loss_backward(&batch, None, &mut c).unwrap();
        drop(c);
        s.finish().unwrap().peak(Category::Activations)
    };
    let (p2, p16) = (peak(2), peak(16));
    assert!(p16 as f64 <= 1.25 * p2 as f64, "{p2} vs {p16}");
}

#[test]
fn swapping_f_keeps_zero_init_logits_and_invertibility() {
    let batch = random_batch(2, 4, 11, 3, 4);
    let m = model(ArchKind::Reversible, 6);
    let before = m.logits(&batch).unwrap();
    let m = swap_subfunction_f(m, FKind::ParallelAdapter).unwrap();
    assert_eq!(m.tuning().rev.f_kind, FKind::ParallelAdapter);
    assert!(m.params().iter().all(|p| !p.name().contains(".lora")));
    let after = m.logits(&batch).unwrap();
    assert_eq!(before.data(), after.data());
    let mut m = m;
    perturb_trainable(m.params_mut(), 3, 0.3);
    let (x1, x2) = (embedded(&m, 5), embedded(&m, 6));
    let (y1, y2) = m.rev_block_forward(1, x1.clone(), x2.clone()).unwrap();
    let (r1, r2) = m.rev_inverse(1, y1, y2).unwrap();
    let err = x1.data().iter().zip(r1.data()).chain(x2.data().iter().zip(r2.data()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10);
    assert!(swap_subfunction_f(self::model(ArchKind::Lora, 1), FKind::PrefixLike).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut t = tiny_tuning();
    t.rev.alpha = 1e-3;
    assert!(build_model::<f64>(ArchKind::Reversible, &tiny_backbone(), &t, 0).is_err());
    let mut t = tiny_tuning();
    t.side.reduction = 3;
    assert!(build_model::<f64>(ArchKind::Side, &tiny_backbone(), &t, 0).is_err());
    let mut bb = tiny_backbone();
    bb.depth = 0;
    assert!(build_model::<f64>(ArchKind::Full, &bb, &tiny_tuning(), 0).is_err());
    assert!("prompt".parse::<ArchKind>().is_err());
    assert!("nope".parse::<FKind>().is_err());
}
