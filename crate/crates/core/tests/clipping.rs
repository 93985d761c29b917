mod common;

use common::*;
use dpmem_core::arch::{build_model, ArchKind, Mlp, Model};
use dpmem_core::autodiff::Nonlinearity;
use dpmem_core::clip::{
    bk_clip_step, dp_clip_step, reweighted_clip_step, summed_grads, ClipPlan, PerExampleModel, Strategy,
};
use dpmem_core::ledger::{Category, Session};
use proptest::prelude::*;

fn mlp(widths: &[usize], seq: usize, seed: u64) -> Mlp<f64> {
    Mlp::new(9, widths, seq, 3, Nonlinearity::Tanh, seed).unwrap()
}

fn plans(model: &impl PerExampleModel<f64>, seq: usize, c: f64) -> Vec<ClipPlan> {
    let shapes = model.layer_shapes(seq);
    vec![
        ClipPlan::mixopt(&shapes, c),
        ClipPlan::uniform(&shapes, Strategy::GhostNorm, c),
        ClipPlan::uniform(&shapes, Strategy::Instantiate, c),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bookkeeping_matches_naive_oracle(
        widths in proptest::collection::vec(1usize..=16, 1..=4),
        seq in 1usize..=8,
        b in 1usize..=8,
        c in prop_oneof![Just(0.05), Just(0.5), Just(5.0), Just(1e6)],
        seed in any::<u64>(),
    ) {
        let m = mlp(&widths, seq, seed);
        let batch = random_batch(b, seq, 9, 3, seed ^ 0x5eed);
        let (sq, sum) = naive_clipped(&m, &batch, c);
        for plan in plans(&m, seq, c) {
            let step = bk_clip_step(&m, &batch, &plan).unwrap();
            prop_assert!(max_rel_vec(&step.norms.sq_norms, &sq) < 1e-8);
            prop_assert!(max_rel_diff(&step.grads, &sum) < 1e-8);
        }
    }

    #[test]
    fn permuting_the_batch_permutes_norms(seq in 1usize..=6, b in 2usize..=8, seed in any::<u64>()) {
        let m = mlp(&[6, 5], seq, seed);
        let batch = random_batch(b, seq, 9, 3, seed);
        let mut perm: Vec<usize> = (0..b).collect();
        dpmem_core::rng::SeededRng::new(seed).shuffle(&mut perm);
        let plan = ClipPlan::mixopt(&m.layer_shapes(seq), 0.3);
        let a = bk_clip_step(&m, &batch, &plan).unwrap();
        let p = bk_clip_step(&m, &batch.select(&perm), &plan).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((p.norms.sq_norms[j] - a.norms.sq_norms[i]).abs() <= 1e-12 * a.norms.sq_norms[i].max(1.0));
        }
        prop_assert!(max_rel_diff(&p.grads, &a.grads) < 1e-12);
    }

    #[test]
    fn clipped_contributions_respect_the_bound(b in 1usize..=6, c in 0.01f64..2.0, seed in any::<u64>()) {
        let m = mlp(&[8, 8], 3, seed);
        let batch = random_batch(b, 3, 9, 3, seed);
        let step = bk_clip_step(&m, &batch, &ClipPlan::mixopt(&m.layer_shapes(3), c)).unwrap();
        for (s, f) in step.norms.sq_norms.iter().zip(&step.factors.factors) {
            prop_assert!(s.sqrt() * f <= c * (1.0 + 1e-9));
            prop_assert!(*f > 0.0 && *f <= 1.0);
        }
    }
}

#[test]
fn strategies_agree_on_the_same_layer() {
    let m = mlp(&[7, 4, 6], 5, 3);
    let batch = random_batch(6, 5, 9, 3, 4);
    let shapes = m.layer_shapes(5);
    let g = bk_clip_step(&m, &batch, &ClipPlan::uniform(&shapes, Strategy::GhostNorm, 0.2)).unwrap();
    let i = bk_clip_step(&m, &batch, &ClipPlan::uniform(&shapes, Strategy::Instantiate, 0.2)).unwrap();
    assert!(max_rel_diff(&g.grads, &i.grads) < 1e-10);
    assert!(max_rel_vec(&g.norms.sq_norms, &i.norms.sq_norms) < 1e-10);
}

#[test]
fn naive_oracle_is_linear_and_symmetric() {
    let m = mlp(&[5, 4], 3, 8);
    let batch = random_batch(5, 3, 9, 3, 8);
    let per = dpmem_core::clip::naive_per_sample_grads(&m, &batch).unwrap();
    let (summed, _) = summed_grads(&m, &batch).unwrap();
    let mut acc = per[0].clone();
    for g in &per[1..] {
        for (k, t) in g {
            acc.get_mut(k).unwrap().axpy_inplace(1.0, t).unwrap();
        }
    }
    assert!(max_rel_diff(&acc, &summed) < 1e-10);
    let single = dpmem_core::clip::naive_per_sample_grads(&m, &batch.example(2)).unwrap();
    assert!(max_rel_diff(&single[0], &summed_grads(&m, &batch.example(2)).unwrap().0) == 0.0);
    let dup = batch.select(&[1, 3, 1]);
    let per = dpmem_core::clip::naive_per_sample_grads(&m, &dup).unwrap();
    assert_eq!(per[0], per[2]);
}

#[test]
fn infinite_bound_is_plain_summed_gradient() {
    let m = mlp(&[6, 6], 4, 1);
    let batch = random_batch(4, 4, 9, 3, 2);
    let (summed, _) = summed_grads(&m, &batch).unwrap();
    let step = dp_clip_step(&m, &batch, &ClipPlan::mixopt(&m.layer_shapes(4), f64::INFINITY)).unwrap();
    assert_eq!(step.grads, summed);
    let bk = bk_clip_step(&m, &batch, &ClipPlan::mixopt(&m.layer_shapes(4), f64::INFINITY)).unwrap();
    assert!(max_rel_diff(&bk.grads, &summed) < 1e-10);
}

#[test]
fn every_architecture_clips_like_the_oracle() {
    let batch = random_batch(5, 4, 11, 3, 21);
    for kind in ArchKind::ALL {
        let mut m: Model<f64> = build_model(kind, &tiny_backbone(), &tiny_tuning(), 2).unwrap();
        perturb_trainable(m.params_mut(), 3, 0.2);
        let (sq, sum) = naive_clipped(&m, &batch, 0.1);
        let plan = ClipPlan::mixopt(&m.layer_shapes(4), 0.1);
        let step = dp_clip_step(&m, &batch, &plan).unwrap();
        assert!(max_rel_vec(&step.norms.sq_norms, &sq) < 1e-8, "{kind}");
        assert!(max_rel_diff(&step.grads, &sum) < 1e-8, "{kind}");
        let rw = reweighted_clip_step(&m, &batch, &plan).unwrap();
        assert!(max_rel_diff(&rw.grads, &sum) < 1e-8, "{kind} reweighted");
    }
}

#[test]
fn ghost_path_never_allocates_per_example_weight_buffers() {
    let (b, t, d) = (4, 4, 32);
    let m = mlp(&[d, d], t, 0);
    let batch = random_batch(b, t, 9, 3, 0);
    let shapes = m.layer_shapes(t);
    let peak = |s| {
        let session = Session::start();
        bk_clip_step(&m, &batch, &ClipPlan::uniform(&shapes, s, 1.0)).unwrap();
        session.finish().unwrap().peak(Category::DpBuffers)
    };
    // two [B,T,T] Gram buffers vs one [B,d,p] per-example gradient
    assert_eq!(peak(Strategy::GhostNorm), 2 * (b * t * t * 8) as u64);
    assert_eq!(peak(Strategy::Instantiate), (b * d * d * 8) as u64);
}

#[test]
fn every_f_kind_clips_like_the_oracle() {
    use dpmem_core::arch::FKind;
    let batch = random_batch(4, 4, 11, 3, 22);
    for f in FKind::ALL {
        let mut t = tiny_tuning();
        t.rev.f_kind = f;
        let mut m: Model<f64> = build_model(ArchKind::Reversible, &tiny_backbone(), &t, 2).unwrap();
        m.set_rank_mask(Some(vec![1.0, 0.0]));
        perturb_trainable(m.params_mut(), 3, 0.2);
        let (sq, sum) = naive_clipped(&m, &batch, 0.1);
        let step = dp_clip_step(&m, &batch, &ClipPlan::mixopt(&m.layer_shapes(4), 0.1)).unwrap();
        assert!(max_rel_vec(&step.norms.sq_norms, &sq) < 1e-8, "{f}");
        assert!(max_rel_diff(&step.grads, &sum) < 1e-8, "{f}");
    }
}
