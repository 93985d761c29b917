use dpmem_core::arch::ArchKind;
use dpmem_core::config::{RunConfig, KEYS};
use dpmem_core::data::{SplitSizes, SyntheticTask};
use dpmem_core::train::{check_memory_order, check_memory_trend, sweep, train, RunReport, REPORT_SCHEMA};
use dpmem_core::Error;
use std::collections::BTreeMap;

fn small() -> RunConfig {
    RunConfig::from_text(
        "depth = 1\nwidth = 8\nffn_hidden = 16\nvocab = 16\nseq_len = 4\nnum_classes = 3\n\
         lora_rank = 2\nadapter_bottleneck = 2\nside_reduction = 2\n\
         batch_size = 8\nsteps = 6\neval_every = 3\nlearning_rate = 1e-2\n\
         train_size = 256\nval_size = 64\ntest_size = 64\nepsilon = 8\n",
    )
    .unwrap()
}

#[test]
fn identical_config_gives_identical_report() {
    for arch in ArchKind::ALL {
        let mut c = small();
        c.arch = arch;
        let a = train(&c).unwrap().without_timing();
        let b = train(&c).unwrap().without_timing();
        assert_eq!(a, b, "{arch}");
        assert_eq!(a.memory.step_peaks.len(), c.steps);
    }
}

#[test]
fn seed_changes_the_run() {
    let c = small();
    let mut d = small();
    d.seed = 5;
    assert_ne!(train(&c).unwrap().loss_trajectory, train(&d).unwrap().loss_trajectory);
}

#[test]
fn report_echoes_every_key_and_round_trips() {
    let mut c = small();
    c.apply_override("clip_bound=0.5").unwrap();
    let r = train(&c).unwrap();
    assert_eq!(r.schema, REPORT_SCHEMA);
    assert_eq!(r.config.len(), KEYS.len());
    for (k, v) in c.to_pairs() {
        assert_eq!(r.config[&k], v, "{k}");
    }
    let back = RunConfig::from_text(&r.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<String>()).unwrap();
    assert_eq!(back, c);
    assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
    assert_eq!(r.evals.iter().map(|e| e.step).collect::<Vec<_>>(), [3, 6]);
    assert_eq!(r.loss_trajectory.len(), 6);
    assert_eq!(r.privacy.clip_bound, "0.5");
}

#[test]
fn privacy_ledger_matches_target() {
    let mut c = small();
    let r = train(&c).unwrap();
    let spent = r.privacy.epsilon_spent.unwrap();
    assert!(spent <= 8.0 + 1e-6 && spent > 7.0, "{spent}");
    assert!(r.privacy.noise_multiplier > 0.0);
    assert!(r.privacy.best_order.is_some());
    assert_eq!(r.privacy.delta, 1.0 / 256.0);

    c.apply_override("epsilon=inf").unwrap();
    let r = train(&c).unwrap();
    assert_eq!(r.privacy.noise_multiplier, 0.0);
    assert_eq!(r.privacy.epsilon_spent, None);
    assert_eq!(r.privacy.clip_bound, "inf");
}

#[test]
fn divergent_run_aborts_with_non_finite() {
    let mut c = small();
    c.apply_override("learning_rate=1e300").unwrap();
    c.epsilon = f64::INFINITY;
    match train(&c) {
        Err(e @ Error::NonFinite { .. }) => assert_eq!(e.exit_code(), 1),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn bad_config_is_a_config_error() {
    let mut c = small();
    c.batch_size = 1000;
    assert_eq!(train(&c).unwrap_err().exit_code(), 2);
    let mut c = small();
    c.backbone.width = 7;
    c.arch = ArchKind::Side;
    assert_eq!(train(&c).unwrap_err().exit_code(), 2);
}

#[test]
fn dataset_directory_is_used_when_given() {
    let dir = tempfile::tempdir().unwrap();
    let sizes = SplitSizes {
        train: 64,
        val: 16,
        test: 16,
    };
    SyntheticTask::new(9, 16, 4, 3).generate_splits(sizes).unwrap().write_dir(dir.path()).unwrap();
    let mut c = small();
    c.data_dir = Some(dir.path().to_path_buf());
    let r = train(&c).unwrap();
    assert_eq!((r.dataset.train, r.dataset.val, r.dataset.test), (64, 16, 16));
    assert_eq!(r.dataset.source, dir.path().display().to_string());

    c.backbone.seq_len = 5;
    assert_eq!(train(&c).unwrap_err().exit_code(), 2);
}

#[test]
fn sweep_has_one_row_per_arch_and_target() {
    let mut c = small();
    c.apply_override("sweep_archs=full,bitfit,side").unwrap();
    c.apply_override("sweep_epsilons=inf,8").unwrap();
    c.apply_override("sweep_seeds=0,1").unwrap();
    let mut runs = 0;
    let s = sweep(&c, |_, r| {
        assert!(r.is_ok());
        runs += 1;
    })
    .unwrap();
    assert_eq!(runs, 12);
    assert_eq!(s.rows.len(), 6);
    for r in &s.rows {
        assert_eq!(r.accuracies.len(), 2);
        let mean = r.accuracies.iter().sum::<f64>() / 2.0;
        assert!((r.mean_accuracy.unwrap() - mean).abs() < 1e-12);
        assert_eq!(r.noise_multiplier.unwrap() == 0.0, r.epsilon == "inf");
    }
    let csv = s.to_csv();
    let mut lines = csv.lines();
    let header: Vec<_> = lines.next().unwrap().split(',').collect();
    let order = header.iter().position(|h| *h == "memory_order").unwrap();
    let rows: Vec<Vec<_>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!(r.len(), header.len());
        assert!(r[order] == "PASS" || r[order] == "FAIL");
    }
}

#[test]
fn sweep_records_failures_per_row() {
    let mut c = small();
    c.backbone.width = 6;
    c.tuning.side.reduction = 4;
    c.apply_override("sweep_archs=bitfit,side").unwrap();
    c.apply_override("sweep_epsilons=inf").unwrap();
    let s = sweep(&c, |_, _| {}).unwrap();
    assert!(s.rows[0].error.is_none());
    assert!(s.rows[1].error.is_some());
    assert!(s.rows[1].mean_accuracy.is_none());
}

fn peaks(v: &[(ArchKind, u64)]) -> BTreeMap<ArchKind, u64> {
    v.iter().copied().collect()
}

#[test]
fn memory_verdicts() {
    use ArchKind::*;
    let tiered = peaks(&[(Bitfit, 100), (Reversible, 110), (Side, 130), (Lora, 250), (Full, 400)]);
    assert!(check_memory_order(&tiered).0);
    assert!(check_memory_trend(&tiered).0);

    let side_lowest = peaks(&[(Side, 50), (Reversible, 90), (Bitfit, 100), (Lora, 200), (Full, 400)]);
    let (ok, why) = check_memory_order(&side_lowest);
    assert!(!ok && why.contains("side/bitfit"));
    assert!(check_memory_trend(&side_lowest).0);

    let full_not_top = peaks(&[(Lora, 300), (Full, 300)]);
    assert!(!check_memory_trend(&full_not_top).0);
    assert!(!check_memory_order(&full_not_top).0);
    assert!(check_memory_order(&BTreeMap::new()).0);
}

#[test]
fn identity_gap_is_reported_for_reversible_only() {
    let mut c = small();
    c.arch = ArchKind::Reversible;
    let gap = train(&c).unwrap().init_identity_gap.unwrap();
    assert!(gap.is_finite() && gap >= 0.0, "{gap}");
    c.arch = ArchKind::Lora;
    assert_eq!(train(&c).unwrap().init_identity_gap, None);
}
