use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "depth = 1\nwidth = 8\nffn_hidden = 16\nvocab = 16\nseq_len = 4\nnum_classes = 3\n\
lora_rank = 2\nadapter_bottleneck = 2\nside_reduction = 2\nbatch_size = 8\nsteps = 4\neval_every = 2\n\
train_size = 128\nval_size = 32\ntest_size = 32\n";

fn dpmem(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpmem"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DPMEM_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.conf");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn gen_data_then_train_on_the_files() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    let o = dpmem(&["gen-data", "--config", &conf, "--seed", "3", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.txt", "val.txt", "test.txt"] {
        assert!(dir.path().join("data").join(f).exists());
    }
    let o = dpmem(
        &["train", "--config", &conf, "--seed", "1", "--set", "data_dir=data", "--set", "arch=side", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "dpmem-run-report/1");
    assert_eq!(report["config"]["arch"], "side");
    assert_eq!(report["config"]["seed"], "1");
    assert_eq!(report["config"]["data_dir"], "data");
    assert_eq!(report["dataset"]["train"], 128);
    let peaks = std::fs::read_to_string(dir.path().join("run/step_peaks.csv")).unwrap();
    assert_eq!(peaks.lines().next(), Some("step,peak_bytes"));
    assert_eq!(peaks.lines().count(), 5);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_dpmem"))
        .args(["gen-data", "--config", &conf])
        .current_dir(dir.path())
        .env("DPMEM_OUT", dir.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("root/gen-data/train.txt").exists());
    let o = dpmem(&["gen-data", "--config", &conf], dir.path());
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("dpmem-out/gen-data/train.txt").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    let o = dpmem(&["train", "--config", &conf, "--set", "no_such_key=1"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    assert_eq!(code(&dpmem(&["train", "--config", "missing.conf"], dir.path())), 3);
    assert_eq!(code(&dpmem(&["train", "--bogus-flag"], dir.path())), 2);

    std::fs::write(dir.path().join("blocker"), "").unwrap();
    let o = dpmem(&["gen-data", "--config", &conf, "--out", "blocker/sub"], dir.path());
    assert_eq!(code(&o), 3);

    let o = dpmem(
        &["train", "--config", &conf, "--set", "learning_rate=1e300", "--set", "epsilon=inf", "--out", "nan"],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_writes_results_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = dpmem(&["verify", "accountant", "--out", "v"], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("v/verify.json")).unwrap()).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["suites"][0], "accountant");

    let o = dpmem(&["verify", "ghostnorm", "--inject-fault", "ghost-sign", "--out", "f"], dir.path());
    assert_eq!(code(&o), 1);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("FAIL ghostnorm/per-sample norms") && text.contains("max relative error"), "{text}");

    assert_eq!(code(&dpmem(&["verify", "nonsense"], dir.path())), 2);
}

#[test]
fn predict_mem_prints_categories() {
    let dir = tempfile::tempdir().unwrap();
    let o = dpmem(&["predict-mem", "--set", "arch=lora", "--out", "p"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for word in ["dp_buffers", "optimizer_state", "total", "block0.ffn.w1"] {
        assert!(text.contains(word), "{word} missing from\n{text}");
    }
    assert!(dir.path().join("p/predicted.json").exists());
}

#[test]
fn sweep_writes_csv_with_ordering_column() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    let o = dpmem(
        &[
            "sweep", "--config", &conf, "--set", "sweep_archs=bitfit,side,full", "--set", "sweep_epsilons=inf,8",
            "--out", "s",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("memory_order"));
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(std::fs::read_dir(dir.path().join("s/runs")).unwrap().count(), 6);
    assert!(dir.path().join("s/sweep.json").exists());
}

#[test]
fn keys_lists_every_documented_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = dpmem(&["keys"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("epsilon = 8") && text.contains("batch_size = 32"));
}
