//! `dpmem`: dataset generation, private training runs, sweeps,
//! verification suites and memory prediction.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpmem_core::arch::build_model;
use dpmem_core::clip::Strategy;
use dpmem_core::config::{format_epsilon, RunConfig, StrategyChoice, KEYS};
use dpmem_core::data::SyntheticTask;
use dpmem_core::ledger::Category;
use dpmem_core::predict::{predict, PredictOptions, PredictedFootprint};
use dpmem_core::train::{sweep, train, write_file};
use dpmem_core::verify::{self, Suite};
use dpmem_core::{Error, Result};

const OUT_ENV: &str = "DPMEM_OUT";

#[derive(Parser)]
#[command(name = "dpmem", version, about = "Memory-efficient differentially private fine-tuning harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; later flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (the data seed for `gen-data`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $DPMEM_OUT/<command>, else ./dpmem-out/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set arch=side`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/test files.
    GenData(Common),
    /// Train once and write the run report and per-step memory peaks.
    Train(Common),
    /// Train every (architecture, privacy target) pair of the sweep lists.
    Sweep(Common),
    /// Run oracle suites and write a results file.
    Verify {
        #[command(flatten)]
        common: Common,
        /// gradcheck | ghostnorm | reversible | accountant | memconf | all
        #[arg(default_value = "all")]
        suite: String,
        /// Deliberately break a code path to check that the suites notice.
        #[arg(long, hide = true, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
    /// Print the predicted memory footprint of the configured model.
    PredictMem(Common),
    /// List every config key with its default.
    Keys,
}

impl Common {
    fn load(&self, seed_key: &str) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.set(seed_key, &seed.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, command: &str) -> PathBuf {
        if let Some(p) = &self.out {
            return p.clone();
        }
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("dpmem-out"), PathBuf::from);
        root.join(command)
    }
}

fn gen_data(c: &Common) -> Result<i32> {
    let cfg = c.load("data_seed")?;
    let out = c.out_dir("gen-data");
    let bb = &cfg.backbone;
    let splits = SyntheticTask::new(cfg.data_seed, bb.vocab, bb.seq_len, bb.num_classes).generate_splits(cfg.sizes)?;
    splits.write_dir(&out)?;
    println!(
        "wrote {} / {} / {} examples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(0)
}

fn run_train(c: &Common) -> Result<i32> {
    let cfg = c.load("seed")?;
    let out = c.out_dir("train");
    let report = train(&cfg)?;
    report.write(&out.join("report.json"))?;
    write_file(&out.join("step_peaks.csv"), &report.memory.step_peaks_csv())?;
    let eps = report.privacy.epsilon_spent.map_or("inf".to_string(), |e| format!("{e:.4}"));
    println!(
        "{} test accuracy {:.4}, eps {eps}, sigma {:.4}, peak {} B, {:.3}% trainable",
        cfg.arch, report.test_accuracy, report.privacy.noise_multiplier, report.memory.peak_total, report.trainable_percent
    );
    println!("report: {}", out.join("report.json").display());
    Ok(0)
}

fn run_sweep(c: &Common) -> Result<i32> {
    let cfg = c.load("seed")?;
    let out = c.out_dir("sweep");
    let runs = out.join("runs");
    let mut io_error = None;
    let report = sweep(&cfg, |run, r| match r {
        Ok(rep) => {
            let name = format!("{}_eps{}_seed{}.json", run.arch, format_epsilon(run.epsilon), run.seed);
            if let Err(e) = rep.write(&runs.join(name)) {
                io_error.get_or_insert(e);
            }
            let eps = format_epsilon(run.epsilon);
            eprintln!("{} eps {eps} seed {}: {:.4}", run.arch, run.seed, rep.test_accuracy);
        }
        Err(e) => eprintln!("{} eps {} seed {}: {e}", run.arch, format_epsilon(run.epsilon), run.seed),
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    write_file(&out.join("sweep.csv"), &report.to_csv())?;
    write_file(&out.join("sweep.json"), &report.to_json())?;
    print!("{}", report.to_csv());
    for (eps, (ok, why)) in &report.ordering {
        println!("memory order eps={eps}: {} ({why})", if *ok { "PASS" } else { "FAIL" });
    }
    Ok(if report.rows.iter().any(|r| r.error.is_some()) { 1 } else { 0 })
}

fn run_verify(c: &Common, suite: &str, fault: Option<&str>) -> Result<i32> {
    let suite: Suite = suite.parse()?;
    match fault {
        None => {}
        Some("ghost-sign") => dpmem_core::clip::inject_ghost_sign_fault(true),
        Some(other) => return Err(Error::Config(format!("unknown fault `{other}` (ghost-sign)"))),
    }
    let out = c.out_dir("verify");
    let report = verify::run(suite)?;
    write_file(&out.join("verify.json"), &report.to_json())?;
    print!("{}", report.summary());
    let failed = report.failures().count();
    println!(
        "{}: {} checks, {failed} failed; results in {}",
        if report.pass { "PASS" } else { "FAIL" },
        report.checks.len(),
        out.join("verify.json").display()
    );
    Ok(if report.pass { 0 } else { 1 })
}

fn render_prediction(cfg: &RunConfig, p: &PredictedFootprint) -> String {
    let mut s = format!(
        "{} on N={} d={} T={} B={} ({}, {} bytes/element)\n\n",
        cfg.arch,
        cfg.backbone.depth,
        cfg.backbone.width,
        cfg.backbone.seq_len,
        cfg.batch_size,
        cfg.get("optimizer").unwrap_or_default(),
        p.elem_bytes
    );
    s.push_str(&format!("{:<28} {:>12} {:>12} {:>12} {:>12}\n", "layer", "forward", "act grads", "weight grads", "dp buffer"));
    for l in &p.layers {
        let strategy = match l.strategy {
            Some(Strategy::GhostNorm) => " ghost",
            Some(Strategy::Instantiate) => " inst",
            None => "",
        };
        s.push_str(&format!(
            "{:<28} {:>12} {:>12} {:>12} {:>12}{strategy}\n",
            l.name, l.forward, l.activation_grads, l.weight_grads, l.dp_buffer
        ));
    }
    s.push_str(&format!(
        "\nelements: forward {}, backward {}, ghost norm {}, instantiation {}, weighted sum {}\n\n",
        p.forward, p.backward, p.ghost_norm, p.instantiation, p.weighted_sum
    ));
    s.push_str(&format!("{:<16} {:>14}\n", "category", "bytes"));
    for cat in Category::ALL {
        s.push_str(&format!("{:<16} {:>14}\n", cat.as_str(), p.bytes(cat)));
    }
    s.push_str(&format!("{:<16} {:>14}\n", "total", p.total_bytes()));
    s
}

fn predict_mem(c: &Common) -> Result<i32> {
    let cfg = c.load("seed")?;
    let model = build_model::<f32>(cfg.arch, &cfg.backbone, &cfg.tuning, cfg.seed)?;
    let opts = PredictOptions {
        batch: cfg.batch_size,
        seq: cfg.backbone.seq_len,
        strategy: match cfg.clip_strategy {
            StrategyChoice::MixOpt => None,
            StrategyChoice::Uniform(s) => Some(s),
        },
        optimizer: cfg.optimizer,
        dtype: cfg.dtype,
    };
    let p = predict(&model, &opts);
    let out = c.out_dir("predict-mem");
    write_file(
        &out.join("predicted.json"),
        &serde_json::to_string_pretty(&p).expect("prediction serializes"),
    )?;
    print!("{}", render_prediction(&cfg, &p));
    Ok(0)
}

fn keys() -> Result<i32> {
    let d = RunConfig::default();
    for (k, doc) in KEYS {
        println!("{k} = {}    # {doc}", d.get(k)?);
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => run_train(c),
        Command::Sweep(c) => run_sweep(c),
        Command::Verify {
            common,
            suite,
            inject_fault,
        } => run_verify(common, suite, inject_fault.as_deref()),
        Command::PredictMem(c) => predict_mem(c),
        Command::Keys => keys(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
