//! End-to-end private fine-tuning runs and sweeps.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, Accountant};
use crate::arch::{build_model, ArchKind, Model, ModelManifest};
use crate::clip::{dp_clip_step, ClipPlan, PerExampleModel, Strategy};
use crate::config::{format_epsilon, BackboneInit, RunConfig, StrategyChoice};
use crate::data::{Dataset, Splits, SyntheticTask};
use crate::error::{Error, Result};
use crate::ledger::{self, MemReport, Phase, Session};
use crate::optim::{noise_and_average_all, Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::SeededRng;
use crate::tensor::{DType, Element};

pub const REPORT_SCHEMA: &str = "dpmem-run-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub target_epsilon: String,
    /// `None` when no noise was added.
    pub epsilon_spent: Option<f64>,
    pub best_order: Option<f64>,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub steps: usize,
    pub clip_bound: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub total_ms: f64,
    pub per_phase_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    /// Every config key with the value the run used.
    pub config: BTreeMap<String, String>,
    pub model: ModelManifest,
    pub dataset: DatasetInfo,
    pub trainable_percent: f64,
    pub final_val_accuracy: f64,
    pub test_accuracy: f64,
    pub evals: Vec<EvalPoint>,
    /// Mean training loss per step.
    pub loss_trajectory: Vec<f64>,
    pub privacy: PrivacyReport,
    pub memory: MemReport,
    pub clip_strategies: BTreeMap<String, Strategy>,
    /// Reversible only: relative gap between the second stream and the
    /// plain residual forward at initialization, on the first validation batch.
    pub init_identity_gap: Option<f64>,
    pub timing: Timing,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed run report: {e}")))
    }

    /// The report with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        RunReport {
            timing: Timing::default(),
            ..self.clone()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json())
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load the configured dataset, or synthesize it from the task parameters.
pub fn load_splits(cfg: &RunConfig) -> Result<(Splits, String)> {
    let bb = &cfg.backbone;
    let (splits, source) = match &cfg.data_dir {
        Some(dir) => (Splits::read_dir(dir)?, dir.display().to_string()),
        None => {
            let task = SyntheticTask::new(cfg.data_seed, bb.vocab, bb.seq_len, bb.num_classes);
            (task.generate_splits(cfg.sizes)?, format!("synthetic(seed={})", cfg.data_seed))
        }
    };
    let d = &splits.train;
    if d.vocab > bb.vocab || d.seq_len != bb.seq_len || d.num_classes != bb.num_classes {
        return Err(Error::Config(format!(
            "dataset (vocab {}, seq_len {}, classes {}) does not fit the backbone (vocab {}, seq_len {}, classes {})",
            d.vocab, d.seq_len, d.num_classes, bb.vocab, bb.seq_len, bb.num_classes
        )));
    }
    if d.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "train split has {} examples, fewer than batch size {}",
            d.len(),
            cfg.batch_size
        )));
    }
    Ok((splits, source))
}

/// Fixed-size batches from a reshuffled permutation each epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Sampler {
    fn new(n: usize, rng: SeededRng) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn next(&mut self, b: usize) -> Vec<usize> {
        if self.pos + b > self.order.len() {
            self.refill();
        }
        let out = self.order[self.pos..self.pos + b].to_vec();
        self.pos += b;
        out
    }
}

fn evaluate<T: Element>(model: &Model<T>, data: &Dataset, limit: Option<usize>, chunk: usize) -> Result<(f64, f64)> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    let (mut correct, mut loss) = (0usize, 0.0);
    ledger::untracked(|| {
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let batch = data.batch(&idx)?;
            let logits = model.logits(&batch)?.to_f64_vec();
            let c = data.num_classes;
            for (i, &label) in batch.labels().iter().enumerate() {
                let row = &logits[i * c..(i + 1) * c];
                let (arg, max) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a });
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[label];
                correct += (arg == label) as usize;
            }
        }
        Ok::<_, Error>(())
    })?;
    Ok((correct as f64 / n as f64, loss / n as f64))
}

fn clip_plan<T: Element>(model: &Model<T>, cfg: &RunConfig) -> ClipPlan {
    let shapes = model.layer_shapes(cfg.backbone.seq_len);
    let c = cfg.effective_clip_bound();
    match cfg.clip_strategy {
        StrategyChoice::MixOpt => ClipPlan::mixopt(&shapes, c),
        StrategyChoice::Uniform(s) => ClipPlan::uniform(&shapes, s, c),
    }
}

fn optimizer_config(cfg: &RunConfig) -> OptimizerConfig {
    match cfg.optimizer {
        OptimizerKind::Sgd => OptimizerConfig::sgd(cfg.learning_rate),
        OptimizerKind::Adam => OptimizerConfig::adam(cfg.learning_rate),
    }
}

/// Noise multiplier for the configured target; `0` for `ε = ∞`.
pub fn noise_for(cfg: &RunConfig, train_len: usize) -> Result<f64> {
    let q = cfg.batch_size as f64 / train_len as f64;
    calibrate_sigma(cfg.epsilon, cfg.effective_delta(train_len), q, cfg.steps as u64)
}

/// Train per `cfg` on the given splits.
pub fn train_on<T: Element>(cfg: &RunConfig, splits: &Splits, source: &str) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut phase_ms: BTreeMap<String, f64> = BTreeMap::new();
    let mut timed = |name: &str, since: Instant| {
        *phase_ms.entry(name.to_string()).or_default() += since.elapsed().as_secs_f64() * 1e3;
    };

    let train_len = splits.train.len();
    let delta = cfg.effective_delta(train_len);
    let q = cfg.batch_size as f64 / train_len as f64;
    let t0 = Instant::now();
    let sigma = noise_for(cfg, train_len)?;
    timed("calibrate", t0);
    let clip_bound = cfg.effective_clip_bound();

    let mut root = SeededRng::new(cfg.seed);
    let mut sampler = Sampler::new(train_len, root.fork(0xba7c));
    let mut noise_rng = root.fork(0x9015e);
    let mut step_rng = root.fork(0x57e9);

    let session = Session::start();
    let mut model: Model<T> = build_model(cfg.arch, &cfg.backbone, &cfg.tuning, cfg.seed)?;
    if cfg.arch == ArchKind::Reversible {
        model = model.with_retain(cfg.rev_backward);
    }
    if cfg.backbone_init == BackboneInit::Task {
        let bb = &cfg.backbone;
        let seed = splits.train.task_seed.unwrap_or(cfg.data_seed);
        let table = SyntheticTask::new(seed, bb.vocab, bb.seq_len, bb.num_classes).backbone_embedding(bb.width);
        let embed = model.params_mut().get_mut("embed")?;
        for (w, v) in embed.value_mut().data_mut().iter_mut().zip(table) {
            *w = T::of(v);
        }
        for i in 0..bb.depth {
            let w2 = model.params_mut().get_mut(&format!("block{i}.ffn.w2"))?;
            for w in w2.value_mut().data_mut().iter_mut() {
                *w = T::of(w.as_f64() * cfg.residual_scale);
            }
        }
    }
    if let Some(m) = cfg.clip_method {
        model = model.with_clip_method(m);
    }
    let init_identity_gap = if cfg.arch == ArchKind::Reversible {
        let n = splits.val.len().min(cfg.batch_size);
        let batch = splits.val.batch(&(0..n).collect::<Vec<_>>())?;
        Some(ledger::untracked(|| model.rev_identity_gap(&batch))?)
    } else {
        None
    };
    let plan = clip_plan(&model, cfg);
    let mut optimizer = Optimizer::new(optimizer_config(cfg));
    let mut accountant = Accountant::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();

    for step in 0..cfg.steps {
        ledger::begin_step(step);
        model.prepare_step(&mut step_rng);
        let batch = splits.train.batch(&sampler.next(cfg.batch_size))?;

        let t0 = Instant::now();
        let clipped = dp_clip_step(&model, &batch, &plan)?;
        timed("forward_backward_clip", t0);
        let mean = clipped.losses.iter().sum::<f64>() / clipped.losses.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite { step, value: mean });
        }
        losses.push(mean);
        drop(clipped.norms);

        let t0 = Instant::now();
        ledger::set_phase(Phase::Optimize);
        let noisy = noise_and_average_all(clipped.grads, clip_bound, sigma, cfg.batch_size, &mut noise_rng)?;
        model.params_mut().apply_grads(noisy)?;
        optimizer.set_learning_rate(cfg.learning_rate * cfg.lr_schedule.factor(step, cfg.steps));
        optimizer.step(model.params_mut())?;
        if sigma > 0.0 {
            accountant.record(q, sigma, 1)?;
        }
        timed("noise_optimize", t0);

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let t0 = Instant::now();
            let (accuracy, loss) = evaluate(&model, &splits.val, cfg.eval_examples, cfg.batch_size)?;
            timed("eval", t0);
            if !loss.is_finite() {
                return Err(Error::NonFinite { step, value: loss });
            }
            evals.push(EvalPoint {
                step: step + 1,
                accuracy,
                loss,
            });
        }
    }

    let t0 = Instant::now();
    let (test_accuracy, _) = evaluate(&model, &splits.test, None, cfg.batch_size)?;
    timed("eval", t0);
    let manifest = model.manifest();
    drop(optimizer);
    drop(model);
    let memory = session.finish()?;

    let eps = if sigma > 0.0 { Some(accountant.epsilon(delta)?) } else { None };
    Ok(RunReport {
        schema: REPORT_SCHEMA.to_string(),
        config: cfg.to_pairs().into_iter().collect(),
        trainable_percent: manifest.trainable_percent,
        model: manifest,
        dataset: DatasetInfo {
            source: source.to_string(),
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
        final_val_accuracy: evals.last().map_or(0.0, |e| e.accuracy),
        test_accuracy,
        init_identity_gap,
        evals,
        loss_trajectory: losses,
        privacy: PrivacyReport {
            target_epsilon: format_epsilon(cfg.epsilon),
            epsilon_spent: eps.map(|e| e.epsilon),
            best_order: eps.and_then(|e| e.order),
            noise_multiplier: sigma,
            delta,
            sampling_rate: q,
            steps: cfg.steps,
            clip_bound: format_epsilon(clip_bound),
        },
        memory,
        clip_strategies: plan.per_layer.clone(),
        timing: Timing {
            total_ms: started.elapsed().as_secs_f64() * 1e3,
            per_phase_ms: phase_ms,
        },
    })
}

/// Load data and train with the configured element type.
pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (splits, source) = load_splits(cfg)?;
    match cfg.dtype {
        DType::F32 => train_on::<f32>(cfg, &splits, &source),
        DType::F64 => train_on::<f64>(cfg, &splits, &source),
    }
}

/// One `(architecture, ε)` cell of a sweep, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arch: ArchKind,
    pub epsilon: String,
    pub seeds: Vec<u64>,
    pub mean_accuracy: Option<f64>,
    pub accuracies: Vec<f64>,
    pub peak_bytes: Option<u64>,
    pub mean_bytes: Option<f64>,
    pub trainable_percent: Option<f64>,
    pub epsilon_spent: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub error: Option<String>,
}

fn ratio(peaks: &BTreeMap<ArchKind, u64>, a: ArchKind, b: ArchKind) -> Option<f64> {
    Some(*peaks.get(&a)? as f64 / *peaks.get(&b)? as f64)
}

/// The tiered ordering `bitfit ≈ reversible < side < lora < full`: the
/// first pair within 1.2x of each other, side at least 10% above both,
/// side at most 0.6x lora, full at least 10% above lora. Missing
/// architectures skip the checks that need them.
pub fn check_memory_order(peaks: &BTreeMap<ArchKind, u64>) -> (bool, String) {
    use ArchKind::*;
    let mut failures = Vec::new();
    if let Some(r) = ratio(peaks, Bitfit, Reversible) {
        if !(1.0 / 1.2..=1.2).contains(&r) {
            failures.push(format!("bitfit/reversible = {r:.3}, not within 1.2x"));
        }
    }
    for low in [Bitfit, Reversible] {
        if let Some(r) = ratio(peaks, Side, low) {
            if r < 1.1 {
                failures.push(format!("side/{low} = {r:.3} < 1.1"));
            }
        }
    }
    if let Some(r) = ratio(peaks, Side, Lora) {
        if r > 0.6 {
            failures.push(format!("side/lora = {r:.3} > 0.6"));
        }
    }
    if let Some(r) = ratio(peaks, Full, Lora) {
        if r < 1.1 {
            failures.push(format!("full/lora = {r:.3} < 1.1"));
        }
    }
    verdict(failures)
}

/// The memory trend: side at most 0.6x lora, reversible at most 1.2x
/// bitfit, full strictly above every other architecture.
pub fn check_memory_trend(peaks: &BTreeMap<ArchKind, u64>) -> (bool, String) {
    use ArchKind::*;
    let mut failures = Vec::new();
    if let Some(r) = ratio(peaks, Side, Lora) {
        if r > 0.6 {
            failures.push(format!("side/lora = {r:.3} > 0.6"));
        }
    }
    if let Some(r) = ratio(peaks, Reversible, Bitfit) {
        if r > 1.2 {
            failures.push(format!("reversible/bitfit = {r:.3} > 1.2"));
        }
    }
    if let Some(&full) = peaks.get(&Full) {
        for (k, &p) in peaks.iter().filter(|(k, _)| **k != Full) {
            if p >= full {
                failures.push(format!("{k} {p} B >= full {full} B"));
            }
        }
    }
    verdict(failures)
}

fn verdict(failures: Vec<String>) -> (bool, String) {
    if failures.is_empty() {
        (true, "ok".into())
    } else {
        (false, failures.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Tiered ordering verdict per privacy target.
    pub ordering: BTreeMap<String, (bool, String)>,
    /// Trend verdict per privacy target.
    pub trend: BTreeMap<String, (bool, String)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "arch,epsilon,seeds,mean_accuracy,peak_bytes,mean_bytes,trainable_percent,epsilon_spent,noise_multiplier,memory_order,memory_trend,error\n",
        );
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for r in &self.rows {
            let verdict = |m: &BTreeMap<String, (bool, String)>| {
                m.get(&r.epsilon).map_or("", |(ok, _)| if *ok { "PASS" } else { "FAIL" })
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.arch,
                r.epsilon,
                r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
                f(r.mean_accuracy),
                r.peak_bytes.map_or(String::new(), |v| v.to_string()),
                f(r.mean_bytes),
                f(r.trainable_percent),
                f(r.epsilon_spent),
                f(r.noise_multiplier),
                verdict(&self.ordering),
                verdict(&self.trend),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }
}

/// Every `(architecture, ε)` pair of the config's sweep lists. Failures
/// are recorded on their row and the sweep carries on. `on_run` sees each
/// finished run.
pub fn sweep(base: &RunConfig, mut on_run: impl FnMut(&RunConfig, &Result<RunReport>)) -> Result<SweepReport> {
    if base.sweep_archs.is_empty() || base.sweep_epsilons.is_empty() || base.sweep_seeds.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let (splits, source) = load_splits(base)?;
    let mut rows = Vec::new();
    for &eps in &base.sweep_epsilons {
        for &arch in &base.sweep_archs {
            let mut row = SweepRow {
                arch,
                epsilon: format_epsilon(eps),
                seeds: base.sweep_seeds.clone(),
                mean_accuracy: None,
                accuracies: Vec::new(),
                peak_bytes: None,
                mean_bytes: None,
                trainable_percent: None,
                epsilon_spent: None,
                noise_multiplier: None,
                error: None,
            };
            let mut peaks = Vec::new();
            let mut means = Vec::new();
            for &seed in &base.sweep_seeds {
                let mut cfg = base.clone();
                cfg.arch = arch;
                cfg.epsilon = eps;
                cfg.seed = seed;
                let out = match cfg.dtype {
                    DType::F32 => train_on::<f32>(&cfg, &splits, &source),
                    DType::F64 => train_on::<f64>(&cfg, &splits, &source),
                };
                on_run(&cfg, &out);
                match out {
                    Ok(r) => {
                        row.accuracies.push(r.test_accuracy);
                        peaks.push(r.memory.peak_total);
                        means.push(r.memory.mean_live);
                        row.trainable_percent = Some(r.trainable_percent);
                        row.epsilon_spent = r.privacy.epsilon_spent;
                        row.noise_multiplier = Some(r.privacy.noise_multiplier);
                    }
                    Err(e) => {
                        row.error = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            if row.error.is_none() {
                row.mean_accuracy = Some(row.accuracies.iter().sum::<f64>() / row.accuracies.len() as f64);
                row.peak_bytes = peaks.iter().max().copied();
                row.mean_bytes = Some(means.iter().sum::<f64>() / means.len() as f64);
            }
            rows.push(row);
        }
    }
    let (mut ordering, mut trend) = (BTreeMap::new(), BTreeMap::new());
    for &eps in &base.sweep_epsilons {
        let key = format_epsilon(eps);
        let peaks: BTreeMap<ArchKind, u64> = rows
            .iter()
            .filter(|r| r.epsilon == key)
            .filter_map(|r| r.peak_bytes.map(|p| (r.arch, p)))
            .collect();
        ordering.insert(key.clone(), check_memory_order(&peaks));
        trend.insert(key, check_memory_trend(&peaks));
    }
    Ok(SweepReport { rows, ordering, trend })
}
