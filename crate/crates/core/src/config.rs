//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Later assignments win, so precedence is built-in defaults, then the
//! config file, then command-line overrides applied in order.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{ArchKind, BackboneConfig, Exchange, FKind, TuningConfig};
use crate::autodiff::{Nonlinearity, RetainPolicy};
use crate::clip::{ClipMethod, Strategy};
use crate::data::SplitSizes;
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::tensor::DType;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "model init, batching and noise seed"),
    ("depth", "number of backbone blocks N"),
    ("width", "model width d"),
    ("ffn_hidden", "hidden width of each block's feed-forward layer"),
    ("vocab", "token vocabulary size"),
    ("seq_len", "sequence length T"),
    ("num_classes", "number of labels"),
    ("nonlinearity", "relu | gelu | tanh | identity"),
    ("backbone_init", "task (token table aligned with the synthetic task) | random"),
    ("residual_scale", "factor on frozen FFN output weights under task init"),
    ("arch", "full | lora | adapter | bitfit | side | reversible"),
    ("lora_rank", "rank of LoRA deltas (also the reversible F rank)"),
    ("lora_scaling", "LoRA output scale, or `auto` for 1/rank"),
    ("adapter_bottleneck", "adapter bottleneck width"),
    ("side_reduction", "side network width is width / side_reduction"),
    ("rev_alpha", "reversible x1 coefficient in [0.01, 1]"),
    ("rev_beta", "reversible x2 coefficient in [0.01, 1]"),
    ("rev_exchange", "once | every-block | never"),
    ("rev_f", "lora-ffn | parallel-adapter | prefix-like | dylora-like"),
    ("rev_prefix_len", "prefix length of prefix-like F, or `auto` for lora_rank"),
    ("rev_backward", "recompute | store-all"),
    ("batch_size", "examples per step B"),
    ("steps", "optimizer steps"),
    ("learning_rate", "optimizer step size"),
    ("optimizer", "sgd | adam"),
    ("lr_schedule", "constant | linear (decay to zero over the run)"),
    ("epsilon", "privacy target; `inf` trains without noise or clipping"),
    ("delta", "privacy delta, or `auto` for 1 / train size"),
    ("clip_bound", "per-example gradient norm bound C"),
    ("clip_strategy", "mixopt | ghost | instantiate"),
    ("clip_method", "auto | bookkeeping | reweighted"),
    ("dtype", "f32 | f64"),
    ("eval_every", "validation cadence in steps"),
    ("eval_examples", "validation examples per eval, or `all`"),
    ("data_dir", "dataset directory, or `none` to synthesize in memory"),
    ("data_seed", "synthetic task seed"),
    ("train_size", "synthetic train examples"),
    ("val_size", "synthetic validation examples"),
    ("test_size", "synthetic test examples"),
    ("sweep_archs", "comma-separated architectures for `sweep`"),
    ("sweep_epsilons", "comma-separated privacy targets for `sweep`"),
    ("sweep_seeds", "comma-separated seeds averaged per sweep row"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyChoice {
    MixOpt,
    Uniform(Strategy),
}

impl FromStr for StrategyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixopt" => Ok(StrategyChoice::MixOpt),
            "ghost" => Ok(StrategyChoice::Uniform(Strategy::GhostNorm)),
            "instantiate" => Ok(StrategyChoice::Uniform(Strategy::Instantiate)),
            _ => Err(Error::Config(format!("unknown clip strategy `{s}` (mixopt, ghost, instantiate)"))),
        }
    }
}

impl Display for StrategyChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyChoice::MixOpt => "mixopt",
            StrategyChoice::Uniform(Strategy::GhostNorm) => "ghost",
            StrategyChoice::Uniform(Strategy::Instantiate) => "instantiate",
        })
    }
}

/// Where the frozen token table comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneInit {
    /// Linear in the synthetic task's token features.
    Task,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub backbone_init: BackboneInit,
    pub residual_scale: f64,
    pub arch: ArchKind,
    pub tuning: TuningConfig,
    pub rev_backward: RetainPolicy,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub clip_bound: f64,
    pub clip_strategy: StrategyChoice,
    pub clip_method: Option<ClipMethod>,
    pub dtype: DType,
    pub eval_every: usize,
    pub eval_examples: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub sizes: SplitSizes,
    pub sweep_archs: Vec<ArchKind>,
    pub sweep_epsilons: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            backbone: BackboneConfig::desk(),
            backbone_init: BackboneInit::Task,
            residual_scale: 0.25,
            arch: ArchKind::Full,
            tuning: TuningConfig::default(),
            rev_backward: RetainPolicy::ReversibleRecompute,
            batch_size: 32,
            steps: 2000,
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Constant,
            epsilon: 8.0,
            delta: None,
            clip_bound: 1.0,
            clip_strategy: StrategyChoice::MixOpt,
            clip_method: None,
            dtype: DType::F32,
            eval_every: 100,
            eval_examples: None,
            data_dir: None,
            data_seed: 0,
            sizes: SplitSizes::default(),
            sweep_archs: ArchKind::ALL.to_vec(),
            sweep_epsilons: vec![f64::INFINITY, 8.0, 1.6],
            sweep_seeds: vec![0],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match value {
        "auto" | "none" | "all" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// `inf`, `infinity` and `∞` map to `+∞`.
pub fn parse_epsilon(value: &str) -> Result<f64> {
    let eps = match value.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "∞" => f64::INFINITY,
        v => parse::<f64>("epsilon", v)?,
    };
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got `{value}`")));
    }
    Ok(eps)
}

pub fn format_epsilon(eps: f64) -> String {
    if eps.is_infinite() {
        "inf".into()
    } else {
        eps.to_string()
    }
}

fn list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty list `{value}`")));
    }
    Ok(items)
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn opt<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bb = &mut self.backbone;
        let t = &mut self.tuning;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "depth" => bb.depth = parse(key, v)?,
            "width" => bb.width = parse(key, v)?,
            "ffn_hidden" => bb.ffn_hidden = parse(key, v)?,
            "vocab" => bb.vocab = parse(key, v)?,
            "seq_len" => bb.seq_len = parse(key, v)?,
            "num_classes" => bb.num_classes = parse(key, v)?,
            "nonlinearity" => bb.nonlinearity = parse::<Nonlinearity>(key, v)?,
            "backbone_init" => {
                self.backbone_init = match v {
                    "task" => BackboneInit::Task,
                    "random" => BackboneInit::Random,
                    _ => return Err(Error::Config(format!("`backbone_init`: unknown `{v}` (task, random)"))),
                }
            }
            "residual_scale" => self.residual_scale = parse(key, v)?,
            "arch" => self.arch = parse(key, v)?,
            "lora_rank" => t.lora.rank = parse(key, v)?,
            "lora_scaling" => t.lora.scaling = parse_auto(key, v)?,
            "adapter_bottleneck" => t.adapter.bottleneck = parse(key, v)?,
            "side_reduction" => t.side.reduction = parse(key, v)?,
            "rev_alpha" => t.rev.alpha = parse(key, v)?,
            "rev_beta" => t.rev.beta = parse(key, v)?,
            "rev_exchange" => t.rev.exchange = parse::<Exchange>(key, v)?,
            "rev_f" => t.rev.f_kind = parse::<FKind>(key, v)?,
            "rev_prefix_len" => t.rev.prefix_len = parse_auto(key, v)?,
            "rev_backward" => {
                self.rev_backward = match v {
                    "recompute" => RetainPolicy::ReversibleRecompute,
                    "store-all" => RetainPolicy::StoreAll,
                    _ => return Err(Error::Config(format!("`rev_backward`: unknown `{v}` (recompute, store-all)"))),
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "optimizer" => self.optimizer = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = parse(key, v)?,
            "epsilon" => self.epsilon = parse_epsilon(v)?,
            "delta" => self.delta = parse_auto(key, v)?,
            "clip_bound" => {
                self.clip_bound = match v {
                    "inf" | "infinity" => f64::INFINITY,
                    _ => parse(key, v)?,
                }
            }
            "clip_strategy" => self.clip_strategy = parse(key, v)?,
            "clip_method" => {
                self.clip_method = match v {
                    "auto" => None,
                    "bookkeeping" => Some(ClipMethod::Bookkeeping),
                    "reweighted" => Some(ClipMethod::Reweighted),
                    _ => return Err(Error::Config(format!("`clip_method`: unknown `{v}` (auto, bookkeeping, reweighted)"))),
                }
            }
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("`dtype`: unknown `{v}` (f32, f64)"))),
                }
            }
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_examples" => self.eval_examples = parse_auto(key, v)?,
            "data_dir" => self.data_dir = (v != "none").then(|| PathBuf::from(v)),
            "data_seed" => self.data_seed = parse(key, v)?,
            "train_size" => self.sizes.train = parse(key, v)?,
            "val_size" => self.sizes.val = parse(key, v)?,
            "test_size" => self.sizes.test = parse(key, v)?,
            "sweep_archs" => self.sweep_archs = list(v, |s| parse(key, s))?,
            "sweep_epsilons" => self.sweep_epsilons = list(v, parse_epsilon)?,
            "sweep_seeds" => self.sweep_seeds = list(v, |s| parse(key, s))?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let bb = &self.backbone;
        let t = &self.tuning;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "depth" => bb.depth.to_string(),
            "width" => bb.width.to_string(),
            "ffn_hidden" => bb.ffn_hidden.to_string(),
            "vocab" => bb.vocab.to_string(),
            "seq_len" => bb.seq_len.to_string(),
            "num_classes" => bb.num_classes.to_string(),
            "nonlinearity" => format!("{:?}", bb.nonlinearity).to_lowercase(),
            "backbone_init" => match self.backbone_init {
                BackboneInit::Task => "task",
                BackboneInit::Random => "random",
            }
            .into(),
            "residual_scale" => self.residual_scale.to_string(),
            "arch" => self.arch.to_string(),
            "lora_rank" => t.lora.rank.to_string(),
            "lora_scaling" => opt(&t.lora.scaling, "auto"),
            "adapter_bottleneck" => t.adapter.bottleneck.to_string(),
            "side_reduction" => t.side.reduction.to_string(),
            "rev_alpha" => t.rev.alpha.to_string(),
            "rev_beta" => t.rev.beta.to_string(),
            "rev_exchange" => match t.rev.exchange {
                Exchange::Once => "once",
                Exchange::EveryBlock => "every-block",
                Exchange::Never => "never",
            }
            .into(),
            "rev_f" => t.rev.f_kind.to_string(),
            "rev_prefix_len" => opt(&t.rev.prefix_len, "auto"),
            "rev_backward" => match self.rev_backward {
                RetainPolicy::ReversibleRecompute => "recompute",
                RetainPolicy::StoreAll => "store-all",
            }
            .into(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
            .into(),
            "lr_schedule" => self.lr_schedule.to_string(),
            "epsilon" => format_epsilon(self.epsilon),
            "delta" => opt(&self.delta, "auto"),
            "clip_bound" => format_epsilon(self.clip_bound),
            "clip_strategy" => self.clip_strategy.to_string(),
            "clip_method" => match self.clip_method {
                None => "auto",
                Some(ClipMethod::Bookkeeping) => "bookkeeping",
                Some(ClipMethod::Reweighted) => "reweighted",
            }
            .into(),
            "dtype" => match self.dtype {
                DType::F32 => "f32",
                DType::F64 => "f64",
            }
            .into(),
            "eval_every" => self.eval_every.to_string(),
            "eval_examples" => opt(&self.eval_examples, "all"),
            "data_dir" => self
                .data_dir
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
            "data_seed" => self.data_seed.to_string(),
            "train_size" => self.sizes.train.to_string(),
            "val_size" => self.sizes.val.to_string(),
            "test_size" => self.sizes.test.to_string(),
            "sweep_archs" => join(&self.sweep_archs, |a| a.to_string()),
            "sweep_epsilons" => join(&self.sweep_epsilons, |e| format_epsilon(*e)),
            "sweep_seeds" => join(&self.sweep_seeds, |s| s.to_string()),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        })
    }

    /// Every key with its current value, in documentation order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("documented key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(k.trim(), v)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Cross-field checks; per-field parsing already happened in [`Self::set`].
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.tuning.validate(self.arch, &self.backbone)?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.sizes.train < self.batch_size || self.sizes.val == 0 || self.sizes.test == 0 {
            return Err(Error::Config(format!(
                "split sizes {}/{}/{} too small for batch size {}",
                self.sizes.train, self.sizes.val, self.sizes.test, self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.residual_scale.is_finite() && self.residual_scale >= 0.0) {
            return Err(Error::Config("residual_scale must be finite and non-negative".into()));
        }
        if !(self.clip_bound > 0.0) {
            return Err(Error::Config("clip_bound must be positive".into()));
        }
        if self.epsilon.is_finite() && self.clip_bound.is_infinite() {
            return Err(Error::Config("a finite epsilon needs a finite clip_bound".into()));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!("delta must be in (0, 1), got {d}")));
            }
        }
        Ok(())
    }

    pub fn effective_delta(&self, train_len: usize) -> f64 {
        self.delta.unwrap_or(1.0 / train_len as f64)
    }

    /// An infinite privacy target also disables clipping.
    pub fn effective_clip_bound(&self) -> f64 {
        if self.epsilon.is_infinite() {
            f64::INFINITY
        } else {
            self.clip_bound
        }
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("arch = side\nepsilon = inf # no privacy\n\nlora_scaling = 0.5\nsweep_seeds = 1, 2,3").unwrap();
        assert_eq!(c.arch, ArchKind::Side);
        assert!(c.epsilon.is_infinite());
        assert_eq!(c.sweep_seeds, vec![1, 2, 3]);
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_is_gettable() {
        let c = RunConfig::default();
        assert_eq!(c.to_pairs().len(), KEYS.len());
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn later_assignments_win() {
        let mut c = RunConfig::from_text("steps = 10\nsteps = 20").unwrap();
        assert_eq!(c.steps, 20);
        c.apply_override("steps=30").unwrap();
        assert_eq!(c.steps, 30);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::from_text("steps = 1\nbogus = 2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(RunConfig::from_text("steps 3").is_err());
        assert!(RunConfig::from_text("epsilon = -1").is_err());
        assert!(RunConfig::from_text("arch = prompt").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let c = RunConfig::from_text("clip_bound = inf").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_text("clip_bound = inf\nepsilon = inf").unwrap();
        assert!(c.validate().is_ok());
        assert_eq!(RunConfig::default().effective_delta(50_000), 2e-5);
    }
}
