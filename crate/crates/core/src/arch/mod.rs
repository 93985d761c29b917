//! Model builders over a frozen residual-FFN backbone.
//!
//! Every model embeds tokens, runs `N` blocks `x ← x + W₂σ(W₁x + b₁) + b₂`,
//! mean-pools over the sequence and applies a linear classifier. The kinds
//! differ in what is trainable and what is injected:
//!
//! | kind         | trainable                                             |
//! |--------------|-------------------------------------------------------|
//! | `full`       | everything                                            |
//! | `lora`       | low-rank deltas on `W₁`, `W₂`; head                   |
//! | `adapter`    | serial bottleneck adapter after each FFN; head        |
//! | `bitfit`     | backbone biases; head                                 |
//! | `side`       | narrow side network fed by per-block taps; head       |
//! | `reversible` | F/G sub-functions of two-stream coupled blocks; head  |
//!
//! All kinds draw the backbone from the same seeded stream, so the frozen
//! weights of two kinds built with one seed coincide.

mod mlp;
mod reversible;

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use mlp::Mlp;
pub use reversible::RevState;

use crate::autodiff::{GradCollector, Nonlinearity, RetainPolicy, Tape, Var};
use crate::clip::{ClipMethod, LayerShape, PerExampleModel};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ledger::{self, Category, Phase};
use crate::params::{ParamStore, Parameter};
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub nonlinearity: Nonlinearity,
}

impl BackboneConfig {
    /// `N = 6, d = 256, ffn 1024, T = 128, vocab 1000, 4 classes`.
    pub fn desk() -> Self {
        BackboneConfig {
            depth: 6,
            width: 256,
            ffn_hidden: 1024,
            vocab: 1000,
            seq_len: 128,
            num_classes: 4,
            nonlinearity: Nonlinearity::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("depth", self.depth),
            ("width", self.width),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("backbone `{name}` must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Full,
    Lora,
    Adapter,
    Bitfit,
    Side,
    Reversible,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] = [
        ArchKind::Full,
        ArchKind::Lora,
        ArchKind::Adapter,
        ArchKind::Bitfit,
        ArchKind::Side,
        ArchKind::Reversible,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Full => "full",
            ArchKind::Lora => "lora",
            ArchKind::Adapter => "adapter",
            ArchKind::Bitfit => "bitfit",
            ArchKind::Side => "side",
            ArchKind::Reversible => "reversible",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .or(match s {
                "rev" => Some(ArchKind::Reversible),
                "bias" | "bias-only" => Some(ArchKind::Bitfit),
                _ => None,
            })
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture `{s}` (full, lora, adapter, bitfit, side, reversible)"
                ))
            })
    }
}

/// Trainable mechanism of the reversible block's `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FKind {
    LoraFfn,
    ParallelAdapter,
    PrefixLike,
    DyloraLike,
}

impl FKind {
    pub const ALL: [FKind; 4] = [
        FKind::LoraFfn,
        FKind::ParallelAdapter,
        FKind::PrefixLike,
        FKind::DyloraLike,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FKind::LoraFfn => "lora-ffn",
            FKind::ParallelAdapter => "parallel-adapter",
            FKind::PrefixLike => "prefix-like",
            FKind::DyloraLike => "dylora-like",
        }
    }
}

impl fmt::Display for FKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown F kind `{s}` (lora-ffn, parallel-adapter, prefix-like, dylora-like)"
                ))
            })
    }
}

/// When the reversible streams trade places.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exchange {
    /// After the first block only.
    Once,
    EveryBlock,
    Never,
}

impl FromStr for Exchange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "once" | "true" => Ok(Exchange::Once),
            "every-block" => Ok(Exchange::EveryBlock),
            "never" | "false" => Ok(Exchange::Never),
            _ => Err(Error::Config(format!("unknown exchange `{s}` (once, every-block, never)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `1 / rank`.
    pub scaling: Option<f64>,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.scaling.unwrap_or(1.0 / self.rank as f64)
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 64,
            scaling: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { bottleneck: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideConfig {
    /// Side width is `d / reduction`.
    pub reduction: usize,
}

impl Default for SideConfig {
    fn default() -> Self {
        SideConfig { reduction: 8 }
    }
}

pub const REV_COEF_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevConfig {
    pub alpha: f64,
    pub beta: f64,
    pub exchange: Exchange,
    pub f_kind: FKind,
    /// Prefix length of the prefix-like `F`; defaults to the LoRA rank.
    pub prefix_len: Option<usize>,
}

impl Default for RevConfig {
    fn default() -> Self {
        RevConfig {
            alpha: 1.0,
            beta: 1.0,
            exchange: Exchange::Once,
            f_kind: FKind::LoraFfn,
            prefix_len: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TuningConfig {
    pub lora: LoraConfig,
    pub adapter: AdapterConfig,
    pub side: SideConfig,
    pub rev: RevConfig,
}

impl TuningConfig {
    pub fn validate(&self, kind: ArchKind, bb: &BackboneConfig) -> Result<()> {
        let uses_lora = kind == ArchKind::Lora
            || (kind == ArchKind::Reversible
                && matches!(self.rev.f_kind, FKind::LoraFfn | FKind::DyloraLike));
        if uses_lora && self.lora.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if uses_lora && !(self.lora.scale() > 0.0) {
            return Err(Error::Config("LoRA scaling must be positive".into()));
        }
        if matches!(kind, ArchKind::Adapter | ArchKind::Reversible) && self.adapter.bottleneck == 0 {
            return Err(Error::Config("adapter bottleneck must be positive".into()));
        }
        if kind == ArchKind::Side {
            let k = self.side.reduction;
            if k == 0 || bb.width % k != 0 {
                return Err(Error::Config(format!(
                    "side reduction {k} must divide the backbone width {}",
                    bb.width
                )));
            }
        }
        if kind == ArchKind::Reversible {
            for (name, v) in [("alpha", self.rev.alpha), ("beta", self.rev.beta)] {
                if !(REV_COEF_FLOOR..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "reversible {name} = {v} outside [{REV_COEF_FLOOR}, 1]"
                    )));
                }
            }
            if self.rev.prefix_len == Some(0) {
                return Err(Error::Config("prefix length must be positive".into()));
            }
        }
        Ok(())
    }

    fn prefix_len(&self) -> usize {
        self.rev.prefix_len.unwrap_or(self.lora.rank)
    }
}

/// Serializable description of a built model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: ArchKind,
    pub backbone: BackboneConfig,
    pub tuning: TuningConfig,
    pub seed: u64,
    pub total_params: usize,
    pub trainable_params: usize,
    pub trainable_percent: f64,
    pub clip_method: ClipMethod,
    pub retain_policy: RetainPolicy,
}

#[derive(Clone, Copy)]
enum Inject {
    None,
    Lora { masked: bool },
    ParallelAdapter,
    Prefix,
}

fn gaussian<T: Element>(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(std * rng.gaussian())).collect();
    Tensor::from_vec(shape, data, Category::Weights).expect("length matches shape")
}

fn zeros<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape, Category::Weights)
}

fn add_linear<T: Element>(
    params: &mut ParamStore<T>,
    rng: &mut SeededRng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    zero_weight: bool,
    trainable: bool,
) -> Result<()> {
    let w = if zero_weight {
        zeros(&[d_in, d_out])
    } else {
        gaussian(rng, &[d_in, d_out], (d_in as f64).recip().sqrt())
    };
    params.add(format!("{prefix}.w"), w, trainable)?;
    params.add(format!("{prefix}.b"), zeros(&[d_out]), trainable)
}

/// Bottleneck `up(σ(down x))` with the up-projection zeroed.
fn add_adapter<T: Element>(
    params: &mut ParamStore<T>,
    rng: &mut SeededRng,
    prefix: &str,
    d: usize,
    m: usize,
) -> Result<()> {
    add_linear(params, rng, &format!("{prefix}.down"), d, m, false, true)?;
    add_linear(params, rng, &format!("{prefix}.up"), m, d, true, true)
}

fn add_lora<T: Element>(
    params: &mut ParamStore<T>,
    rng: &mut SeededRng,
    block: usize,
    d: usize,
    h: usize,
    r: usize,
) -> Result<()> {
    for (tag, d_in, d_out) in [("lora1", d, h), ("lora2", h, d)] {
        params.add(
            format!("block{block}.{tag}.a"),
            gaussian(rng, &[d_in, r], (d_in as f64).recip().sqrt()),
            true,
        )?;
        params.add(format!("block{block}.{tag}.b"), zeros(&[r, d_out]), true)?;
    }
    Ok(())
}

fn f_param_prefixes(block: usize) -> [String; 3] {
    [
        format!("block{block}.lora"),
        format!("block{block}.padapter."),
        format!("block{block}.prefix."),
    ]
}

fn add_f_params<T: Element>(
    params: &mut ParamStore<T>,
    rng: &mut SeededRng,
    block: usize,
    bb: &BackboneConfig,
    tuning: &TuningConfig,
) -> Result<()> {
    let (d, h) = (bb.width, bb.ffn_hidden);
    match tuning.rev.f_kind {
        FKind::LoraFfn | FKind::DyloraLike => add_lora(params, rng, block, d, h, tuning.lora.rank),
        FKind::ParallelAdapter => add_adapter(
            params,
            rng,
            &format!("block{block}.padapter"),
            d,
            tuning.adapter.bottleneck,
        ),
        FKind::PrefixLike => {
            let l = tuning.prefix_len();
            params.add(
                format!("block{block}.prefix.k"),
                gaussian(rng, &[d, l], (d as f64).recip().sqrt()),
                true,
            )?;
            params.add(format!("block{block}.prefix.v"), zeros(&[l, d]), true)
        }
    }
}

/// Trainable 2-D parameters as linear layers; the head sees one position.
pub fn layer_shapes_of<T: Element>(params: &ParamStore<T>, seq: usize) -> Vec<LayerShape> {
    params
        .trainable()
        .filter(|p| p.value().dims() == 2)
        .map(|p| LayerShape {
            weight: p.name().to_string(),
            seq: if p.name().starts_with("head.") { 1 } else { seq },
            d_in: p.value().shape()[0],
            p_out: p.value().shape()[1],
        })
        .collect()
}

fn reduce_losses<T: Element>(tape: &Tape<T>, losses: &Var<T>, weights: Option<&[f64]>) -> Result<Var<T>> {
    match weights {
        None => Ok(tape.sum(losses)),
        Some(w) => {
            let w: Vec<T> = w.iter().map(|&v| T::of(v)).collect();
            tape.weighted_sum(losses, &w)
        }
    }
}

/// A built model: parameters plus the forward rules of its kind.
#[derive(Debug)]
pub struct Model<T: Element> {
    kind: ArchKind,
    backbone: BackboneConfig,
    tuning: TuningConfig,
    seed: u64,
    params: ParamStore<T>,
    retain: RetainPolicy,
    clip_method: ClipMethod,
    rank_mask: RefCell<Option<Vec<T>>>,
}

pub fn build_model<T: Element>(
    kind: ArchKind,
    backbone: &BackboneConfig,
    tuning: &TuningConfig,
    seed: u64,
) -> Result<Model<T>> {
    backbone.validate()?;
    tuning.validate(kind, backbone)?;
    let (n, d, h, v, c) = (
        backbone.depth,
        backbone.width,
        backbone.ffn_hidden,
        backbone.vocab,
        backbone.num_classes,
    );
    let mut root = SeededRng::new(seed);
    let mut base = root.fork(1);
    let mut extra = root.fork(2);
    let mut head_rng = root.fork(3);

    let full = kind == ArchKind::Full;
    let biases = full || kind == ArchKind::Bitfit;
    let mut params = ParamStore::new();
    params.add("embed", gaussian(&mut base, &[v, d], 1.0), full)?;
    for i in 0..n {
        let p = |s: &str| format!("block{i}.ffn.{s}");
        params.add(p("w1"), gaussian(&mut base, &[d, h], (d as f64).recip().sqrt()), full)?;
        params.add(p("b1"), gaussian(&mut base, &[h], 0.02), biases)?;
        params.add(p("w2"), gaussian(&mut base, &[h, d], (h as f64).recip().sqrt()), full)?;
        params.add(p("b2"), gaussian(&mut base, &[d], 0.02), biases)?;
    }

    let mut head_width = d;
    match kind {
        ArchKind::Full | ArchKind::Bitfit => {}
        ArchKind::Lora => {
            for i in 0..n {
                add_lora(&mut params, &mut extra, i, d, h, tuning.lora.rank)?;
            }
        }
        ArchKind::Adapter => {
            for i in 0..n {
                add_adapter(
                    &mut params,
                    &mut extra,
                    &format!("block{i}.adapter"),
                    d,
                    tuning.adapter.bottleneck,
                )?;
            }
        }
        ArchKind::Side => {
            let r = d / tuning.side.reduction;
            head_width = r;
            add_linear(&mut params, &mut extra, "side.down", d, r, false, true)?;
            for i in 0..n {
                add_linear(&mut params, &mut extra, &format!("side{i}.tap"), d, r, false, true)?;
                add_linear(&mut params, &mut extra, &format!("side{i}.ffn1"), r, 4 * r, false, true)?;
                add_linear(&mut params, &mut extra, &format!("side{i}.ffn2"), 4 * r, r, false, true)?;
            }
        }
        ArchKind::Reversible => {
            for i in 0..n {
                add_f_params(&mut params, &mut extra, i, backbone, tuning)?;
                add_adapter(
                    &mut params,
                    &mut extra,
                    &format!("block{i}.g"),
                    d,
                    tuning.adapter.bottleneck,
                )?;
            }
        }
    }
    params.add(
        "head.w",
        gaussian(&mut head_rng, &[head_width, c], (head_width as f64).recip().sqrt()),
        true,
    )?;
    params.add("head.b", zeros(&[c]), true)?;

    let rev = kind == ArchKind::Reversible;
    Ok(Model {
        kind,
        backbone: backbone.clone(),
        tuning: *tuning,
        seed,
        params,
        retain: if rev {
            RetainPolicy::ReversibleRecompute
        } else {
            RetainPolicy::StoreAll
        },
        clip_method: if rev {
            ClipMethod::Reweighted
        } else {
            ClipMethod::Bookkeeping
        },
        rank_mask: RefCell::new(None),
    })
}

impl<T: Element> Model<T> {
    pub fn kind(&self) -> ArchKind {
        self.kind
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn tuning(&self) -> &TuningConfig {
        &self.tuning
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn retain_policy(&self) -> RetainPolicy {
        self.retain
    }

    /// Only the reversible kind supports recompute; other kinds ignore it.
    pub fn with_retain(mut self, policy: RetainPolicy) -> Self {
        if self.kind == ArchKind::Reversible {
            self.retain = policy;
        }
        self
    }

    pub fn with_clip_method(mut self, method: ClipMethod) -> Self {
        self.clip_method = method;
        self
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            kind: self.kind,
            backbone: self.backbone.clone(),
            tuning: self.tuning,
            seed: self.seed,
            total_params: self.params.total_numel(),
            trainable_params: self.params.trainable_numel(),
            trainable_percent: self.params.trainable_percent(),
            clip_method: self.clip_method,
            retain_policy: self.retain,
        }
    }

    /// Draw per-step randomness (the rank mask of the dylora-like `F`).
    pub fn prepare_step(&self, rng: &mut SeededRng) {
        if self.kind == ArchKind::Reversible && self.tuning.rev.f_kind == FKind::DyloraLike {
            let r = self.tuning.lora.rank;
            let keep = 1 + rng.below(r);
            let mask = (0..r).map(|j| if j < keep { T::one() } else { T::zero() }).collect();
            *self.rank_mask.borrow_mut() = Some(mask);
        }
    }

    /// Fix the rank mask explicitly (`None` keeps every rank).
    pub fn set_rank_mask(&self, mask: Option<Vec<T>>) {
        *self.rank_mask.borrow_mut() = mask;
    }

    fn p(&self, name: &str) -> Result<&Parameter<T>> {
        self.params.get(name)
    }

    fn lin(&self, tape: &Tape<T>, x: &Var<T>, prefix: &str) -> Result<Var<T>> {
        tape.linear(x, self.p(&format!("{prefix}.w"))?, Some(self.p(&format!("{prefix}.b"))?))
    }

    /// `up(σ(down x))`.
    fn adapter(&self, tape: &Tape<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let h = self.lin(tape, x, &format!("{prefix}.down"))?;
        let h = tape.activation(&h, self.backbone.nonlinearity);
        self.lin(tape, &h, &format!("{prefix}.up"))
    }

    /// `base + s · (x A) B`, optionally masking rank columns.
    fn with_lora(&self, tape: &Tape<T>, base: &Var<T>, prefix: &str, x: &Var<T>, masked: bool) -> Result<Var<T>> {
        let u = tape.linear(x, self.p(&format!("{prefix}.a"))?, None)?;
        let u = match (masked, self.rank_mask.borrow().as_ref()) {
            (true, Some(mask)) => tape.mul_columns(&u, mask)?,
            _ => u,
        };
        let v = tape.linear(&u, self.p(&format!("{prefix}.b"))?, None)?;
        tape.axpby(1.0, base, self.tuning.lora.scale(), &v)
    }

    fn ffn(&self, tape: &Tape<T>, i: usize, x: &Var<T>, inject: Inject) -> Result<Var<T>> {
        let p = |s: &str| format!("block{i}.ffn.{s}");
        let mut pre = tape.linear(x, self.p(&p("w1"))?, Some(self.p(&p("b1"))?))?;
        if let Inject::Lora { masked } = inject {
            pre = self.with_lora(tape, &pre, &format!("block{i}.lora1"), x, masked)?;
        }
        let h = tape.activation(&pre, self.backbone.nonlinearity);
        drop(pre);
        let mut out = tape.linear(&h, self.p(&p("w2"))?, Some(self.p(&p("b2"))?))?;
        match inject {
            Inject::None => {}
            Inject::Lora { masked } => {
                out = self.with_lora(tape, &out, &format!("block{i}.lora2"), &h, masked)?;
            }
            Inject::ParallelAdapter => {
                let a = self.adapter(tape, &format!("block{i}.padapter"), x)?;
                out = tape.add(&out, &a)?;
            }
            Inject::Prefix => {
                let scores = tape.linear(x, self.p(&format!("block{i}.prefix.k"))?, None)?;
                let attn = tape.softmax(&scores);
                let pv = tape.linear(&attn, self.p(&format!("block{i}.prefix.v"))?, None)?;
                out = tape.add(&out, &pv)?;
            }
        }
        Ok(out)
    }

    /// Residual block of the non-reversible kinds.
    fn block(&self, tape: &Tape<T>, i: usize, x: &Var<T>) -> Result<Var<T>> {
        let inject = if self.kind == ArchKind::Lora {
            Inject::Lora { masked: false }
        } else {
            Inject::None
        };
        let mut f = self.ffn(tape, i, x, inject)?;
        if self.kind == ArchKind::Adapter {
            let a = self.adapter(tape, &format!("block{i}.adapter"), &f)?;
            f = tape.add(&f, &a)?;
        }
        tape.add(x, &f)
    }

    fn embed(&self, tape: &Tape<T>, batch: &Batch) -> Result<Var<T>> {
        tape.embedding(batch.tokens(), [batch.len(), batch.seq()], self.p("embed")?)
    }

    fn head(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = tape.mean_pool(x)?;
        self.lin(tape, &pooled, "head")
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq() != self.backbone.seq_len {
            return Err(Error::dim(
                "batch sequence length",
                &[batch.seq()],
                &[self.backbone.seq_len],
            ));
        }
        Ok(())
    }

    fn standard_logits(&self, tape: &Tape<T>, batch: &Batch) -> Result<Var<T>> {
        let mut x = self.embed(tape, batch)?;
        for i in 0..self.backbone.depth {
            x = self.block(tape, i, &x)?;
        }
        self.head(tape, &x)
    }

    /// Backbone without gradient recording; side stream fed by per-block taps.
    fn side_logits(&self, tape: &Tape<T>, batch: &Batch) -> Result<Var<T>> {
        let act = self.backbone.nonlinearity;
        let mut x = ledger::scoped("backbone", || tape.no_grad(|| self.embed(tape, batch)))?;
        let mut y = ledger::scoped("side", || self.lin(tape, &x, "side.down"))?;
        for i in 0..self.backbone.depth {
            x = ledger::scoped("backbone", || tape.no_grad(|| self.block(tape, i, &x)))?;
            y = ledger::scoped("side", || -> Result<Var<T>> {
                let t = self.lin(tape, &x, &format!("side{i}.tap"))?;
                let z = tape.add(&y, &t)?;
                drop(t);
                let h = self.lin(tape, &z, &format!("side{i}.ffn1"))?;
                let h = tape.activation(&h, act);
                let f = self.lin(tape, &h, &format!("side{i}.ffn2"))?;
                tape.add(&z, &f)
            })?;
        }
        drop(x);
        ledger::scoped("side", || self.head(tape, &y))
    }

    /// Logits on `tape` through the path of this kind (store-all for reversible).
    fn logits_on(&self, tape: &Tape<T>, batch: &Batch) -> Result<Var<T>> {
        self.check_batch(batch)?;
        match self.kind {
            ArchKind::Side => self.side_logits(tape, batch),
            ArchKind::Reversible => self.rev_logits_store_all(tape, batch),
            _ => self.standard_logits(tape, batch),
        }
    }

    /// Logits without recording anything.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        if self.kind == ArchKind::Reversible {
            return Ok(self.rev_forward(batch)?.1);
        }
        let tape = Tape::new();
        tape.no_grad(|| self.logits_on(&tape, batch))
            .map(Var::into_tensor)
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let c = self.backbone.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// `Σ_i L_i` evaluated without recording.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let tape = Tape::new();
        let losses = tape.no_grad(|| -> Result<Var<T>> {
            let logits = match self.kind {
                ArchKind::Reversible => Var::constant(self.rev_forward(batch)?.1),
                _ => self.logits_on(&tape, batch)?,
            };
            tape.cross_entropy(&logits, batch.labels())
        })?;
        Ok(losses.value().to_f64_vec().iter().sum())
    }
}

impl<T: Element> PerExampleModel<T> for Model<T> {
    fn loss_backward(
        &self,
        batch: &Batch,
        weights: Option<&[f64]>,
        collector: &mut GradCollector<T>,
    ) -> Result<Vec<f64>> {
        if self.kind == ArchKind::Reversible && self.retain == RetainPolicy::ReversibleRecompute {
            return self.rev_loss_backward(batch, weights, collector);
        }
        ledger::set_phase(Phase::Forward);
        let tape = Tape::new();
        let logits = self.logits_on(&tape, batch)?;
        let losses = tape.cross_entropy(&logits, batch.labels())?;
        drop(logits);
        let out = losses.value().to_f64_vec();
        let total = reduce_losses(&tape, &losses, weights)?;
        drop(losses);
        ledger::set_phase(Phase::Backward);
        tape.backward(&total, collector)?;
        Ok(out)
    }

    fn layer_shapes(&self, seq: usize) -> Vec<LayerShape> {
        layer_shapes_of(&self.params, seq)
    }

    fn clip_method(&self) -> ClipMethod {
        self.clip_method
    }
}

/// Replace the trainable mechanism of every reversible `F`, keeping the
/// frozen FFN weights, `G` and the head.
pub fn swap_subfunction_f<T: Element>(mut model: Model<T>, f_kind: FKind) -> Result<Model<T>> {
    if model.kind != ArchKind::Reversible {
        return Err(Error::Config(format!(
            "swapping F needs a reversible model, got `{}`",
            model.kind
        )));
    }
    let mut tuning = model.tuning;
    tuning.rev.f_kind = f_kind;
    tuning.validate(model.kind, &model.backbone)?;
    let names: Vec<String> = model.params.iter().map(|p| p.name().to_string()).collect();
    for i in 0..model.backbone.depth {
        let prefixes = f_param_prefixes(i);
        for name in &names {
            if prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                model.params.remove(name);
            }
        }
    }
    let mut rng = SeededRng::new(model.seed).fork(0xf00 + f_kind as u64);
    for i in 0..model.backbone.depth {
        add_f_params(&mut model.params, &mut rng, i, &model.backbone, &tuning)?;
    }
    model.tuning = tuning;
    *model.rank_mask.borrow_mut() = None;
    Ok(model)
}
