//! Ledger sweeps fitted against the footprint formulas.

use serde::{Deserialize, Serialize};

use crate::arch::{build_model, ArchKind, BackboneConfig, Mlp, Model, TuningConfig};
use crate::autodiff::{Nonlinearity, RetainPolicy};
use crate::clip::{bk_clip_step, summed_grads, ClipPlan, PerExampleModel, Strategy};
use crate::data::Batch;
use crate::error::Result;
use crate::ledger::{Category, MemReport, Session};
use crate::predict::ScalingCheck;
use crate::rng::SeededRng;

fn batch(b: usize, seq: usize, vocab: usize, seed: u64) -> Result<Batch> {
    let mut rng = SeededRng::new(seed);
    let tokens = (0..b * seq).map(|_| rng.below(vocab)).collect();
    let labels = (0..b).map(|_| rng.below(2)).collect();
    Batch::new(tokens, labels, seq)
}

fn measured(f: impl FnOnce() -> Result<()>) -> Result<MemReport> {
    let session = Session::start();
    f()?;
    session.finish()
}

fn clip_buffer_peak(b: usize, seq: usize, d: usize, strategy: Strategy) -> Result<u64> {
    let m: Mlp<f64> = Mlp::new(8, &[d, d], seq, 2, Nonlinearity::Tanh, 0)?;
    let data = batch(b, seq, 8, 1)?;
    let plan = ClipPlan::uniform(&m.layer_shapes(seq), strategy, 1.0);
    let r = measured(|| bk_clip_step(&m, &data, &plan).map(drop))?;
    Ok(r.peak(Category::DpBuffers))
}

fn sweep_backbone(depth: usize, width: usize) -> BackboneConfig {
    BackboneConfig {
        depth,
        width,
        ffn_hidden: 4 * width,
        vocab: 32,
        seq_len: 8,
        num_classes: 2,
        nonlinearity: Nonlinearity::Gelu,
    }
}

fn activation_peak(model: &Model<f64>, scope: Option<&str>) -> Result<u64> {
    let bb = model.backbone();
    let data = batch(4, bb.seq_len, bb.vocab, 2)?;
    let r = measured(|| summed_grads(model, &data).map(drop))?;
    Ok(match scope {
        Some(s) => r.scope_activations(s),
        None => r.peak(Category::Activations),
    })
}

/// Ghost-norm buffer bytes against `T` (degree 2).
pub fn ghost_buffer_vs_seq(ts: &[usize]) -> Result<ScalingCheck> {
    let ys = ts
        .iter()
        .map(|&t| clip_buffer_peak(4, t, 16, Strategy::GhostNorm).map(|v| v as f64))
        .collect::<Result<_>>()?;
    Ok(ScalingCheck::new("ghost-norm buffer", "T", to_f64(ts), ys, 2.0, 0.15))
}

/// Ghost-norm buffer bytes against `B` (degree 1).
pub fn ghost_buffer_vs_batch(bs: &[usize]) -> Result<ScalingCheck> {
    let ys = bs
        .iter()
        .map(|&b| clip_buffer_peak(b, 8, 16, Strategy::GhostNorm).map(|v| v as f64))
        .collect::<Result<_>>()?;
    Ok(ScalingCheck::new("ghost-norm buffer", "B", to_f64(bs), ys, 1.0, 0.15))
}

/// Instantiated per-example gradient bytes against `d = p` (degree 2).
pub fn instantiate_buffer_vs_width(ds: &[usize]) -> Result<ScalingCheck> {
    let ys = ds
        .iter()
        .map(|&d| clip_buffer_peak(4, 4, d, Strategy::Instantiate).map(|v| v as f64))
        .collect::<Result<_>>()?;
    Ok(ScalingCheck::new("instantiated buffer", "d", to_f64(ds), ys, 2.0, 0.15))
}

/// Activation bytes of a fully stored backward against depth (degree 1).
pub fn store_all_vs_depth(depths: &[usize]) -> Result<ScalingCheck> {
    let ys = depths
        .iter()
        .map(|&n| {
            let m = build_model::<f64>(ArchKind::Full, &sweep_backbone(n, 16), &TuningConfig::default(), 0)?;
            activation_peak(&m, None).map(|v| v as f64)
        })
        .collect::<Result<_>>()?;
    Ok(ScalingCheck::new("store-all activations", "N", to_f64(depths), ys, 1.0, 0.15))
}

/// Activation bytes of the reconstructing backward against depth (degree 0).
pub fn reversible_vs_depth(depths: &[usize]) -> Result<ScalingCheck> {
    let mut tuning = TuningConfig::default();
    tuning.lora.rank = 4;
    tuning.adapter.bottleneck = 4;
    let ys = depths
        .iter()
        .map(|&n| {
            let m = build_model::<f64>(ArchKind::Reversible, &sweep_backbone(n, 16), &tuning, 0)?
                .with_retain(RetainPolicy::ReversibleRecompute);
            activation_peak(&m, None).map(|v| v as f64)
        })
        .collect::<Result<_>>()?;
    Ok(ScalingCheck::new("reversible activations", "N", to_f64(depths), ys, 0.0, 0.15))
}

/// Side-network activation bytes at reduction `k` relative to `k = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideShare {
    pub reductions: Vec<usize>,
    pub side_bytes: Vec<u64>,
    /// Measured share next to the model share `k₀/k`.
    pub shares: Vec<(f64, f64)>,
    pub worst_relative_gap: f64,
    pub pass: bool,
}

pub fn side_share(width: usize, reductions: &[usize]) -> Result<SideShare> {
    let bytes = reductions
        .iter()
        .map(|&k| {
            let mut t = TuningConfig::default();
            t.side.reduction = k;
            let m = build_model::<f64>(ArchKind::Side, &sweep_backbone(2, width), &t, 0)?;
            activation_peak(&m, Some("side"))
        })
        .collect::<Result<Vec<_>>>()?;
    let (k0, b0) = (reductions[0] as f64, bytes[0] as f64);
    let shares: Vec<(f64, f64)> = reductions
        .iter()
        .zip(&bytes)
        .map(|(&k, &b)| (b as f64 / b0, k0 / k as f64))
        .collect();
    let worst = shares
        .iter()
        .map(|(m, p)| (m - p).abs() / p)
        .fold(0.0, f64::max);
    Ok(SideShare {
        reductions: reductions.to_vec(),
        side_bytes: bytes,
        shares,
        worst_relative_gap: worst,
        pass: worst <= 0.2,
    })
}

fn to_f64(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// The default conformance grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub scaling: Vec<ScalingCheck>,
    pub side: SideShare,
}

impl ConformanceReport {
    pub fn pass(&self) -> bool {
        self.side.pass && self.scaling.iter().all(|c| c.pass)
    }
}

pub fn default_conformance() -> Result<ConformanceReport> {
    let grid = [8, 16, 32, 64];
    let depths = [2, 4, 8, 16];
    Ok(ConformanceReport {
        scaling: vec![
            ghost_buffer_vs_seq(&grid)?,
            ghost_buffer_vs_batch(&[2, 4, 8, 16])?,
            instantiate_buffer_vs_width(&grid)?,
            store_all_vs_depth(&depths)?,
            reversible_vs_depth(&depths)?,
        ],
        side: side_share(64, &[1, 2, 4, 8])?,
    })
}
