//! Browser bindings over the core engine. Every export takes plain values
//! and returns a JSON string; errors come back as `{"error": "..."}`.

use dpmem_core::accountant::{calibrate_sigma, epsilon_for};
use dpmem_core::arch::{build_model, ArchKind};
use dpmem_core::clip::{choose_strategy, Strategy};
use dpmem_core::config::{RunConfig, StrategyChoice};
use dpmem_core::predict::{predict, PredictOptions};
use dpmem_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("demo payloads serialize"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[derive(Serialize)]
pub struct Curve {
    pub arch: String,
    pub total_bytes: Vec<u64>,
    pub dp_buffer_bytes: Vec<u64>,
}

#[derive(Serialize)]
pub struct MemoryCurves {
    pub batches: Vec<usize>,
    pub curves: Vec<Curve>,
}

/// Predicted peak bytes of every architecture at each batch size, for the
/// backbone described by `config_text` (`key = value` lines).
pub fn memory_curves_for(config_text: &str, batches: &[usize]) -> Result<MemoryCurves> {
    let cfg = RunConfig::from_text(config_text)?;
    let strategy = match cfg.clip_strategy {
        StrategyChoice::MixOpt => None,
        StrategyChoice::Uniform(s) => Some(s),
    };
    let mut curves = Vec::new();
    for arch in ArchKind::ALL {
        let model = build_model::<f32>(arch, &cfg.backbone, &cfg.tuning, cfg.seed)?;
        let (mut total_bytes, mut dp_buffer_bytes) = (Vec::new(), Vec::new());
        for &batch in batches {
            let p = predict(
                &model,
                &PredictOptions {
                    batch,
                    seq: cfg.backbone.seq_len,
                    strategy,
                    optimizer: cfg.optimizer,
                    dtype: cfg.dtype,
                },
            );
            total_bytes.push(p.total_bytes());
            dp_buffer_bytes.push(p.dp_buffers() * p.elem_bytes);
        }
        curves.push(Curve {
            arch: arch.to_string(),
            total_bytes,
            dp_buffer_bytes,
        });
    }
    Ok(MemoryCurves {
        batches: batches.to_vec(),
        curves,
    })
}

#[wasm_bindgen]
pub fn memory_curves(config_text: &str, batches: Vec<u32>) -> String {
    let batches: Vec<usize> = batches.into_iter().map(|b| b as usize).collect();
    respond(memory_curves_for(config_text, &batches))
}

#[derive(Serialize)]
pub struct Calibration {
    pub sigma: f64,
    pub epsilon: f64,
    pub order: Option<f64>,
    /// `(σ, ε)` samples around the calibrated point.
    pub curve: Vec<(f64, f64)>,
}

pub fn calibrate_for(epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<Calibration> {
    let sigma = calibrate_sigma(epsilon, delta, q, steps)?;
    let at = epsilon_for(sigma, delta, q, steps)?;
    let curve = (0..=40)
        .map(|i| {
            let s = 0.3 * (10f64).powf(i as f64 / 40.0 * 1.5);
            epsilon_for(s, delta, q, steps).map(|r| (s, r.epsilon))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration {
        sigma,
        epsilon: at.epsilon,
        order: at.order,
        curve,
    })
}

/// Noise multiplier for a privacy target, plus the ε-vs-σ curve.
#[wasm_bindgen]
pub fn calibrate(epsilon: f64, delta: f64, sample_rate: f64, steps: u32) -> String {
    respond(calibrate_for(epsilon, delta, sample_rate, steps as u64))
}

/// `ghost[i][j]` is true when the ghost norm is chosen at `T = seqs[i]` for
/// a square layer with `p = d = dims[j]`.
#[derive(Serialize)]
pub struct StrategyMap {
    pub seqs: Vec<usize>,
    pub dims: Vec<usize>,
    pub ghost: Vec<Vec<bool>>,
}

pub fn strategy_map_for(max_seq: usize, max_dim: usize, cells: usize) -> StrategyMap {
    let cells = cells.clamp(2, 200);
    let axis = |max: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..cells)
            .map(|i| (max.max(1) as f64).powf(i as f64 / (cells - 1) as f64).round() as usize)
            .collect();
        v.dedup();
        v
    };
    let (seqs, dims) = (axis(max_seq), axis(max_dim));
    let ghost = seqs
        .iter()
        .map(|&t| dims.iter().map(|&d| choose_strategy(t, d, d) == Strategy::GhostNorm).collect())
        .collect();
    StrategyMap { seqs, dims, ghost }
}

#[wasm_bindgen]
pub fn strategy_map(max_seq: u32, max_dim: u32, cells: u32) -> String {
    serde_json::to_string(&strategy_map_for(max_seq as usize, max_dim as usize, cells as usize))
        .expect("map serializes")
}

#[wasm_bindgen]
pub fn default_config() -> String {
    let c = RunConfig::default();
    ["depth", "width", "ffn_hidden", "seq_len", "vocab", "num_classes", "lora_rank", "adapter_bottleneck", "side_reduction", "optimizer", "dtype", "clip_strategy"]
        .iter()
        .map(|k| format!("{k} = {}\n", c.get(k).expect("known key")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_grow_with_batch_and_frozen_backbones_sit_below_full() {
        let text = "depth = 2\nwidth = 32\nffn_hidden = 64\nseq_len = 16\nvocab = 50\nlora_rank = 4\nadapter_bottleneck = 4\nside_reduction = 4\n";
        let m = memory_curves_for(text, &[1, 8, 32]).unwrap();
        assert_eq!(m.curves.len(), ArchKind::ALL.len());
        for c in &m.curves {
            assert!(c.total_bytes.windows(2).all(|w| w[0] < w[1]), "{}", c.arch);
        }
        let last = |a: &str| m.curves.iter().find(|c| c.arch == a).unwrap().total_bytes[2];
        for a in ["bitfit", "side", "reversible"] {
            assert!(last(a) < last("full"), "{a}");
        }
    }

    #[test]
    fn bad_config_becomes_an_error_payload() {
        let s = memory_curves("width = banana\n", vec![1]);
        assert!(s.contains("\"error\""), "{s}");
    }

    #[test]
    fn calibration_hits_the_target() {
        let c = calibrate_for(8.0, 1e-5, 0.01, 1000).unwrap();
        assert!(c.epsilon <= 8.0 && c.epsilon >= 0.99 * 8.0);
        assert!(c.curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn map_matches_the_selection_rule() {
        let m = strategy_map_for(512, 4096, 30);
        for (i, &t) in m.seqs.iter().enumerate() {
            for (j, &d) in m.dims.iter().enumerate() {
                assert_eq!(m.ghost[i][j], 2 * t * t <= d * d);
            }
        }
    }

    #[test]
    fn default_config_parses() {
        assert_eq!(RunConfig::from_text(&default_config()).unwrap(), RunConfig::default());
    }
}
