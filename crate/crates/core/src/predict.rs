//! Analytic footprint model and its regression checks against the ledger.
//!
//! Per linear layer with input width `d`, output width `p`, batch `B` and
//! sequence length `T` (element counts):
//!
//! | term                 | space          |
//! |----------------------|----------------|
//! | forward              | `pd + BTd`     |
//! | backward             | `BT(p+d) + pd` |
//! | ghost norm           | `2BT²`         |
//! | instantiation        | `Bpd`          |
//! | weighted sum         | `0`            |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchKind, Model};
use crate::clip::{choose_strategy, Strategy};
use crate::ledger::Category;
use crate::optim::OptimizerKind;
use crate::tensor::{DType, Element};

/// One linear layer as the footprint model sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub seq: usize,
    pub d: usize,
    pub p: usize,
    pub trainable: bool,
    /// Whether backpropagation passes through this layer.
    pub on_backward_path: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub batch: usize,
    pub seq: usize,
    /// Force one strategy for every trainable layer instead of MixOpt.
    pub strategy: Option<Strategy>,
    pub optimizer: OptimizerKind,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPrediction {
    pub name: String,
    pub forward: u64,
    pub activation_grads: u64,
    pub weight_grads: u64,
    pub strategy: Option<Strategy>,
    pub dp_buffer: u64,
}

/// Element counts per phase and category; bytes via [`Self::bytes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedFootprint {
    pub layers: Vec<LayerPrediction>,
    pub forward: u64,
    /// `BT(p+d)` summed over layers on the backward path.
    pub activation_grads: u64,
    /// `pd` summed over trainable layers.
    pub weight_grads: u64,
    pub backward: u64,
    pub ghost_norm: u64,
    pub instantiation: u64,
    pub weighted_sum: u64,
    pub weights: u64,
    pub stored_activations: u64,
    pub trainable_params: u64,
    pub optimizer_state: u64,
    pub elem_bytes: u64,
}

impl PredictedFootprint {
    pub fn dp_buffers(&self) -> u64 {
        self.ghost_norm + self.instantiation + self.weighted_sum
    }

    /// Predicted bytes for a ledger category; scratch is not modelled.
    pub fn bytes(&self, category: Category) -> u64 {
        let elems = match category {
            Category::Weights => self.weights,
            Category::Activations => self.stored_activations,
            Category::Gradients => self.trainable_params,
            Category::OptimizerState => self.optimizer_state,
            Category::DpBuffers => self.dp_buffers(),
            Category::Scratch => 0,
        };
        elems * self.elem_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        Category::ALL.iter().map(|&c| self.bytes(c)).sum()
    }
}

/// One layer's forward term `pd + BTd`.
pub fn forward_elems(batch: usize, seq: usize, d: usize, p: usize) -> u64 {
    (p * d + batch * seq * d) as u64
}

/// One layer's backward term `BT(p+d) + pd`.
pub fn backward_elems(batch: usize, seq: usize, d: usize, p: usize) -> u64 {
    (batch * seq * (p + d) + p * d) as u64
}

pub fn ghost_norm_elems(batch: usize, seq: usize) -> u64 {
    (2 * batch * seq * seq) as u64
}

pub fn instantiation_elems(batch: usize, d: usize, p: usize) -> u64 {
    (batch * p * d) as u64
}

/// Sum the per-layer formulas. `stored_activations` defaults to `BTd` per
/// layer on the backward path; `extra_params` counts non-matrix parameters
/// as `(total, trainable)`.
pub fn predict_layers(
    layers: &[LayerSpec],
    opts: &PredictOptions,
    extra_params: (u64, u64),
    stored_activations: Option<u64>,
) -> PredictedFootprint {
    let b = opts.batch;
    let mut out = PredictedFootprint {
        layers: Vec::with_capacity(layers.len()),
        forward: 0,
        activation_grads: 0,
        weight_grads: 0,
        backward: 0,
        ghost_norm: 0,
        instantiation: 0,
        weighted_sum: 0,
        weights: extra_params.0,
        stored_activations: 0,
        trainable_params: extra_params.1,
        optimizer_state: 0,
        elem_bytes: opts.dtype.size_bytes() as u64,
    };
    let mut stored = 0;
    for l in layers {
        let pd = (l.p * l.d) as u64;
        let fwd = forward_elems(b, l.seq, l.d, l.p);
        let act_grads = if l.on_backward_path {
            (b * l.seq * (l.p + l.d)) as u64
        } else {
            0
        };
        let weight_grads = if l.trainable { pd } else { 0 };
        let strategy = l
            .trainable
            .then(|| opts.strategy.unwrap_or_else(|| choose_strategy(l.seq, l.p, l.d)));
        let dp_buffer = match strategy {
            Some(Strategy::GhostNorm) => ghost_norm_elems(b, l.seq),
            Some(Strategy::Instantiate) => instantiation_elems(b, l.d, l.p),
            None => 0,
        };
        match strategy {
            Some(Strategy::GhostNorm) => out.ghost_norm += dp_buffer,
            Some(Strategy::Instantiate) => out.instantiation += dp_buffer,
            None => {}
        }
        if l.on_backward_path {
            stored += (b * l.seq * l.d) as u64;
        }
        out.forward += fwd;
        out.activation_grads += act_grads;
        out.weight_grads += weight_grads;
        out.weights += pd;
        if l.trainable {
            out.trainable_params += pd;
        }
        out.layers.push(LayerPrediction {
            name: l.name.clone(),
            forward: fwd,
            activation_grads: act_grads,
            weight_grads,
            strategy,
            dp_buffer,
        });
    }
    out.backward = out.activation_grads + out.weight_grads;
    out.stored_activations = stored_activations.unwrap_or(stored);
    out.optimizer_state = match opts.optimizer {
        OptimizerKind::Sgd => out.trainable_params,
        OptimizerKind::Adam => 2 * out.trainable_params,
    };
    out
}

/// Linear layers of a built model, with the backward path its kind implies.
pub fn layer_specs<T: Element>(model: &Model<T>, seq: usize) -> Vec<LayerSpec> {
    let side = model.kind() == ArchKind::Side;
    model
        .params()
        .iter()
        .filter(|p| p.value().dims() == 2)
        .map(|p| {
            let name = p.name().to_string();
            let head = name.starts_with("head.");
            let on_backward_path = !side || head || name.starts_with("side");
            LayerSpec {
                seq: if head { 1 } else { seq },
                d: p.value().shape()[0],
                p: p.value().shape()[1],
                trainable: p.trainable(),
                on_backward_path,
                name,
            }
        })
        .collect()
}

/// Footprint of one training step of `model`. Reversible models store a
/// constant `2BTd` of activations (two streams) instead of a per-layer sum.
pub fn predict<T: Element>(model: &Model<T>, opts: &PredictOptions) -> PredictedFootprint {
    let specs = layer_specs(model, opts.seq);
    let vectors = model.params().iter().filter(|p| p.value().dims() != 2);
    let (mut total, mut trainable) = (0u64, 0u64);
    for p in vectors {
        total += p.numel() as u64;
        if p.trainable() {
            trainable += p.numel() as u64;
        }
    }
    let stored = (model.kind() == ArchKind::Reversible)
        .then(|| (2 * opts.batch * opts.seq * model.backbone().width) as u64);
    predict_layers(&specs, opts, (total, trainable), stored)
}

/// Least-squares fit of `log y = a + k log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub exponent: f64,
    pub r_squared: f64,
}

pub fn power_fit(xs: &[f64], ys: &[f64]) -> PowerFit {
    assert_eq!(xs.len(), ys.len(), "power_fit needs paired samples");
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let k = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (k * sxy / syy).clamp(0.0, 1.0) };
    PowerFit { exponent: k, r_squared }
}

/// A scaling sweep judged against the formula's degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub name: String,
    pub variable: String,
    pub xs: Vec<f64>,
    pub measured_bytes: Vec<f64>,
    pub expected_exponent: f64,
    pub tolerance: f64,
    pub fit: PowerFit,
    pub pass: bool,
}

impl ScalingCheck {
    /// Pass iff the exponent is within tolerance and, for non-constant
    /// laws, `R² > 0.95`. A flat law has no variance to explain.
    pub fn new(
        name: &str,
        variable: &str,
        xs: Vec<f64>,
        measured_bytes: Vec<f64>,
        expected_exponent: f64,
        tolerance: f64,
    ) -> Self {
        let fit = power_fit(&xs, &measured_bytes);
        let pass = (fit.exponent - expected_exponent).abs() <= tolerance
            && (expected_exponent == 0.0 || fit.r_squared > 0.95);
        ScalingCheck {
            name: name.to_string(),
            variable: variable.to_string(),
            xs,
            measured_bytes,
            expected_exponent,
            tolerance,
            fit,
            pass,
        }
    }
}

/// Measured over predicted bytes for each modelled category.
pub fn category_ratios(
    predicted: &PredictedFootprint,
    measured: &crate::ledger::MemReport,
) -> BTreeMap<String, f64> {
    Category::ALL
        .iter()
        .filter(|&&c| c != Category::Scratch)
        .filter_map(|&c| {
            let p = predicted.bytes(c);
            (p > 0).then(|| (c.as_str().to_string(), measured.peak(c) as f64 / p as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(batch: usize, seq: usize) -> PredictOptions {
        PredictOptions {
            batch,
            seq,
            strategy: None,
            optimizer: OptimizerKind::Sgd,
            dtype: DType::F64,
        }
    }

    fn layer(d: usize, p: usize, seq: usize) -> LayerSpec {
        LayerSpec {
            name: "l".into(),
            seq,
            d,
            p,
            trainable: true,
            on_backward_path: true,
        }
    }

    #[test]
    fn table_examples() {
        assert_eq!(forward_elems(2, 4, 8, 8), 128);
        assert_eq!(ghost_norm_elems(2, 4), 64);
        let f = predict_layers(&[layer(8, 8, 4)], &opts(2, 4), (0, 0), None);
        assert_eq!(f.forward, 128);
        assert_eq!(f.ghost_norm, 64);
        assert_eq!(f.backward, backward_elems(2, 4, 8, 8));
        assert_eq!(f.weighted_sum, 0);
    }

    #[test]
    fn side_path_gradient_term() {
        // d = 64 with reduction 8 gives an r = 8 side layer
        let f = predict_layers(&[layer(8, 8, 4)], &opts(2, 4), (0, 0), None);
        assert_eq!(f.activation_grads, 128);
    }

    #[test]
    fn optimizer_state_multiplier() {
        let mut o = opts(1, 1);
        let sgd = predict_layers(&[layer(3, 5, 1)], &o, (2, 2), None);
        o.optimizer = OptimizerKind::Adam;
        let adam = predict_layers(&[layer(3, 5, 1)], &o, (2, 2), None);
        assert_eq!((sgd.optimizer_state, adam.optimizer_state), (17, 34));
    }

    #[test]
    fn monotone_in_every_dimension() {
        let base = predict_layers(&[layer(8, 8, 4)], &opts(2, 4), (0, 0), None);
        for f in [
            predict_layers(&[layer(9, 8, 4)], &opts(2, 4), (0, 0), None),
            predict_layers(&[layer(8, 9, 4)], &opts(2, 4), (0, 0), None),
            predict_layers(&[layer(8, 8, 5)], &opts(2, 5), (0, 0), None),
            predict_layers(&[layer(8, 8, 4)], &opts(3, 4), (0, 0), None),
        ] {
            assert!(f.forward >= base.forward && f.backward >= base.backward);
            assert!(f.total_bytes() >= base.total_bytes());
        }
    }

    #[test]
    fn power_fit_recovers_exponent() {
        let xs = [8.0, 16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        let fit = power_fit(&xs, &ys);
        assert!((fit.exponent - 2.0).abs() < 1e-12 && fit.r_squared > 0.999_999);
        let flat = power_fit(&xs, &[5.0; 4]);
        assert_eq!(flat.exponent, 0.0);
    }
}
