#![allow(dead_code)]

use std::collections::BTreeMap;

use dpmem_core::arch::{BackboneConfig, Mlp, Model, TuningConfig};
use dpmem_core::autodiff::Nonlinearity;
use dpmem_core::clip::{summed_grads, PerExampleModel};
use dpmem_core::data::Batch;
use dpmem_core::params::ParamStore;
use dpmem_core::rng::SeededRng;
use dpmem_core::tensor::Tensor;

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        width: 8,
        ffn_hidden: 16,
        vocab: 11,
        seq_len: 4,
        num_classes: 3,
        nonlinearity: Nonlinearity::Gelu,
    }
}

pub fn tiny_tuning() -> TuningConfig {
    let mut t = TuningConfig::default();
    t.lora.rank = 2;
    t.adapter.bottleneck = 3;
    t.side.reduction = 2;
    t
}

pub fn random_batch(b: usize, seq: usize, vocab: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = SeededRng::new(seed);
    let tokens = (0..b * seq).map(|_| rng.below(vocab)).collect();
    let labels = (0..b).map(|_| rng.below(classes)).collect();
    Batch::new(tokens, labels, seq).unwrap()
}

pub fn perturb_trainable(params: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = SeededRng::new(seed);
    for p in params.iter_mut().filter(|p| p.trainable()) {
        for v in p.value_mut().data_mut() {
            *v += std * rng.gaussian();
        }
    }
}

pub trait Checkable: PerExampleModel<f64> {
    fn store(&self) -> &ParamStore<f64>;
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
    fn total_loss(&self, batch: &Batch) -> f64;
}

impl Checkable for Model<f64> {
    fn store(&self) -> &ParamStore<f64> {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        self.params_mut()
    }
    fn total_loss(&self, batch: &Batch) -> f64 {
        self.loss(batch).unwrap()
    }
}

impl Checkable for Mlp<f64> {
    fn store(&self) -> &ParamStore<f64> {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        self.params_mut()
    }
    fn total_loss(&self, batch: &Batch) -> f64 {
        self.loss(batch).unwrap()
    }
}

/// Worst relative error of analytic vs central-difference gradients over up
/// to `per_param` coordinates of every trainable parameter.
pub fn worst_gradcheck<M: Checkable>(model: &mut M, batch: &Batch, per_param: usize) -> (f64, String) {
    let (grads, _) = summed_grads(model, batch).unwrap();
    let names: Vec<String> = model.store().trainable_names();
    assert_eq!(
        grads.keys().cloned().collect::<Vec<_>>(),
        names,
        "every trainable parameter should get a gradient, and nothing else"
    );
    let h = 1e-6;
    let mut worst = (0.0, String::new());
    let mut rng = SeededRng::new(99);
    for name in names {
        let n = model.store().get(&name).unwrap().numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        for j in coords {
            let orig = model.store().get(&name).unwrap().value().data()[j];
            model.store_mut().get_mut(&name).unwrap().value_mut().data_mut()[j] = orig + h;
            let up = model.total_loss(batch);
            model.store_mut().get_mut(&name).unwrap().value_mut().data_mut()[j] = orig - h;
            let down = model.total_loss(batch);
            model.store_mut().get_mut(&name).unwrap().value_mut().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[&name].data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{name}[{j}]: analytic {analytic} numeric {numeric}"));
            }
        }
    }
    worst
}

pub fn max_rel_diff(a: &BTreeMap<String, Tensor<f64>>, b: &BTreeMap<String, Tensor<f64>>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .map(|(k, x)| {
            let y = &b[k];
            let num: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let den = y.sq_norm().sqrt().max(1e-12);
            num / den
        })
        .fold(0.0, f64::max)
}

/// Per-example squared norms and the clipped sum from one backward per example.
pub fn naive_clipped<M: PerExampleModel<f64>>(
    model: &M,
    batch: &Batch,
    clip_bound: f64,
) -> (Vec<f64>, BTreeMap<String, Tensor<f64>>) {
    let per = dpmem_core::clip::naive_per_sample_grads(model, batch).unwrap();
    let sq: Vec<f64> = per.iter().map(|g| g.values().map(|t| t.sq_norm()).sum()).collect();
    let mut sum: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for (g, &s) in per.iter().zip(&sq) {
        let c = if s == 0.0 { 1.0 } else { (clip_bound / s.sqrt()).min(1.0) };
        for (name, t) in g {
            let scaled = t.map(dpmem_core::ledger::Category::Gradients, |v| v * c);
            match sum.get_mut(name) {
                Some(acc) => acc.axpy_inplace(1.0, &scaled).unwrap(),
                None => {
                    sum.insert(name.clone(), scaled);
                }
            }
        }
    }
    (sq, sum)
}

pub fn max_rel_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12))
        .fold(0.0, f64::max)
}
