//! Gaussian noise on clipped sums and the SGD / Adam updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::Category;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

/// `(G + σ·C·z) / B` with `z` standard Gaussian per element.
pub fn dp_noise_and_average<T: Element>(
    sum: &Tensor<T>,
    clip_bound: f64,
    sigma: f64,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Config(format!("noise multiplier must be >= 0, got {sigma}")));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let b = T::of(batch as f64);
    if sigma == 0.0 {
        return Ok(sum.map(Category::Gradients, |v| v / b));
    }
    if !clip_bound.is_finite() {
        return Err(Error::Config(
            "noise requires a finite clip bound".into(),
        ));
    }
    let std = sigma * clip_bound;
    let data = sum
        .data()
        .iter()
        .map(|&v| T::of(v.as_f64() + std * rng.gaussian()) / b)
        .collect();
    Tensor::from_vec(sum.shape(), data, Category::Gradients)
}

/// Noise every gradient, drawing in lexicographic name order.
pub fn noise_and_average_all<T: Element>(
    sums: BTreeMap<String, Tensor<T>>,
    clip_bound: f64,
    sigma: f64,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut out = BTreeMap::new();
    for (name, g) in sums {
        let noisy = dp_noise_and_average(&g, clip_bound, sigma, batch, rng)?;
        drop(g);
        out.insert(name, noisy);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "dp-sgd" => Ok(OptimizerKind::Sgd),
            "adam" | "dp-adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd, adam)"))),
        }
    }
}

/// Step size over the run: fixed, or decayed linearly to zero at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    Linear,
}

impl LrSchedule {
    pub fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => 1.0 - step as f64 / steps.max(1) as f64,
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" => Ok(LrSchedule::Linear),
            _ => Err(Error::Config(format!("unknown lr schedule `{s}` (constant, linear)"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with Adam moments for trainable parameters only.
#[derive(Debug)]
pub struct Optimizer<T: Element> {
    config: OptimizerConfig,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn state_numel(&self) -> usize {
        self.m.values().chain(self.v.values()).map(|t| t.len()).sum()
    }

    /// Apply the stored gradients of all trainable parameters, then clear them.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let lr = c.learning_rate;
        for p in params.iter_mut().filter(|p| p.trainable()) {
            let Some(g) = p.grad().map(|g| g.to_f64_vec()) else {
                continue;
            };
            let name = p.name().to_string();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value_mut().data_mut().iter_mut().zip(&g) {
                        *w = T::of(w.as_f64() - lr * g);
                    }
                }
                OptimizerKind::Adam => {
                    let shape = p.value().shape().to_vec();
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(&shape, Category::OptimizerState));
                    let v = self
                        .v
                        .entry(name)
                        .or_insert_with(|| Tensor::zeros(&shape, Category::OptimizerState));
                    let bc1 = 1.0 - c.beta1.powi(self.step as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.step as i32);
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (i, w) in p.value_mut().data_mut().iter_mut().enumerate() {
                        let mi = c.beta1 * md[i].as_f64() + (1.0 - c.beta1) * g[i];
                        let vi = c.beta2 * vd[i].as_f64() + (1.0 - c.beta2) * g[i] * g[i];
                        md[i] = T::of(mi);
                        vd[i] = T::of(vi);
                        let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                        *w = T::of(w.as_f64() - update);
                    }
                }
            }
            p.clear_grad();
        }
        Ok(())
    }
}
