//! Per-example gradient norms and clipped gradient sums.
//!
//! A trainable linear layer `h = x W` sees, for example `i`, an input block
//! `x_i: [T, d]` and an output gradient `g_i: [T, p]`. Its per-example weight
//! gradient is `x_iᵀ g_i` and
//!
//! ```text
//! ‖x_iᵀ g_i‖²_F = Σ_{s,t} (x_i x_iᵀ)[s,t] · (g_i g_iᵀ)[s,t]
//! ```
//!
//! so the norm can be read off two `T×T` Gram matrices (ghost norm, `2BT²`
//! scratch for the batch) instead of instantiating the `d×p` gradient
//! (`Bpd` scratch). [`choose_strategy`] picks the cheaper one per layer.
//!
//! With all per-example norms known, the clipped sum
//! `Σ_i c_i x_iᵀ g_i = xᵀ diag(c) g` is one contraction over the captured
//! tensors, so no second backward pass is needed ([`bk_clip_step`]). For
//! models that cannot afford to keep captures alive (the reversible network
//! recomputes its activations) [`reweighted_clip_step`] instead folds norms
//! on the fly and backpropagates `Σ_i c_i L_i` once more.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::GradCollector;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ledger::{self, Category, Phase};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Input side of a captured layer.
#[derive(Debug, Clone)]
pub enum CaptureInput<T: Element> {
    /// Dense activations `[B, T, d]` (or `[B, d]`).
    Dense(Rc<Tensor<T>>),
    /// Token ids of an embedding lookup (an implicit one-hot input).
    Tokens { ids: Rc<[usize]>, vocab: usize },
}

/// Everything needed to recover one layer's per-example gradients.
#[derive(Debug, Clone)]
pub struct LayerCapture<T: Element> {
    /// Trainable weight name, if the weight is trainable.
    pub weight: Option<String>,
    /// Trainable bias name, if the bias is trainable.
    pub bias: Option<String>,
    /// Present whenever `weight` is.
    pub input: Option<CaptureInput<T>>,
    /// Gradient w.r.t. the layer output, `[B, T, p]`.
    pub grad_out: Rc<Tensor<T>>,
    pub batch: usize,
    pub seq: usize,
}

impl<T: Element> LayerCapture<T> {
    pub fn name(&self) -> &str {
        self.weight
            .as_deref()
            .or(self.bias.as_deref())
            .unwrap_or("<anonymous>")
    }

    pub fn out_dim(&self) -> usize {
        *self.grad_out.shape().last().unwrap_or(&1)
    }

    pub fn in_dim(&self) -> usize {
        match &self.input {
            Some(CaptureInput::Dense(x)) => *x.shape().last().unwrap_or(&1),
            Some(CaptureInput::Tokens { vocab, .. }) => *vocab,
            None => 0,
        }
    }

    fn check(&self) -> Result<()> {
        let rows = self.batch * self.seq;
        if self.grad_out.len() != rows * self.out_dim() {
            return Err(Error::dim(
                "layer capture grad",
                self.grad_out.shape(),
                &[self.batch, self.seq, self.out_dim()],
            ));
        }
        match &self.input {
            Some(CaptureInput::Dense(x)) if x.len() != rows * self.in_dim() => Err(Error::dim(
                "layer capture input",
                x.shape(),
                self.grad_out.shape(),
            )),
            Some(CaptureInput::Tokens { ids, .. }) if ids.len() != rows => {
                Err(Error::dim("layer capture tokens", &[ids.len()], self.grad_out.shape()))
            }
            None if self.weight.is_some() => Err(Error::State(format!(
                "layer `{}` has a trainable weight but no captured input",
                self.name()
            ))),
            _ => Ok(()),
        }
    }
}

/// How a layer's per-example norm is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    GhostNorm,
    Instantiate,
}

/// Ghost norm iff `2T² ≤ p·d` (ties go to the ghost norm).
pub fn choose_strategy(seq: usize, p: usize, d: usize) -> Strategy {
    if 2 * (seq as u128) * (seq as u128) <= (p as u128) * (d as u128) {
        Strategy::GhostNorm
    } else {
        Strategy::Instantiate
    }
}

/// Shape of a trainable layer as seen by the planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub weight: String,
    pub seq: usize,
    pub d_in: usize,
    pub p_out: usize,
}

/// Per-layer strategy choice plus the clip bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub per_layer: BTreeMap<String, Strategy>,
    pub clip_bound: f64,
}

impl ClipPlan {
    /// Layer-wise cheapest strategy.
    pub fn mixopt(layers: &[LayerShape], clip_bound: f64) -> Self {
        ClipPlan {
            per_layer: layers
                .iter()
                .map(|l| (l.weight.clone(), choose_strategy(l.seq, l.p_out, l.d_in)))
                .collect(),
            clip_bound,
        }
    }

    /// The same strategy everywhere.
    pub fn uniform(layers: &[LayerShape], strategy: Strategy, clip_bound: f64) -> Self {
        ClipPlan {
            per_layer: layers.iter().map(|l| (l.weight.clone(), strategy)).collect(),
            clip_bound,
        }
    }

    pub fn strategy_for<T: Element>(&self, cap: &LayerCapture<T>) -> Strategy {
        match cap.weight.as_ref().and_then(|w| self.per_layer.get(w)) {
            Some(s) => *s,
            None => choose_strategy(cap.seq, cap.out_dim(), cap.in_dim().max(1)),
        }
    }
}

/// Per-example squared gradient norms summed over all trainable layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSampleNorms {
    pub sq_norms: Vec<f64>,
}

impl PerSampleNorms {
    pub fn zeros(batch: usize) -> Self {
        PerSampleNorms {
            sq_norms: vec![0.0; batch],
        }
    }

    pub fn add_layer(&mut self, layer: &[f64]) -> Result<()> {
        if layer.len() != self.sq_norms.len() {
            return Err(Error::dim("per-example norms", &[self.sq_norms.len()], &[layer.len()]));
        }
        for (acc, v) in self.sq_norms.iter_mut().zip(layer) {
            *acc += v;
        }
        Ok(())
    }
}

/// `min(1, C / ‖g_i‖)` per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFactors {
    pub factors: Vec<f64>,
}

thread_local! {
    static GHOST_SIGN_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Mutation hook for verification: flips the sign of the output-gradient
/// Gram matrix inside the ghost-norm path on this thread.
#[doc(hidden)]
pub fn inject_ghost_sign_fault(on: bool) {
    GHOST_SIGN_FAULT.with(|f| f.set(on));
}

fn fault_active() -> bool {
    GHOST_SIGN_FAULT.with(|f| f.get())
}

/// Per-example squared norm of one layer's gradient (weight and bias).
pub fn ghost_norm_layer<T: Element>(cap: &LayerCapture<T>, strategy: Strategy) -> Result<Vec<f64>> {
    cap.check()?;
    let (b, t, p) = (cap.batch, cap.seq, cap.out_dim());
    let g = cap.grad_out.data();
    let mut out = vec![0.0; b];

    if cap.weight.is_some() {
        match (strategy, cap.input.as_ref().expect("checked")) {
            (Strategy::GhostNorm, input) => {
                let mut gram_x = Tensor::<T>::zeros(&[b, t, t], Category::DpBuffers);
                let mut gram_g = Tensor::<T>::zeros(&[b, t, t], Category::DpBuffers);
                for i in 0..b {
                    let gi = MatRef::new(&g[i * t * p..], t, p);
                    gemm(T::one(), gi, gi.t(), T::zero(), &mut gram_g.data_mut()[i * t * t..]);
                    let gx = &mut gram_x.data_mut()[i * t * t..(i + 1) * t * t];
                    match input {
                        CaptureInput::Dense(x) => {
                            let d = cap.in_dim();
                            let xi = MatRef::new(&x.data()[i * t * d..], t, d);
                            gemm(T::one(), xi, xi.t(), T::zero(), gx);
                        }
                        CaptureInput::Tokens { ids, .. } => {
                            let toks = &ids[i * t..(i + 1) * t];
                            for s in 0..t {
                                for u in 0..t {
                                    gx[s * t + u] = if toks[s] == toks[u] { T::one() } else { T::zero() };
                                }
                            }
                        }
                    }
                }
                let sign = if fault_active() { -1.0 } else { 1.0 };
                for (i, acc) in out.iter_mut().enumerate() {
                    let gx = &gram_x.data()[i * t * t..(i + 1) * t * t];
                    let gg = &gram_g.data()[i * t * t..(i + 1) * t * t];
                    *acc += sign
                        * gx
                            .iter()
                            .zip(gg)
                            .map(|(a, c)| a.as_f64() * c.as_f64())
                            .sum::<f64>();
                }
            }
            (Strategy::Instantiate, CaptureInput::Dense(x)) => {
                let d = cap.in_dim();
                let mut per = Tensor::<T>::zeros(&[b, d, p], Category::DpBuffers);
                for i in 0..b {
                    gemm(
                        T::one(),
                        MatRef::new(&x.data()[i * t * d..], t, d).t(),
                        MatRef::new(&g[i * t * p..], t, p),
                        T::zero(),
                        &mut per.data_mut()[i * d * p..],
                    );
                }
                for (i, acc) in out.iter_mut().enumerate() {
                    *acc += per.data()[i * d * p..(i + 1) * d * p]
                        .iter()
                        .map(|v| v.as_f64().powi(2))
                        .sum::<f64>();
                }
            }
            (Strategy::Instantiate, CaptureInput::Tokens { ids, vocab }) => {
                let mut per = Tensor::<T>::zeros(&[b, *vocab, p], Category::DpBuffers);
                let buf = per.data_mut();
                for i in 0..b {
                    for s in 0..t {
                        let tok = ids[i * t + s];
                        let row = &g[(i * t + s) * p..(i * t + s + 1) * p];
                        let dst = &mut buf[(i * vocab + tok) * p..(i * vocab + tok + 1) * p];
                        for (a, &v) in dst.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                }
                for (i, acc) in out.iter_mut().enumerate() {
                    *acc += per.data()[i * vocab * p..(i + 1) * vocab * p]
                        .iter()
                        .map(|v| v.as_f64().powi(2))
                        .sum::<f64>();
                }
            }
        }
    }

    if cap.bias.is_some() {
        let per = per_example_bias_grads(cap);
        for (i, acc) in out.iter_mut().enumerate() {
            *acc += per.data()[i * p..(i + 1) * p]
                .iter()
                .map(|v| v.as_f64().powi(2))
                .sum::<f64>();
        }
    }
    Ok(out)
}

/// `Σ_t g[i, t, :]` for every example, as a `[B, p]` DP buffer.
fn per_example_bias_grads<T: Element>(cap: &LayerCapture<T>) -> Tensor<T> {
    let (b, t, p) = (cap.batch, cap.seq, cap.out_dim());
    let g = cap.grad_out.data();
    let mut per = Tensor::<T>::zeros(&[b, p], Category::DpBuffers);
    let buf = per.data_mut();
    for i in 0..b {
        for s in 0..t {
            for (a, &v) in buf[i * p..(i + 1) * p]
                .iter_mut()
                .zip(&g[(i * t + s) * p..(i * t + s + 1) * p])
            {
                *a = *a + v;
            }
        }
    }
    per
}

pub fn clip_factors(norms: &PerSampleNorms, clip_bound: f64) -> Result<ClipFactors> {
    if clip_bound.is_nan() || clip_bound <= 0.0 {
        return Err(Error::Config(format!(
            "clip bound must be positive, got {clip_bound}"
        )));
    }
    let factors = norms
        .sq_norms
        .iter()
        .map(|&sq| {
            let n = sq.max(0.0).sqrt();
            if n == 0.0 || clip_bound.is_infinite() {
                1.0
            } else {
                (clip_bound / n).min(1.0)
            }
        })
        .collect();
    Ok(ClipFactors { factors })
}

/// `Σ_i c_i · (per-example gradient of this layer)`, one entry per trainable
/// tensor of the layer, without materializing per-example gradients.
pub fn clipped_grad_sum_layer<T: Element>(
    cap: &LayerCapture<T>,
    factors: &ClipFactors,
) -> Result<Vec<(String, Tensor<T>)>> {
    cap.check()?;
    let (b, t, p) = (cap.batch, cap.seq, cap.out_dim());
    if factors.factors.len() != b {
        return Err(Error::dim("clip factors", &[factors.factors.len()], &[b]));
    }
    let g = cap.grad_out.data();
    let mut out = Vec::new();
    if let Some(name) = &cap.weight {
        match cap.input.as_ref().expect("checked") {
            CaptureInput::Dense(x) => {
                let d = cap.in_dim();
                let mut w = Tensor::<T>::zeros(&[d, p], Category::Gradients);
                for (i, &c) in factors.factors.iter().enumerate() {
                    gemm(
                        T::of(c),
                        MatRef::new(&x.data()[i * t * d..], t, d).t(),
                        MatRef::new(&g[i * t * p..], t, p),
                        T::one(),
                        w.data_mut(),
                    );
                }
                out.push((name.clone(), w));
            }
            CaptureInput::Tokens { ids, vocab } => {
                let mut w = Tensor::<T>::zeros(&[*vocab, p], Category::Gradients);
                let buf = w.data_mut();
                for (i, &c) in factors.factors.iter().enumerate() {
                    let c = T::of(c);
                    for s in 0..t {
                        let tok = ids[i * t + s];
                        let row = &g[(i * t + s) * p..(i * t + s + 1) * p];
                        for (a, &v) in buf[tok * p..(tok + 1) * p].iter_mut().zip(row) {
                            *a = *a + c * v;
                        }
                    }
                }
                out.push((name.clone(), w));
            }
        }
    }
    if let Some(name) = &cap.bias {
        let mut bias = Tensor::<T>::zeros(&[p], Category::Gradients);
        let buf = bias.data_mut();
        for (i, &c) in factors.factors.iter().enumerate() {
            let c = T::of(c);
            for s in 0..t {
                for (a, &v) in buf.iter_mut().zip(&g[(i * t + s) * p..(i * t + s + 1) * p]) {
                    *a = *a + c * v;
                }
            }
        }
        out.push((name.clone(), bias));
    }
    Ok(out)
}

/// Which clipping flow a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMethod {
    /// Capture once, norms then algebraic clipped sum.
    Bookkeeping,
    /// Norms folded during backward, then a second backward of `Σ c_i L_i`.
    Reweighted,
}

/// A model whose loss decomposes over examples.
pub trait PerExampleModel<T: Element> {
    /// Forward, then backward of `Σ_i w_i L_i` (`w_i = 1` when `weights` is
    /// `None`) into `collector`. Returns the per-example losses `L_i`.
    fn loss_backward(
        &self,
        batch: &Batch,
        weights: Option<&[f64]>,
        collector: &mut GradCollector<T>,
    ) -> Result<Vec<f64>>;

    /// Trainable layers with the sequence length each one sees.
    fn layer_shapes(&self, seq: usize) -> Vec<LayerShape>;

    fn clip_method(&self) -> ClipMethod {
        ClipMethod::Bookkeeping
    }
}

/// Result of one clipping step.
#[derive(Debug)]
pub struct ClippedStep<T: Element> {
    pub grads: BTreeMap<String, Tensor<T>>,
    pub norms: PerSampleNorms,
    pub factors: ClipFactors,
    pub losses: Vec<f64>,
}

fn add_into<T: Element>(grads: &mut BTreeMap<String, Tensor<T>>, name: String, g: Tensor<T>) -> Result<()> {
    match grads.get_mut(&name) {
        Some(acc) => acc.axpy_inplace(T::one(), &g),
        None => {
            grads.insert(name, g);
            Ok(())
        }
    }
}

/// Norms from a set of captures (one global norm per example).
pub fn norms_from_captures<T: Element>(caps: &[LayerCapture<T>], plan: &ClipPlan) -> Result<PerSampleNorms> {
    let batch = caps.first().map(|c| c.batch).unwrap_or(0);
    let mut norms = PerSampleNorms::zeros(batch);
    let mut seen = std::collections::BTreeSet::new();
    for cap in caps {
        for name in cap.weight.iter().chain(cap.bias.iter()) {
            if !seen.insert(name.clone()) {
                return Err(Error::State(format!(
                    "parameter `{name}` feeds more than one layer; per-layer norms would miss cross terms"
                )));
            }
        }
        if cap.batch != batch {
            return Err(Error::dim("capture batch", &[batch], &[cap.batch]));
        }
        norms.add_layer(&ghost_norm_layer(cap, plan.strategy_for(cap))?)?;
    }
    Ok(norms)
}

/// Two-pass clipping over one forward/backward: capture, norms, clipped sum.
pub fn bk_clip_step<T: Element, M: PerExampleModel<T> + ?Sized>(
    model: &M,
    batch: &Batch,
    plan: &ClipPlan,
) -> Result<ClippedStep<T>> {
    let mut collector = GradCollector::capture();
    let losses = model.loss_backward(batch, None, &mut collector)?;
    ledger::set_phase(Phase::Clip);
    let caps = collector.into_captures();
    let norms = if caps.is_empty() {
        PerSampleNorms::zeros(batch.len())
    } else {
        norms_from_captures(&caps, plan)?
    };
    let factors = clip_factors(&norms, plan.clip_bound)?;
    let mut grads = BTreeMap::new();
    for cap in caps {
        for (name, g) in clipped_grad_sum_layer(&cap, &factors)? {
            add_into(&mut grads, name, g)?;
        }
    }
    Ok(ClippedStep {
        grads,
        norms,
        factors,
        losses,
    })
}

/// Norm sweep without retained captures, then a reweighted backward.
pub fn reweighted_clip_step<T: Element, M: PerExampleModel<T> + ?Sized>(
    model: &M,
    batch: &Batch,
    plan: &ClipPlan,
) -> Result<ClippedStep<T>> {
    let mut collector = GradCollector::norms(plan.clone());
    let losses = model.loss_backward(batch, None, &mut collector)?;
    ledger::set_phase(Phase::Clip);
    let norms = if collector.sq_norms().is_empty() {
        PerSampleNorms::zeros(batch.len())
    } else {
        PerSampleNorms {
            sq_norms: collector.sq_norms().to_vec(),
        }
    };
    drop(collector);
    let factors = clip_factors(&norms, plan.clip_bound)?;
    let mut summed = GradCollector::sum();
    model.loss_backward(batch, Some(&factors.factors), &mut summed)?;
    Ok(ClippedStep {
        grads: summed.into_grads(),
        norms,
        factors,
        losses,
    })
}

/// Clip with the model's preferred flow. An infinite bound clips nothing and
/// takes the plain summed-gradient path.
pub fn dp_clip_step<T: Element, M: PerExampleModel<T> + ?Sized>(
    model: &M,
    batch: &Batch,
    plan: &ClipPlan,
) -> Result<ClippedStep<T>> {
    if plan.clip_bound == f64::INFINITY {
        let (grads, losses) = summed_grads(model, batch)?;
        ledger::set_phase(Phase::Clip);
        let factors = ClipFactors {
            factors: vec![1.0; batch.len()],
        };
        return Ok(ClippedStep {
            grads,
            norms: PerSampleNorms::zeros(batch.len()),
            factors,
            losses,
        });
    }
    match model.clip_method() {
        ClipMethod::Bookkeeping => bk_clip_step(model, batch, plan),
        ClipMethod::Reweighted => reweighted_clip_step(model, batch, plan),
    }
}

/// Ground-truth per-example gradients: one ordinary backward per example.
pub fn naive_per_sample_grads<T: Element, M: PerExampleModel<T> + ?Sized>(
    model: &M,
    batch: &Batch,
) -> Result<Vec<BTreeMap<String, Tensor<T>>>> {
    (0..batch.len())
        .map(|i| {
            let mut collector = GradCollector::sum();
            model.loss_backward(&batch.example(i), None, &mut collector)?;
            Ok(collector.into_grads())
        })
        .collect()
}

/// Ordinary batch-summed gradients.
pub fn summed_grads<T: Element, M: PerExampleModel<T> + ?Sized>(
    model: &M,
    batch: &Batch,
) -> Result<(BTreeMap<String, Tensor<T>>, Vec<f64>)> {
    let mut collector = GradCollector::sum();
    let losses = model.loss_backward(batch, None, &mut collector)?;
    Ok((collector.into_grads(), losses))
}
