//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations evaluate eagerly and, when at least one input requires a
//! gradient, append a node to the [`Tape`] holding exactly the tensors its
//! backward rule needs. Nothing else is kept alive by the tape: a value no
//! node saved is freed as soon as the caller drops its [`Var`]. Frozen
//! subgraphs therefore retain no activations at all.
//!
//! Backward walks nodes in exact reverse order and drops each node (and the
//! tensors it saved) as soon as its rule has run. Parameter gradients are not
//! written anywhere by the tape itself; they are handed to a
//! [`GradCollector`], which either sums them, captures the per-layer
//! `(input, output-gradient)` pairs for per-example clipping, or folds them
//! straight into per-example norms.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::clip::{self, CaptureInput, ClipPlan, LayerCapture};
use crate::error::{Error, Result};
use crate::ledger::Category;
use crate::params::Parameter;
use crate::tensor::{gemm, numel, Element, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Gelu,
    Tanh,
    Identity,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 4] = [
        Nonlinearity::Relu,
        Nonlinearity::Gelu,
        Nonlinearity::Tanh,
        Nonlinearity::Identity,
    ];

    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Nonlinearity::Relu => x.max(T::zero()),
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Identity => x,
            // tanh approximation
            Nonlinearity::Gelu => {
                let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
                T::of(0.5) * x * (T::one() + u.tanh())
            }
        }
    }

    pub fn derivative<T: Element>(self, x: T) -> T {
        match self {
            Nonlinearity::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Nonlinearity::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Nonlinearity::Identity => T::one(),
            Nonlinearity::Gelu => {
                let c = T::of(SQRT_2_OVER_PI);
                let u = c * (x + T::of(GELU_C) * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + T::of(3.0 * GELU_C) * x * x);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
            }
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlinearity::Relu),
            "gelu" => Ok(Nonlinearity::Gelu),
            "tanh" => Ok(Nonlinearity::Tanh),
            "identity" => Ok(Nonlinearity::Identity),
            other => Err(Error::Config(format!("unknown nonlinearity `{other}`"))),
        }
    }
}

/// What the tape is allowed to keep for backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetainPolicy {
    /// Every node saves its backward inputs.
    StoreAll,
    /// Recording is off by default; only explicit boundary regions record.
    ReversibleRecompute,
}

/// A value on (or off) the tape.
pub struct Var<T: Element> {
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            value: Rc::clone(&self.value),
            node: self.node,
        }
    }
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<T: Element> Var<T> {
    /// An off-tape value.
    pub fn constant(value: Tensor<T>) -> Self {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Take the tensor out, copying only if something else still shares it.
    pub fn into_tensor(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

enum Op<T: Element> {
    Input,
    Param {
        name: String,
    },
    Linear {
        x: Option<Rc<Tensor<T>>>,
        x_node: Option<usize>,
        w: Rc<Tensor<T>>,
        weight: Option<String>,
        bias: Option<String>,
        batch: usize,
    },
    MatMul {
        a: Option<Rc<Tensor<T>>>,
        a_node: Option<usize>,
        b: Option<Rc<Tensor<T>>>,
        b_node: Option<usize>,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Axpby {
        alpha: T,
        a: Option<usize>,
        beta: T,
        b: Option<usize>,
    },
    Activation {
        x: Rc<Tensor<T>>,
        kind: Nonlinearity,
        input: usize,
    },
    MulColumns {
        mask: Rc<[T]>,
        input: usize,
    },
    Softmax {
        y: Rc<Tensor<T>>,
        input: usize,
    },
    MeanPool {
        seq: usize,
        input: usize,
    },
    Embedding {
        tokens: Rc<[usize]>,
        name: String,
        vocab: usize,
        batch: usize,
    },
    CrossEntropy {
        probs: Tensor<T>,
        labels: Rc<[usize]>,
        input: usize,
    },
    WeightedSum {
        weights: Vec<T>,
        input: usize,
    },
    Sum {
        input: usize,
        shape: Vec<usize>,
    },
}

impl<T: Element> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Axpby { .. } => "axpby",
            Op::Activation { .. } => "activation",
            Op::MulColumns { .. } => "mul_columns",
            Op::Softmax { .. } => "softmax",
            Op::MeanPool { .. } => "mean_pool",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum { .. } => "sum",
        }
    }

    /// Non-weight bytes this node keeps alive for backward.
    fn saved_bytes(&self) -> u64 {
        let rc = |t: &Option<Rc<Tensor<T>>>| t.as_ref().map(|t| t.bytes()).unwrap_or(0);
        match self {
            Op::Linear { x, .. } => rc(x),
            Op::MatMul { a, b, .. } => {
                let w = |t: &Option<Rc<Tensor<T>>>| match t {
                    Some(t) if t.category() != Category::Weights => t.bytes(),
                    _ => 0,
                };
                w(a) + w(b)
            }
            Op::Activation { x, .. } => x.bytes(),
            Op::Softmax { y, .. } => y.bytes(),
            Op::CrossEntropy { probs, .. } => probs.bytes(),
            _ => 0,
        }
    }
}

struct Node<T: Element> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Gradients for tape inputs created with [`Tape::input`].
pub struct LeafGrads<T: Element> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Element> LeafGrads<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.grads.get(&n))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.node.and_then(|n| self.grads.remove(&n))
    }
}

/// How parameter gradients reaching the collector are consumed.
#[derive(Debug, Clone, PartialEq)]
pub enum CollectMode {
    /// Ordinary batch-summed gradients.
    Sum,
    /// Keep per-layer captures for a later algebraic clipping pass.
    Capture,
    /// Fold each layer into per-example squared norms immediately.
    Norms(ClipPlan),
}

/// Destination of parameter gradients produced by backward.
pub struct GradCollector<T: Element> {
    mode: CollectMode,
    grads: BTreeMap<String, Tensor<T>>,
    captures: Vec<LayerCapture<T>>,
    norms: Vec<f64>,
}

impl<T: Element> GradCollector<T> {
    pub fn new(mode: CollectMode) -> Self {
        GradCollector {
            mode,
            grads: BTreeMap::new(),
            captures: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn sum() -> Self {
        Self::new(CollectMode::Sum)
    }

    pub fn capture() -> Self {
        Self::new(CollectMode::Capture)
    }

    pub fn norms(plan: ClipPlan) -> Self {
        Self::new(CollectMode::Norms(plan))
    }

    pub fn mode(&self) -> &CollectMode {
        &self.mode
    }

    pub fn into_grads(self) -> BTreeMap<String, Tensor<T>> {
        self.grads
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.grads
    }

    pub fn into_captures(self) -> Vec<LayerCapture<T>> {
        self.captures
    }

    pub fn captures(&self) -> &[LayerCapture<T>] {
        &self.captures
    }

    /// Per-example squared norms accumulated in `Norms` mode.
    pub fn sq_norms(&self) -> &[f64] {
        &self.norms
    }

    fn add_grad(&mut self, name: &str, g: Tensor<T>) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(acc) => acc.axpy_inplace(T::one(), &g),
            None => {
                self.grads.insert(name.to_string(), g);
                Ok(())
            }
        }
    }

    fn layer(&mut self, cap: LayerCapture<T>) -> Result<()> {
        match &self.mode {
            CollectMode::Sum => {
                for (name, g) in summed_layer_grads(&cap)? {
                    self.add_grad(&name, g)?;
                }
                Ok(())
            }
            CollectMode::Capture => {
                self.captures.push(cap);
                Ok(())
            }
            CollectMode::Norms(plan) => {
                let strategy = plan.strategy_for(&cap);
                let layer = clip::ghost_norm_layer(&cap, strategy)?;
                if self.norms.is_empty() {
                    self.norms = vec![0.0; layer.len()];
                }
                if self.norms.len() != layer.len() {
                    return Err(Error::dim(
                        "per-example norms",
                        &[self.norms.len()],
                        &[layer.len()],
                    ));
                }
                for (acc, v) in self.norms.iter_mut().zip(layer) {
                    *acc += v;
                }
                Ok(())
            }
        }
    }

    fn dense(&mut self, name: &str, g: Tensor<T>) -> Result<()> {
        match self.mode {
            CollectMode::Sum => self.add_grad(name, g),
            _ => Err(Error::State(format!(
                "parameter `{name}` is used outside a linear or embedding layer; \
                 per-example clipping is unavailable for it"
            ))),
        }
    }
}

/// Plain batch-summed gradient of one layer: `xᵀ g` over all rows, and
/// column sums of `g` for the bias.
fn summed_layer_grads<T: Element>(cap: &LayerCapture<T>) -> Result<Vec<(String, Tensor<T>)>> {
    let g = &cap.grad_out;
    let p = *g.shape().last().unwrap_or(&1);
    let rows = g.len() / p.max(1);
    let mut out = Vec::new();
    if let Some(wname) = &cap.weight {
        match &cap.input {
            Some(CaptureInput::Dense(x)) => {
                let d = *x.shape().last().unwrap_or(&1);
                let mut w = vec![T::zero(); d * p];
                gemm(
                    T::one(),
                    MatRef::new(x.data(), rows, d).t(),
                    MatRef::new(g.data(), rows, p),
                    T::zero(),
                    &mut w,
                );
                out.push((wname.clone(), Tensor::from_parts(vec![d, p], w, Category::Gradients)));
            }
            Some(CaptureInput::Tokens { ids, vocab }) => {
                let mut w = vec![T::zero(); vocab * p];
                for (r, &tok) in ids.iter().enumerate() {
                    let src = &g.data()[r * p..(r + 1) * p];
                    for (dst, &v) in w[tok * p..(tok + 1) * p].iter_mut().zip(src) {
                        *dst = *dst + v;
                    }
                }
                out.push((wname.clone(), Tensor::from_parts(vec![*vocab, p], w, Category::Gradients)));
            }
            None => return Err(Error::State(format!("layer `{wname}` captured without input"))),
        }
    }
    if let Some(bname) = &cap.bias {
        let mut b = vec![T::zero(); p];
        for r in 0..rows {
            for (acc, &v) in b.iter_mut().zip(&g.data()[r * p..(r + 1) * p]) {
                *acc = *acc + v;
            }
        }
        out.push((bname.clone(), Tensor::from_parts(vec![p], b, Category::Gradients)));
    }
    Ok(out)
}

/// Recording of differentiable operations.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    policy: RetainPolicy,
    recording: Cell<bool>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_policy(RetainPolicy::StoreAll)
    }

    pub fn with_policy(policy: RetainPolicy) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            policy,
            recording: Cell::new(policy == RetainPolicy::StoreAll),
            consumed: Cell::new(false),
        }
    }

    pub fn policy(&self) -> RetainPolicy {
        self.policy
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get() && !self.consumed.get()
    }

    /// Run `f` with recording switched off: every op result is a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    /// Run `f` with recording switched on (boundary regions under
    /// [`RetainPolicy::ReversibleRecompute`]).
    pub fn recorded<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(true);
        let out = f();
        self.recording.set(prev);
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op kinds in recording order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.kind()).collect()
    }

    /// Bytes of non-weight tensors currently saved for backward.
    pub fn saved_bytes(&self) -> u64 {
        self.nodes.borrow().iter().map(|n| n.op.saved_bytes()).sum()
    }

    fn push(&self, op: Op<T>, shape: &[usize]) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape: shape.to_vec(),
        });
        nodes.len() - 1
    }

    fn wrap(&self, value: Tensor<T>, op: Option<Op<T>>) -> Var<T> {
        let node = op.map(|op| self.push(op, value.shape()));
        Var {
            value: Rc::new(value),
            node,
        }
    }

    fn wrap_rc(&self, value: Rc<Tensor<T>>, op: Option<Op<T>>) -> Var<T> {
        let node = op.map(|op| self.push(op, value.shape()));
        Var { value, node }
    }

    /// A leaf whose gradient is returned by backward when `requires_grad`.
    pub fn input(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        let op = (requires_grad && self.is_recording()).then_some(Op::Input);
        self.wrap(value, op)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var::constant(value)
    }

    /// A parameter used as a generic operand (dense gradient only).
    pub fn param(&self, p: &Parameter<T>) -> Var<T> {
        let op = (p.trainable() && self.is_recording()).then(|| Op::Param {
            name: p.name().to_string(),
        });
        self.wrap_rc(p.shared(), op)
    }

    /// `x W (+ b)` over the last axis, `x: [.., d]`, `W: [d, p]`, `b: [p]`.
    pub fn linear(&self, x: &Var<T>, w: &Parameter<T>, b: Option<&Parameter<T>>) -> Result<Var<T>> {
        let xs = x.shape();
        let ws = w.value().shape();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim("linear", xs, ws));
        }
        let (d, p) = (ws[0], ws[1]);
        let rows = x.value.len() / d.max(1);
        let mut out = vec![T::zero(); rows * p];
        if let Some(b) = b {
            if b.value().shape() != [p] {
                return Err(Error::dim("linear bias", &[p], b.value().shape()));
            }
            let bias = b.value().data();
            for r in 0..rows {
                out[r * p..(r + 1) * p].copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(x.value.data(), rows, d),
            MatRef::new(w.value().data(), d, p),
            beta,
            &mut out,
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = p;
        let w_tr = w.trainable();
        let b_tr = b.is_some_and(|b| b.trainable());
        let op = (self.is_recording() && (x.requires_grad() || w_tr || b_tr)).then(|| Op::Linear {
            x: w_tr.then(|| Rc::clone(&x.value)),
            x_node: x.node,
            w: w.shared(),
            weight: w_tr.then(|| w.name().to_string()),
            bias: if b_tr { b.map(|b| b.name().to_string()) } else { None },
            batch: if xs.len() > 1 { xs[0] } else { 1 },
        });
        Ok(self.wrap(Tensor::from_parts(shape, out, Category::Activations), op))
    }

    /// Batched contraction of two tape values.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.matmul(&b.value, Category::Activations)?;
        let op = (self.is_recording() && (a.requires_grad() || b.requires_grad())).then(|| Op::MatMul {
            a: b.requires_grad().then(|| Rc::clone(&a.value)),
            a_node: a.node,
            b: a.requires_grad().then(|| Rc::clone(&b.value)),
            b_node: b.node,
            a_shape: a.shape().to_vec(),
            b_shape: b.shape().to_vec(),
        });
        Ok(self.wrap(out, op))
    }

    /// `alpha * a + beta * b`.
    pub fn axpby(&self, alpha: f64, a: &Var<T>, beta: f64, b: &Var<T>) -> Result<Var<T>> {
        let (al, be) = (T::of(alpha), T::of(beta));
        let out = a
            .value
            .zip_map(&b.value, Category::Activations, |x, y| al * x + be * y)?;
        let op = (self.is_recording() && (a.requires_grad() || b.requires_grad())).then_some(Op::Axpby {
            alpha: al,
            a: a.node,
            beta: be,
            b: b.node,
        });
        Ok(self.wrap(out, op))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.axpby(1.0, a, 1.0, b)
    }

    pub fn scale(&self, a: &Var<T>, c: f64) -> Result<Var<T>> {
        let ct = T::of(c);
        let out = a.value.map(Category::Activations, |x| ct * x);
        let op = (self.is_recording() && a.requires_grad()).then_some(Op::Axpby {
            alpha: ct,
            a: a.node,
            beta: T::zero(),
            b: None,
        });
        Ok(self.wrap(out, op))
    }

    pub fn activation(&self, x: &Var<T>, kind: Nonlinearity) -> Var<T> {
        let out = x.value.map(Category::Activations, |v| kind.apply(v));
        let op = (self.is_recording() && x.requires_grad() && kind != Nonlinearity::Identity).then(|| {
            Op::Activation {
                x: Rc::clone(&x.value),
                kind,
                input: x.node.unwrap(),
            }
        });
        if kind == Nonlinearity::Identity {
            // identity keeps the same node: no new saved state
            return Var {
                value: Rc::new(out),
                node: if self.is_recording() {
                    x.node.map(|n| {
                        self.push(
                            Op::Axpby {
                                alpha: T::one(),
                                a: Some(n),
                                beta: T::zero(),
                                b: None,
                            },
                            x.shape(),
                        )
                    })
                } else {
                    None
                },
            };
        }
        self.wrap(out, op)
    }

    /// Multiply the last axis by a constant vector.
    pub fn mul_columns(&self, x: &Var<T>, mask: &[T]) -> Result<Var<T>> {
        let d = *x.shape().last().unwrap_or(&0);
        if mask.len() != d {
            return Err(Error::dim("mul_columns", x.shape(), &[mask.len()]));
        }
        let mut out = x.value.copy_as(Category::Activations);
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (v, &m) in row.iter_mut().zip(mask) {
                *v = *v * m;
            }
        }
        let op = (self.is_recording() && x.requires_grad()).then(|| Op::MulColumns {
            mask: Rc::from(mask),
            input: x.node.unwrap(),
        });
        Ok(self.wrap(out, op))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: &Var<T>) -> Var<T> {
        let d = *x.shape().last().unwrap_or(&1);
        let mut out = x.value.copy_as(Category::Activations);
        for row in out.data_mut().chunks_mut(d.max(1)) {
            softmax_row(row);
        }
        let out = Rc::new(out);
        let op = (self.is_recording() && x.requires_grad()).then(|| Op::Softmax {
            y: Rc::clone(&out),
            input: x.node.unwrap(),
        });
        self.wrap_rc(out, op)
    }

    /// Mean over the sequence axis: `[B, T, d] -> [B, d]`.
    pub fn mean_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::dim("mean_pool", s, &[0, 0, 0]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let inv = T::of(1.0 / t as f64);
        let mut out = vec![T::zero(); b * d];
        let xd = x.value.data();
        for bi in 0..b {
            let acc = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                for (a, &v) in acc.iter_mut().zip(&xd[(bi * t + ti) * d..(bi * t + ti + 1) * d]) {
                    *a = *a + v;
                }
            }
            for a in acc.iter_mut() {
                *a = *a * inv;
            }
        }
        let op = (self.is_recording() && x.requires_grad()).then(|| Op::MeanPool {
            seq: t,
            input: x.node.unwrap(),
        });
        Ok(self.wrap(Tensor::from_parts(vec![b, d], out, Category::Activations), op))
    }

    /// Row lookup `table[tokens]` producing `[B, T, d]`.
    pub fn embedding(&self, tokens: &Rc<[usize]>, shape: [usize; 2], table: &Parameter<T>) -> Result<Var<T>> {
        let ts = table.value().shape();
        if ts.len() != 2 || numel(&shape) != tokens.len() {
            return Err(Error::dim("embedding", &shape, ts));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= vocab {
                return Err(Error::Data {
                    index: i / shape[1].max(1),
                    reason: format!("token id {tok} outside vocabulary of {vocab}"),
                });
            }
            out.extend_from_slice(&table.value().data()[tok * d..(tok + 1) * d]);
        }
        let op = (self.is_recording() && table.trainable()).then(|| Op::Embedding {
            tokens: Rc::clone(tokens),
            name: table.name().to_string(),
            vocab,
            batch: shape[0],
        });
        Ok(self.wrap(
            Tensor::from_parts(vec![shape[0], shape[1], d], out, Category::Activations),
            op,
        ))
    }

    /// Per-example softmax cross-entropy, `[B, C] -> [B]`.
    pub fn cross_entropy(&self, logits: &Var<T>, labels: &Rc<[usize]>) -> Result<Var<T>> {
        let s = logits.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        let mut probs = logits.value.copy_as(Category::Activations);
        let mut losses = vec![T::zero(); b];
        for (i, (&y, row)) in labels.iter().zip(probs.data_mut().chunks_mut(c)).enumerate() {
            if y >= c {
                return Err(Error::Data {
                    index: i,
                    reason: format!("label {y} outside {c} classes"),
                });
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            losses[i] = lse - row[y];
            softmax_row(row);
        }
        let op = (self.is_recording() && logits.requires_grad()).then(|| Op::CrossEntropy {
            probs,
            labels: Rc::clone(labels),
            input: logits.node.unwrap(),
        });
        Ok(self.wrap(Tensor::from_parts(vec![b], losses, Category::Activations), op))
    }

    /// `Σ_i w_i x_i` for a vector `x`.
    pub fn weighted_sum(&self, x: &Var<T>, weights: &[T]) -> Result<Var<T>> {
        if x.shape().len() != 1 || x.shape()[0] != weights.len() {
            return Err(Error::dim("weighted_sum", x.shape(), &[weights.len()]));
        }
        let s = x
            .value
            .data()
            .iter()
            .zip(weights)
            .fold(T::zero(), |acc, (&v, &w)| acc + v * w);
        let op = (self.is_recording() && x.requires_grad()).then(|| Op::WeightedSum {
            weights: weights.to_vec(),
            input: x.node.unwrap(),
        });
        Ok(self.wrap(Tensor::scalar(s, Category::Activations), op))
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let s = x.value.sum();
        let op = (self.is_recording() && x.requires_grad()).then(|| Op::Sum {
            input: x.node.unwrap(),
            shape: x.shape().to_vec(),
        });
        self.wrap(Tensor::scalar(s, Category::Activations), op)
    }

    /// Backpropagate from a scalar.
    pub fn backward(&self, loss: &Var<T>, collector: &mut GradCollector<T>) -> Result<LeafGrads<T>> {
        if loss.value.len() != 1 {
            return Err(Error::dim("backward (scalar loss)", loss.shape(), &[]));
        }
        let seed = Tensor::full(loss.shape(), T::one(), Category::Gradients);
        self.backward_from(vec![(loss.clone(), seed)], collector)
    }

    /// Backpropagate from several outputs with given cotangents.
    pub fn backward_from(
        &self,
        seeds: Vec<(Var<T>, Tensor<T>)>,
        collector: &mut GradCollector<T>,
    ) -> Result<LeafGrads<T>> {
        if self.consumed.replace(true) {
            return Err(Error::State("backward called on a consumed tape".into()));
        }
        let mut nodes = self.nodes.take();
        let mut cots: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        for (var, seed) in seeds {
            if seed.shape() != var.shape() {
                return Err(Error::dim("backward seed", var.shape(), seed.shape()));
            }
            if let Some(n) = var.node {
                accumulate(&mut cots, n, seed)?;
            }
        }
        let mut leaves = HashMap::new();
        while let Some(node) = nodes.pop() {
            let idx = nodes.len();
            let Some(g) = cots[idx].take() else {
                continue;
            };
            backward_node(node, idx, g, &mut cots, collector, &mut leaves)?;
        }
        Ok(LeafGrads { grads: leaves })
    }
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn accumulate<T: Element>(cots: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) -> Result<()> {
    match &mut cots[idx] {
        Some(acc) => acc.axpy_inplace(T::one(), &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn backward_node<T: Element>(
    node: Node<T>,
    idx: usize,
    g: Tensor<T>,
    cots: &mut [Option<Tensor<T>>],
    collector: &mut GradCollector<T>,
    leaves: &mut HashMap<usize, Tensor<T>>,
) -> Result<()> {
    let grad = Category::Gradients;
    match node.op {
        Op::Input => {
            leaves.insert(idx, g);
        }
        Op::Param { name } => collector.dense(&name, g)?,
        Op::Linear {
            x,
            x_node,
            w,
            weight,
            bias,
            batch,
        } => {
            let (d, p) = (w.shape()[0], w.shape()[1]);
            let rows = g.len() / p.max(1);
            if let Some(xn) = x_node {
                let mut gx = vec![T::zero(); rows * d];
                gemm(
                    T::one(),
                    MatRef::new(g.data(), rows, p),
                    MatRef::new(w.data(), d, p).t(),
                    T::zero(),
                    &mut gx,
                );
                let mut shape = node.shape.clone();
                *shape.last_mut().unwrap() = d;
                accumulate(cots, xn, Tensor::from_parts(shape, gx, grad))?;
            }
            drop(w);
            if weight.is_some() || bias.is_some() {
                let seq = rows / batch.max(1);
                collector.layer(LayerCapture {
                    weight,
                    bias,
                    input: x.map(CaptureInput::Dense),
                    grad_out: Rc::new(g),
                    batch,
                    seq,
                })?;
            }
        }
        Op::MatMul {
            a,
            a_node,
            b,
            b_node,
            a_shape,
            b_shape,
        } => {
            let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
            let n = b_shape[b_shape.len() - 1];
            let batches = numel(&a_shape[..a_shape.len() - 2]);
            let shared = b_shape.len() == 2;
            if let (Some(an), Some(b)) = (a_node, b.as_ref()) {
                let mut ga = vec![T::zero(); batches * m * k];
                if shared {
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), batches * m, n),
                        MatRef::new(b.data(), k, n).t(),
                        T::zero(),
                        &mut ga,
                    );
                } else {
                    for bi in 0..batches {
                        gemm(
                            T::one(),
                            MatRef::new(&g.data()[bi * m * n..], m, n),
                            MatRef::new(&b.data()[bi * k * n..], k, n).t(),
                            T::zero(),
                            &mut ga[bi * m * k..],
                        );
                    }
                }
                accumulate(cots, an, Tensor::from_parts(a_shape.clone(), ga, grad))?;
            }
            if let (Some(bn), Some(a)) = (b_node, a.as_ref()) {
                let mut gb = vec![T::zero(); numel(&b_shape)];
                if shared {
                    gemm(
                        T::one(),
                        MatRef::new(a.data(), batches * m, k).t(),
                        MatRef::new(g.data(), batches * m, n),
                        T::zero(),
                        &mut gb,
                    );
                } else {
                    for bi in 0..batches {
                        gemm(
                            T::one(),
                            MatRef::new(&a.data()[bi * m * k..], m, k).t(),
                            MatRef::new(&g.data()[bi * m * n..], m, n),
                            T::zero(),
                            &mut gb[bi * k * n..],
                        );
                    }
                }
                accumulate(cots, bn, Tensor::from_parts(b_shape, gb, grad))?;
            }
        }
        Op::Axpby { alpha, a, beta, b } => {
            if let Some(bn) = b {
                accumulate(cots, bn, g.map(grad, |v| beta * v))?;
            }
            if let Some(an) = a {
                let ga = if alpha == T::one() {
                    g.into_category(grad)
                } else {
                    g.map(grad, |v| alpha * v)
                };
                accumulate(cots, an, ga)?;
            }
        }
        Op::Activation { x, kind, input } => {
            let gx = g.zip_map(&x, grad, |gv, xv| gv * kind.derivative(xv))?;
            drop(x);
            accumulate(cots, input, gx)?;
        }
        Op::MulColumns { mask, input } => {
            let d = mask.len();
            let mut gx = g.copy_as(grad);
            for row in gx.data_mut().chunks_mut(d.max(1)) {
                for (v, &m) in row.iter_mut().zip(mask.iter()) {
                    *v = *v * m;
                }
            }
            accumulate(cots, input, gx)?;
        }
        Op::Softmax { y, input } => {
            let d = *y.shape().last().unwrap_or(&1);
            let mut gx = g.copy_as(grad);
            for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot = grow.iter().zip(yrow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            drop(y);
            accumulate(cots, input, gx)?;
        }
        Op::MeanPool { seq, input } => {
            let (b, d) = (node.shape[0], node.shape[1]);
            let inv = T::of(1.0 / seq as f64);
            let mut gx = vec![T::zero(); b * seq * d];
            for bi in 0..b {
                let src = &g.data()[bi * d..(bi + 1) * d];
                for ti in 0..seq {
                    for (dst, &v) in gx[(bi * seq + ti) * d..(bi * seq + ti + 1) * d].iter_mut().zip(src) {
                        *dst = v * inv;
                    }
                }
            }
            accumulate(cots, input, Tensor::from_parts(vec![b, seq, d], gx, grad))?;
        }
        Op::Embedding {
            tokens,
            name,
            vocab,
            batch,
        } => {
            let seq = tokens.len() / batch.max(1);
            collector.layer(LayerCapture {
                weight: Some(name),
                bias: None,
                input: Some(CaptureInput::Tokens { ids: tokens, vocab }),
                grad_out: Rc::new(g),
                batch,
                seq,
            })?;
        }
        Op::CrossEntropy { probs, labels, input } => {
            let c = *probs.shape().last().unwrap_or(&1);
            let mut gl = probs.copy_as(grad);
            drop(probs);
            for (i, row) in gl.data_mut().chunks_mut(c).enumerate() {
                let gi = g.data()[i];
                row[labels[i]] = row[labels[i]] - T::one();
                for v in row.iter_mut() {
                    *v = *v * gi;
                }
            }
            accumulate(cots, input, gl)?;
        }
        Op::WeightedSum { weights, input } => {
            let s = g.item();
            let gx: Vec<T> = weights.iter().map(|&w| w * s).collect();
            accumulate(cots, input, Tensor::from_parts(vec![weights.len()], gx, grad))?;
        }
        Op::Sum { input, shape } => {
            accumulate(cots, input, Tensor::full(&shape, g.item(), grad))?;
        }
    }
    Ok(())
}
