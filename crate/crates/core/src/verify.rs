//! Oracle suites run by `dpmem verify`, each check reduced to one number
//! compared against a fixed threshold.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, epsilon_for, rdp_subsampled_gaussian};
use crate::arch::{build_model, ArchKind, BackboneConfig, Exchange, FKind, Mlp, Model, TuningConfig};
use crate::autodiff::{GradCollector, Nonlinearity, RetainPolicy, Tape, Var};
use crate::clip::{
    bk_clip_step, choose_strategy, dp_clip_step, naive_per_sample_grads, summed_grads, ClipPlan, PerExampleModel,
    Strategy,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ledger::Category;
use crate::memconf::default_conformance;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

pub const VERIFY_SCHEMA: &str = "dpmem-verify/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gradcheck,
    Ghostnorm,
    Reversible,
    Accountant,
    Memconf,
    All,
}

impl Suite {
    pub const LEAVES: [Suite; 5] = [
        Suite::Gradcheck,
        Suite::Ghostnorm,
        Suite::Reversible,
        Suite::Accountant,
        Suite::Memconf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Ghostnorm => "ghostnorm",
            Suite::Reversible => "reversible",
            Suite::Accountant => "accountant",
            Suite::Memconf => "memconf",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::LEAVES
            .into_iter()
            .chain([Suite::All])
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown suite `{s}` (gradcheck, ghostnorm, reversible, accountant, memconf, all)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub pass: bool,
    /// The measured error or violation; `None` for yes/no checks.
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub suites: Vec<Suite>,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub elapsed_ms: BTreeMap<String, f64>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verify report serializes")
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let num = match (c.value, c.threshold) {
                (Some(v), Some(t)) => format!(" {v:.3e} (limit {t:.1e})"),
                _ => String::new(),
            };
            out.push_str(&format!(
                "{} {}/{}{} {}\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                num,
                c.detail
            ));
        }
        out
    }
}

struct Checks {
    suite: Suite,
    out: Vec<Check>,
}

impl Checks {
    fn new(suite: Suite) -> Self {
        Checks { suite, out: Vec::new() }
    }

    /// Passes iff `value <= threshold`.
    fn bound(&mut self, name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) {
        self.out.push(Check {
            suite: self.suite,
            name: name.into(),
            pass: value <= threshold,
            value: Some(value),
            threshold: Some(threshold),
            detail: detail.into(),
        });
    }

    fn flag(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.out.push(Check {
            suite: self.suite,
            name: name.into(),
            pass,
            value: None,
            threshold: None,
            detail: detail.into(),
        });
    }
}

/// Run `suite` (every leaf suite for `All`).
pub fn run(suite: Suite) -> Result<VerifyReport> {
    let suites: Vec<Suite> = if suite == Suite::All {
        Suite::LEAVES.to_vec()
    } else {
        vec![suite]
    };
    let mut checks = Vec::new();
    let mut elapsed_ms = BTreeMap::new();
    for &s in &suites {
        let t0 = Instant::now();
        let mut c = Checks::new(s);
        match s {
            Suite::Gradcheck => gradcheck_suite(&mut c)?,
            Suite::Ghostnorm => ghostnorm_suite(&mut c)?,
            Suite::Reversible => reversible_suite(&mut c)?,
            Suite::Accountant => accountant_suite(&mut c)?,
            Suite::Memconf => memconf_suite(&mut c)?,
            Suite::All => unreachable!("expanded above"),
        }
        elapsed_ms.insert(s.to_string(), t0.elapsed().as_secs_f64() * 1e3);
        checks.extend(c.out);
    }
    Ok(VerifyReport {
        schema: VERIFY_SCHEMA.to_string(),
        pass: checks.iter().all(|c| c.pass),
        suites,
        checks,
        elapsed_ms,
    })
}

fn tiny_backbone(depth: usize) -> BackboneConfig {
    BackboneConfig {
        depth,
        width: 8,
        ffn_hidden: 16,
        vocab: 11,
        seq_len: 4,
        num_classes: 3,
        nonlinearity: Nonlinearity::Gelu,
    }
}

fn tiny_tuning() -> TuningConfig {
    let mut t = TuningConfig::default();
    t.lora.rank = 2;
    t.adapter.bottleneck = 3;
    t.side.reduction = 2;
    t
}

fn random_batch(b: usize, seq: usize, vocab: usize, classes: usize, seed: u64) -> Result<Batch> {
    let mut rng = SeededRng::new(seed);
    let tokens = (0..b * seq).map(|_| rng.below(vocab)).collect();
    let labels = (0..b).map(|_| rng.below(classes)).collect();
    Batch::new(tokens, labels, seq)
}

fn perturb(params: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = SeededRng::new(seed);
    for p in params.iter_mut().filter(|p| p.trainable()) {
        for v in p.value_mut().data_mut() {
            *v += std * rng.gaussian();
        }
    }
}

fn perturbed(kind: ArchKind, depth: usize, tuning: &TuningConfig, seed: u64) -> Result<Model<f64>> {
    let mut m = build_model(kind, &tiny_backbone(depth), tuning, seed)?;
    if kind == ArchKind::Reversible && tuning.rev.f_kind == FKind::DyloraLike {
        m.set_rank_mask(Some(vec![1.0, 0.0]));
    }
    perturb(m.params_mut(), seed ^ 0x9e37, 0.3);
    Ok(m)
}

trait Probe: PerExampleModel<f64> {
    fn store(&self) -> &ParamStore<f64>;
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
    fn total_loss(&self, batch: &Batch) -> Result<f64>;
}

impl Probe for Model<f64> {
    fn store(&self) -> &ParamStore<f64> {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        self.params_mut()
    }
    fn total_loss(&self, batch: &Batch) -> Result<f64> {
        self.loss(batch)
    }
}

impl Probe for Mlp<f64> {
    fn store(&self) -> &ParamStore<f64> {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        self.params_mut()
    }
    fn total_loss(&self, batch: &Batch) -> Result<f64> {
        self.loss(batch)
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over up to `per_param` coordinates of each trainable parameter.
fn worst_gradcheck(model: &mut impl Probe, batch: &Batch, per_param: usize) -> Result<(f64, String)> {
    let (grads, _) = summed_grads(model, batch)?;
    let names = model.store().trainable_names();
    if grads.keys().ne(names.iter()) {
        return Ok((f64::INFINITY, "gradient keys differ from the trainable parameters".into()));
    }
    let h = 1e-6;
    let mut worst = (0.0, String::from("-"));
    let mut rng = SeededRng::new(99);
    for name in names {
        let n = model.store().get(&name)?.numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        for j in coords {
            let orig = model.store().get(&name)?.value().data()[j];
            model.store_mut().get_mut(&name)?.value_mut().data_mut()[j] = orig + h;
            let up = model.total_loss(batch)?;
            model.store_mut().get_mut(&name)?.value_mut().data_mut()[j] = orig - h;
            let down = model.total_loss(batch)?;
            model.store_mut().get_mut(&name)?.value_mut().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[&name].data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("worst at {name}[{j}]: analytic {analytic:.6e}, numeric {numeric:.6e}"));
            }
        }
    }
    Ok(worst)
}

type Build = dyn Fn(&Tape<f64>, &[Var<f64>], &ParamStore<f64>) -> Result<Var<f64>>;

fn randn(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gaussian()).collect(), Category::Activations)
}

fn op_loss(inputs: &[Tensor<f64>], params: &ParamStore<f64>, f: &Build) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone(), false)).collect();
    let out = f(&tape, &vars, params)?;
    let t = tape.activation(&out, Nonlinearity::Tanh);
    Ok(tape.sum(&t).value().item())
}

/// Worst relative error over every input and parameter coordinate of
/// `sum(tanh(f(..)))`.
fn op_gradcheck(mut inputs: Vec<Tensor<f64>>, mut params: ParamStore<f64>, f: &Build) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = f(&tape, &vars, &params)?;
    let t = tape.activation(&out, Nonlinearity::Tanh);
    let loss = tape.sum(&t);
    drop((out, t));
    let mut collector = GradCollector::sum();
    let leaves = tape.backward(&loss, &mut collector)?;
    let h = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let analytic = leaves
            .get(&vars[k])
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            inputs[k].data_mut()[j] = orig + h;
            let up = op_loss(&inputs, &params, f)?;
            inputs[k].data_mut()[j] = orig - h;
            let down = op_loss(&inputs, &params, f)?;
            inputs[k].data_mut()[j] = orig;
            worst = worst.max(rel(analytic[j], (up - down) / (2.0 * h)));
        }
    }
    let grads = collector.into_grads();
    for name in params.trainable_names() {
        for j in 0..params.get(&name)?.numel() {
            let orig = params.get(&name)?.value().data()[j];
            params.get_mut(&name)?.value_mut().data_mut()[j] = orig + h;
            let up = op_loss(&inputs, &params, f)?;
            params.get_mut(&name)?.value_mut().data_mut()[j] = orig - h;
            let down = op_loss(&inputs, &params, f)?;
            params.get_mut(&name)?.value_mut().data_mut()[j] = orig;
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel(analytic, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.add(n, t.copy_as(Category::Weights), true)?;
    }
    Ok(s)
}

fn op_checks(c: &mut Checks) -> Result<()> {
    let none = ParamStore::new;
    let mut cases: Vec<(&str, Vec<Tensor<f64>>, ParamStore<f64>, Box<Build>)> = vec![
        (
            "linear",
            vec![randn(&[2, 3, 4], 3)?],
            store(vec![("w", randn(&[4, 3], 1)?), ("b", randn(&[3], 2)?)])?,
            Box::new(|t, v, p| t.linear(&v[0], p.get("w")?, Some(p.get("b")?))),
        ),
        (
            "linear without bias",
            vec![randn(&[2, 4], 3)?],
            store(vec![("w", randn(&[4, 3], 1)?)])?,
            Box::new(|t, v, p| t.linear(&v[0], p.get("w")?, None)),
        ),
        (
            "matmul shared",
            vec![randn(&[2, 3, 4], 4)?, randn(&[4, 5], 5)?],
            none(),
            Box::new(|t, v, _| t.matmul(&v[0], &v[1])),
        ),
        (
            "matmul batched",
            vec![randn(&[2, 3, 4], 6)?, randn(&[2, 4, 2], 7)?],
            none(),
            Box::new(|t, v, _| t.matmul(&v[0], &v[1])),
        ),
        (
            "param operand",
            vec![randn(&[2, 2, 4], 9)?],
            store(vec![("k", randn(&[4, 3], 8)?)])?,
            Box::new(|t, v, p| t.matmul(&v[0], &t.param(p.get("k")?))),
        ),
        (
            "axpby",
            vec![randn(&[3, 4], 10)?, randn(&[3, 4], 11)?],
            none(),
            Box::new(|t, v, _| t.axpby(0.7, &v[0], -1.3, &v[1])),
        ),
        ("add", vec![randn(&[5], 12)?], none(), Box::new(|t, v, _| t.add(&v[0], &v[0]))),
        ("scale", vec![randn(&[2, 3], 13)?], none(), Box::new(|t, v, _| t.scale(&v[0], -2.5))),
        (
            "mul_columns",
            vec![randn(&[2, 2, 3], 14)?],
            none(),
            Box::new(|t, v, _| t.mul_columns(&v[0], &[1.0, 0.0, -0.5])),
        ),
        ("softmax", vec![randn(&[2, 3, 5], 16)?], none(), Box::new(|t, v, _| Ok(t.softmax(&v[0])))),
        ("mean_pool", vec![randn(&[2, 3, 4], 17)?], none(), Box::new(|t, v, _| t.mean_pool(&v[0]))),
        (
            "weighted_sum",
            vec![randn(&[3], 18)?],
            none(),
            Box::new(|t, v, _| t.weighted_sum(&v[0], &[0.2, -1.0, 3.0])),
        ),
        ("sum", vec![randn(&[2, 2], 19)?], none(), Box::new(|t, v, _| Ok(t.sum(&v[0])))),
    ];
    let labels: Rc<[usize]> = vec![2, 0, 1].into();
    cases.push((
        "cross_entropy",
        vec![randn(&[3, 4], 20)?],
        none(),
        Box::new(move |t, v, _| t.cross_entropy(&v[0], &labels)),
    ));
    let tokens: Rc<[usize]> = vec![1, 4, 1, 0, 1, 2].into();
    cases.push((
        "embedding",
        vec![],
        store(vec![("e", randn(&[5, 3], 21)?)])?,
        Box::new(move |t, _, p| t.embedding(&tokens, [2, 3], p.get("e")?)),
    ));
    for nl in Nonlinearity::ALL {
        let x = randn(&[4, 6], 15)?.map(Category::Activations, |v| if v.abs() < 1e-3 { 0.5 } else { v });
        cases.push((
            match nl {
                Nonlinearity::Relu => "relu",
                Nonlinearity::Gelu => "gelu",
                Nonlinearity::Tanh => "tanh",
                Nonlinearity::Identity => "identity",
            },
            vec![x],
            none(),
            Box::new(move |t, v, _| Ok(t.activation(&v[0], nl))),
        ));
    }
    for (name, inputs, params, f) in cases {
        let err = op_gradcheck(inputs, params, f.as_ref())?;
        c.bound(format!("op {name}"), err, 1e-4, "max relative error over all coordinates");
    }
    Ok(())
}

fn gradcheck_suite(c: &mut Checks) -> Result<()> {
    op_checks(c)?;
    let batch = random_batch(3, 4, 11, 3, 5)?;
    for kind in ArchKind::ALL {
        let mut m = perturbed(kind, 2, &tiny_tuning(), 1)?;
        let (err, at) = worst_gradcheck(&mut m, &batch, 12)?;
        c.bound(format!("arch {kind}"), err, 1e-4, at);
    }
    for f in FKind::ALL {
        let mut t = tiny_tuning();
        t.rev.f_kind = f;
        let mut m = perturbed(ArchKind::Reversible, 2, &t, 2)?;
        let (err, at) = worst_gradcheck(&mut m, &batch, 12)?;
        c.bound(format!("reversible F {f}"), err, 1e-4, at);
    }
    for nl in Nonlinearity::ALL {
        let mut m: Mlp<f64> = Mlp::new(9, &[5, 7, 4], 3, 3, nl, 4)?;
        let b = random_batch(4, 3, 9, 3, 6)?;
        let (err, at) = worst_gradcheck(&mut m, &b, 12)?;
        c.bound(format!("mlp {nl:?}").to_lowercase(), err, 1e-4, at);
    }
    Ok(())
}

fn rel_frobenius(a: &BTreeMap<String, Tensor<f64>>, b: &BTreeMap<String, Tensor<f64>>) -> f64 {
    if a.keys().ne(b.keys()) {
        return f64::INFINITY;
    }
    a.iter()
        .map(|(k, x)| {
            let y = &b[k];
            let num = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            num / y.sq_norm().sqrt().max(1e-12)
        })
        .fold(0.0, f64::max)
}

fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12))
        .fold(0.0, f64::max)
}

/// Per-example squared norms and the clipped sum from one backward per example.
fn naive_clipped(
    model: &impl PerExampleModel<f64>,
    batch: &Batch,
    clip_bound: f64,
) -> Result<(Vec<f64>, BTreeMap<String, Tensor<f64>>)> {
    let per = naive_per_sample_grads(model, batch)?;
    let sq: Vec<f64> = per.iter().map(|g| g.values().map(|t| t.sq_norm()).sum()).collect();
    let mut sum: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for (g, &s) in per.iter().zip(&sq) {
        let f = if s == 0.0 { 1.0 } else { (clip_bound / s.sqrt()).min(1.0) };
        for (name, t) in g {
            let scaled = t.map(Category::Gradients, |v| v * f);
            match sum.get_mut(name) {
                Some(acc) => acc.axpy_inplace(1.0, &scaled)?,
                None => {
                    sum.insert(name.clone(), scaled);
                }
            }
        }
    }
    Ok((sq, sum))
}

fn ghostnorm_suite(c: &mut Checks) -> Result<()> {
    let mut rng = SeededRng::new(0x6057);
    let (mut worst_norm, mut worst_sum) = ((0.0, String::new()), (0.0, String::new()));
    let cases = 200;
    for case in 0..cases {
        let depth = 1 + rng.below(4);
        let widths: Vec<usize> = (0..depth).map(|_| 1 + rng.below(16)).collect();
        let (seq, b) = (1 + rng.below(8), 1 + rng.below(8));
        let bound = [0.05, 0.5, 5.0, 1e6][rng.below(4)];
        let seed = rng.next_u64();
        let m: Mlp<f64> = Mlp::new(9, &widths, seq, 3, Nonlinearity::Tanh, seed)?;
        let batch = random_batch(b, seq, 9, 3, seed ^ 0x5eed)?;
        let (sq, sum) = naive_clipped(&m, &batch, bound)?;
        let shapes = m.layer_shapes(seq);
        for (label, plan) in [
            ("mixopt", ClipPlan::mixopt(&shapes, bound)),
            ("ghost", ClipPlan::uniform(&shapes, Strategy::GhostNorm, bound)),
            ("instantiate", ClipPlan::uniform(&shapes, Strategy::Instantiate, bound)),
        ] {
            let step = bk_clip_step(&m, &batch, &plan)?;
            let where_ = || format!("case {case} ({label}, widths {widths:?}, T {seq}, B {b}, C {bound})");
            let e = rel_vec(&step.norms.sq_norms, &sq);
            if e > worst_norm.0 || e.is_nan() {
                worst_norm = (e, where_());
            }
            let e = rel_frobenius(&step.grads, &sum);
            if e > worst_sum.0 || e.is_nan() {
                worst_sum = (e, where_());
            }
        }
    }
    c.bound(
        format!("per-sample norms vs oracle ({cases} configs)"),
        worst_norm.0,
        1e-8,
        format!("max relative error at {}", worst_norm.1),
    );
    c.bound(
        format!("clipped sums vs oracle ({cases} configs)"),
        worst_sum.0,
        1e-8,
        format!("max relative error at {}", worst_sum.1),
    );

    let batch = random_batch(3, 4, 11, 3, 21)?;
    for kind in ArchKind::ALL {
        let m = perturbed(kind, 2, &tiny_tuning(), 3)?;
        let (sq, sum) = naive_clipped(&m, &batch, 0.5)?;
        let step = dp_clip_step(&m, &batch, &ClipPlan::mixopt(&m.layer_shapes(4), 0.5))?;
        let e = rel_vec(&step.norms.sq_norms, &sq).max(rel_frobenius(&step.grads, &sum));
        c.bound(format!("arch {kind} clip step vs oracle"), e, 1e-8, "max relative error");
    }

    let mut mismatches = Vec::new();
    let mut total = 0;
    for t in 1..=64 {
        for p in (1..=256).step_by(5) {
            for d in (1..=256).step_by(7) {
                total += 1;
                let (ghost, inst) = (2 * t * t, p * d);
                let want = if ghost <= inst { Strategy::GhostNorm } else { Strategy::Instantiate };
                if choose_strategy(t, p, d) != want && mismatches.len() < 5 {
                    mismatches.push(format!("T={t},p={p},d={d}"));
                }
            }
        }
    }
    let mut tie_ok = true;
    for (t, p, d) in [(4, 8, 4), (8, 16, 8), (2, 1, 8)] {
        tie_ok &= choose_strategy(t, p, d) == Strategy::GhostNorm;
    }
    c.flag(
        "mixopt selection",
        mismatches.is_empty() && tie_ok,
        format!("{total} grid points, mismatches {mismatches:?}, ties to ghost norm: {tie_ok}"),
    );
    Ok(())
}

fn max_abs<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn gaussian_stream(seed: u64) -> Result<Tensor<f64>> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_vec(&[2, 4, 8], (0..64).map(|_| rng.gaussian()).collect(), Category::Activations)
}

fn reversible_suite(c: &mut Checks) -> Result<()> {
    for exchange in [Exchange::Once, Exchange::EveryBlock, Exchange::Never] {
        for f in FKind::ALL {
            let mut t = tiny_tuning();
            t.rev.exchange = exchange;
            t.rev.f_kind = f;
            t.rev.alpha = 0.9;
            t.rev.beta = 0.8;
            let m = perturbed(ArchKind::Reversible, 3, &t, 11)?;
            let mut worst = 0.0f64;
            for i in 0..3 {
                let (x1, x2) = (gaussian_stream(1 + i as u64)?, gaussian_stream(7 + i as u64)?);
                let (y1, y2) = m.rev_block_forward(i, x1.clone(), x2.clone())?;
                let (r1, r2) = m.rev_inverse(i, y1, y2)?;
                worst = worst.max(max_abs(&x1, &r1)).max(max_abs(&x2, &r2));
            }
            c.bound(
                format!("block inverse f64 ({exchange:?}, {f})").to_lowercase(),
                worst,
                1e-10,
                "max-abs error over 3 blocks",
            );
        }
    }

    let mut bb = tiny_backbone(8);
    bb.depth = 8;
    let m: Model<f32> = build_model(ArchKind::Reversible, &bb, &tiny_tuning(), 3)?;
    let batch = random_batch(2, 4, 11, 3, 2)?;
    let (state, _) = m.rev_forward(&batch)?;
    let (mut a, mut b) = (state.x1, state.x2);
    for i in (0..8).rev() {
        (a, b) = m.rev_inverse(i, a, b)?;
    }
    let embed = m.params().get("embed")?.value();
    let d = bb.width;
    let mut worst = 0.0f64;
    for (r, &tok) in batch.tokens().iter().enumerate() {
        for j in 0..d {
            let want = embed.data()[tok * d + j].as_f64();
            worst = worst
                .max((a.data()[r * d + j].as_f64() - want).abs())
                .max((b.data()[r * d + j].as_f64() - want).abs());
        }
    }
    c.bound("depth-8 chain f32", worst, 1e-4, "max-abs error reconstructing the embedding");

    let batch = random_batch(3, 4, 11, 3, 13)?;
    for f in FKind::ALL {
        let mut t = tiny_tuning();
        t.rev.alpha = 0.7;
        t.rev.f_kind = f;
        let m = perturbed(ArchKind::Reversible, 6, &t, 5)?;
        let mut rev = GradCollector::sum();
        m.loss_backward(&batch, None, &mut rev)?;
        let m = m.with_retain(RetainPolicy::StoreAll);
        let mut all = GradCollector::sum();
        m.loss_backward(&batch, None, &mut all)?;
        c.bound(
            format!("recompute vs store-all backward ({f})"),
            rel_frobenius(&rev.into_grads(), &all.into_grads()),
            1e-8,
            "max relative gradient error, depth 6",
        );
    }
    Ok(())
}

fn accountant_suite(c: &mut Checks) -> Result<()> {
    let (delta, q, steps) = (2e-5, 32.0 / 50_000.0, 10_000);
    for target in [1.6, 8.0] {
        let sigma = calibrate_sigma(target, delta, q, steps)?;
        let eps = epsilon_for(sigma, delta, q, steps)?.epsilon;
        c.flag(
            format!("calibration round trip eps={target}"),
            (0.99 * target..=target).contains(&eps),
            format!("sigma {sigma:.6}, recomputed eps {eps:.6}"),
        );
    }

    let eps = |s: f64, q: f64, n: u64| epsilon_for(s, 1e-5, q, n).map(|r| r.epsilon);
    let sigmas = [0.5, 0.7, 1.0, 1.5, 2.5, 4.0];
    let by_sigma = sigmas.iter().map(|&s| eps(s, 0.01, 1000)).collect::<Result<Vec<_>>>()?;
    c.flag(
        "epsilon decreasing in sigma",
        by_sigma.windows(2).all(|w| w[1] < w[0]),
        format!("{by_sigma:.4?}"),
    );
    let by_steps = [10, 100, 1000, 10_000]
        .iter()
        .map(|&n| eps(1.0, 0.01, n))
        .collect::<Result<Vec<_>>>()?;
    c.flag(
        "epsilon increasing in steps",
        by_steps.windows(2).all(|w| w[1] > w[0]),
        format!("{by_steps:.4?}"),
    );
    let by_q = [0.001, 0.01, 0.05, 0.2, 1.0]
        .iter()
        .map(|&q| eps(1.0, q, 100))
        .collect::<Result<Vec<_>>>()?;
    c.flag(
        "epsilon increasing in q",
        by_q.windows(2).all(|w| w[1] > w[0]),
        format!("{by_q:.4?}"),
    );

    let mut worst = 0.0f64;
    for (s, a) in [(0.7, 2.25), (1.3, 7.0), (3.0, 64.0), (1.0, 1.5)] {
        let got = rdp_subsampled_gaussian(1.0, s, &[a])?[0];
        worst = worst.max((got - a / (2.0 * s * s)).abs());
    }
    c.bound("full-batch closed form", worst, 1e-12, "max-abs gap to alpha/(2 sigma^2)");

    let single = epsilon_for(2.0, 1e-5, 1.0, 1)?.epsilon;
    c.bound(
        "single full-batch step",
        (single - 2.524263).abs(),
        5e-4,
        format!("eps {single:.6} vs continuous optimum 2.524263"),
    );
    Ok(())
}

fn memconf_suite(c: &mut Checks) -> Result<()> {
    let report = default_conformance()?;
    for s in &report.scaling {
        let fit = s.fit;
        c.out.push(Check {
            suite: c.suite,
            name: format!("{} vs {}", s.name, s.variable),
            pass: s.pass,
            value: Some((fit.exponent - s.expected_exponent).abs()),
            threshold: Some(s.tolerance),
            detail: format!(
                "exponent {:.4} (want {}), r^2 {:.4}, bytes {:?}",
                fit.exponent, s.expected_exponent, fit.r_squared, s.measured_bytes
            ),
        });
    }
    let side = &report.side;
    c.bound(
        "side activation share",
        side.worst_relative_gap,
        0.2,
        format!("reductions {:?}, measured/model {:?}", side.reductions, side.shares),
    );
    Ok(())
}
