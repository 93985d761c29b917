//! Byte-exact accounting of live tensor memory.
//!
//! Every [`Tensor`](crate::tensor::Tensor) reports its allocation when it is
//! created and its release when it is dropped. While a [`Session`] is active
//! on the current thread those events are folded into running per-category
//! totals, peaks and phase statistics. Without an active session the hooks
//! are no-ops.
//!
//! Sessions nest: an event is delivered to every session on the thread's
//! stack, so an outer measurement still sees what an inner one records.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a buffer is used for. Assigned once, at the creation site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Weights,
    Activations,
    Gradients,
    OptimizerState,
    DpBuffers,
    Scratch,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Weights,
        Category::Activations,
        Category::Gradients,
        Category::OptimizerState,
        Category::DpBuffers,
        Category::Scratch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Weights => "weights",
            Category::Activations => "activations",
            Category::Gradients => "gradients",
            Category::OptimizerState => "optimizer_state",
            Category::DpBuffers => "dp_buffers",
            Category::Scratch => "scratch",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Categories allowed to outlive a run without counting as a leak.
    pub fn is_persistent(self) -> bool {
        matches!(self, Category::Weights | Category::OptimizerState)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    Clip,
    Optimize,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Forward, Phase::Backward, Phase::Clip, Phase::Optimize];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::Clip => "clip",
            Phase::Optimize => "optimize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Alloc,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemEvent {
    pub seq: u64,
    pub tensor: u64,
    pub bytes: u64,
    pub category: Category,
    pub direction: Direction,
    pub step: usize,
    pub phase: Phase,
    pub scope: Option<&'static str>,
}

#[derive(Debug, Clone, Copy)]
struct LiveEntry {
    bytes: u64,
    category: Category,
    scope: Option<&'static str>,
}

/// Options for a measurement session.
#[derive(Debug, Clone, Copy, Default)]
pub struct SessionOptions {
    /// Keep the full event log (memory-hungry on long runs).
    pub keep_events: bool,
}

/// Accumulated state of one measurement session.
#[derive(Debug, Default)]
pub struct Ledger {
    opts: SessionOptions,
    seq: u64,
    events: Vec<MemEvent>,
    live: HashMap<u64, LiveEntry>,
    live_by_cat: [u64; 6],
    peak_by_cat: [u64; 6],
    alloc_by_cat: [u64; 6],
    freed_by_cat: [u64; 6],
    live_total: u64,
    peak_total: u64,
    phase: Option<Phase>,
    phase_peak: [u64; 4],
    step: usize,
    in_step: bool,
    step_peak: u64,
    step_peaks: Vec<u64>,
    samples: Vec<u64>,
    scope_stack: Vec<&'static str>,
    scope_live: BTreeMap<(&'static str, Category), u64>,
    scope_peak: BTreeMap<(&'static str, Category), u64>,
}

impl Ledger {
    fn new(opts: SessionOptions) -> Self {
        Ledger {
            opts,
            ..Default::default()
        }
    }

    fn alloc(&mut self, tensor: u64, bytes: u64, category: Category) {
        if bytes == 0 {
            return;
        }
        let scope = self.scope_stack.last().copied();
        self.live.insert(
            tensor,
            LiveEntry {
                bytes,
                category,
                scope,
            },
        );
        let c = category.index();
        self.live_by_cat[c] += bytes;
        self.alloc_by_cat[c] += bytes;
        self.peak_by_cat[c] = self.peak_by_cat[c].max(self.live_by_cat[c]);
        self.live_total += bytes;
        self.peak_total = self.peak_total.max(self.live_total);
        self.step_peak = self.step_peak.max(self.live_total);
        if let Some(p) = self.phase {
            let slot = &mut self.phase_peak[p as usize];
            *slot = (*slot).max(self.live_total);
        }
        if let Some(s) = scope {
            let live = self.scope_live.entry((s, category)).or_default();
            *live += bytes;
            let peak = self.scope_peak.entry((s, category)).or_default();
            *peak = (*peak).max(*live);
        }
        self.log(tensor, bytes, category, Direction::Alloc, scope);
    }

    fn free(&mut self, tensor: u64) {
        // tensors created before the session started are not ours
        let Some(entry) = self.live.remove(&tensor) else {
            return;
        };
        let c = entry.category.index();
        self.live_by_cat[c] -= entry.bytes;
        self.freed_by_cat[c] += entry.bytes;
        self.live_total -= entry.bytes;
        if let Some(s) = entry.scope {
            if let Some(live) = self.scope_live.get_mut(&(s, entry.category)) {
                *live -= entry.bytes;
            }
        }
        self.log(tensor, entry.bytes, entry.category, Direction::Free, entry.scope);
    }

    fn log(
        &mut self,
        tensor: u64,
        bytes: u64,
        category: Category,
        direction: Direction,
        scope: Option<&'static str>,
    ) {
        self.seq += 1;
        if self.opts.keep_events {
            self.events.push(MemEvent {
                seq: self.seq,
                tensor,
                bytes,
                category,
                direction,
                step: self.step,
                phase: self.phase.unwrap_or(Phase::Forward),
                scope,
            });
        }
    }

    fn set_phase(&mut self, phase: Phase) {
        self.phase = Some(phase);
        self.samples.push(self.live_total);
        let slot = &mut self.phase_peak[phase as usize];
        *slot = (*slot).max(self.live_total);
    }

    fn begin_step(&mut self, step: usize) {
        if self.in_step {
            self.step_peaks.push(self.step_peak);
        }
        self.step = step;
        self.in_step = true;
        self.step_peak = self.live_total;
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_total
    }

    pub fn live_bytes_in(&self, category: Category) -> u64 {
        self.live_by_cat[category.index()]
    }

    pub fn events(&self) -> &[MemEvent] {
        &self.events
    }

    /// Snapshot of the statistics gathered so far.
    pub fn report(&self) -> MemReport {
        let by_cat = |arr: &[u64; 6]| {
            Category::ALL
                .iter()
                .map(|c| (c.as_str().to_string(), arr[c.index()]))
                .collect::<BTreeMap<_, _>>()
        };
        let mut step_peaks = self.step_peaks.clone();
        if self.in_step {
            step_peaks.push(self.step_peak);
        }
        let mean_live = if self.samples.is_empty() {
            0.0
        } else {
            self.samples.iter().map(|&s| s as f64).sum::<f64>() / self.samples.len() as f64
        };
        let mut per_phase_peak = BTreeMap::new();
        for p in Phase::ALL {
            per_phase_peak.insert(p.as_str().to_string(), self.phase_peak[p as usize]);
        }
        let mut scope_peak_activations = BTreeMap::new();
        for ((scope, cat), peak) in &self.scope_peak {
            if *cat == Category::Activations {
                scope_peak_activations.insert(scope.to_string(), *peak);
            }
        }
        MemReport {
            peak_total: self.peak_total,
            mean_live,
            end_live: self.live_total,
            peak_by_category: by_cat(&self.peak_by_cat),
            end_live_by_category: by_cat(&self.live_by_cat),
            allocated_by_category: by_cat(&self.alloc_by_cat),
            freed_by_category: by_cat(&self.freed_by_cat),
            per_phase_peak,
            step_peaks,
            scope_peak_activations,
        }
    }

    fn leaked(&self) -> Vec<(u64, u64)> {
        let mut ids: Vec<(u64, u64)> = self
            .live
            .iter()
            .filter(|(_, e)| !e.category.is_persistent())
            .map(|(id, e)| (*id, e.bytes))
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Categorized memory statistics of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MemReport {
    pub peak_total: u64,
    /// Average live bytes over phase-boundary samples.
    pub mean_live: f64,
    pub end_live: u64,
    pub peak_by_category: BTreeMap<String, u64>,
    pub end_live_by_category: BTreeMap<String, u64>,
    pub allocated_by_category: BTreeMap<String, u64>,
    pub freed_by_category: BTreeMap<String, u64>,
    pub per_phase_peak: BTreeMap<String, u64>,
    pub step_peaks: Vec<u64>,
    /// Peak activation bytes per named model region (e.g. "backbone", "side").
    pub scope_peak_activations: BTreeMap<String, u64>,
}

impl MemReport {
    pub fn peak(&self, category: Category) -> u64 {
        self.peak_by_category
            .get(category.as_str())
            .copied()
            .unwrap_or(0)
    }

    pub fn scope_activations(&self, scope: &str) -> u64 {
        self.scope_peak_activations.get(scope).copied().unwrap_or(0)
    }

    /// Per-step peaks as a two-column CSV.
    pub fn step_peaks_csv(&self) -> String {
        let mut out = String::from("step,peak_bytes\n");
        for (i, p) in self.step_peaks.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i, p));
        }
        out
    }
}

thread_local! {
    static STACK: RefCell<Vec<Ledger>> = const { RefCell::new(Vec::new()) };
    static PAUSED: std::cell::Cell<u32> = const { std::cell::Cell::new(0) };
}

fn with_all(f: impl Fn(&mut Ledger)) {
    if PAUSED.with(|p| p.get()) > 0 {
        return;
    }
    STACK.with(|s| {
        if let Ok(mut stack) = s.try_borrow_mut() {
            for l in stack.iter_mut() {
                f(l);
            }
        }
    });
}

pub(crate) fn on_alloc(tensor: u64, bytes: u64, category: Category) {
    with_all(|l| l.alloc(tensor, bytes, category));
}

pub(crate) fn on_free(tensor: u64) {
    with_all(|l| l.free(tensor));
}

/// Mark a phase boundary (also takes a mean-live sample).
pub fn set_phase(phase: Phase) {
    with_all(|l| l.set_phase(phase));
}

pub fn begin_step(step: usize) {
    with_all(|l| l.begin_step(step));
}

/// Live bytes seen by the innermost session, or 0 without one.
pub fn live_bytes() -> u64 {
    STACK.with(|s| s.borrow().last().map(|l| l.live_total).unwrap_or(0))
}

pub fn is_active() -> bool {
    STACK.with(|s| !s.borrow().is_empty())
}

/// Run `f` with a named region label attached to allocations made inside it.
pub fn scoped<R>(scope: &'static str, f: impl FnOnce() -> R) -> R {
    with_all(|l| l.scope_stack.push(scope));
    let out = f();
    with_all(|l| {
        l.scope_stack.pop();
    });
    out
}

/// Run `f` without recording. Tensors must not cross the boundary: anything
/// allocated inside should be dropped inside, and nothing tracked may be freed.
pub fn untracked<R>(f: impl FnOnce() -> R) -> R {
    PAUSED.with(|p| p.set(p.get() + 1));
    let out = f();
    PAUSED.with(|p| p.set(p.get() - 1));
    out
}

/// A measurement session bound to the current thread.
///
/// Dropping the handle without calling [`Session::finish`] discards it.
#[must_use]
pub struct Session {
    depth: usize,
    done: bool,
}

impl Session {
    pub fn start() -> Self {
        Self::with_options(SessionOptions::default())
    }

    pub fn with_options(opts: SessionOptions) -> Self {
        let depth = STACK.with(|s| {
            let mut s = s.borrow_mut();
            s.push(Ledger::new(opts));
            s.len()
        });
        Session { depth, done: false }
    }

    pub fn report(&self) -> MemReport {
        STACK.with(|s| s.borrow()[self.depth - 1].report())
    }

    pub fn live_bytes(&self) -> u64 {
        STACK.with(|s| s.borrow()[self.depth - 1].live_total)
    }

    pub fn live_bytes_in(&self, category: Category) -> u64 {
        STACK.with(|s| s.borrow()[self.depth - 1].live_bytes_in(category))
    }

    fn pop(&mut self) -> Ledger {
        self.done = true;
        STACK.with(|s| {
            let mut s = s.borrow_mut();
            assert_eq!(s.len(), self.depth, "ledger sessions must close innermost first");
            s.pop().expect("session stack underflow")
        })
    }

    /// Close the session and return the raw ledger.
    pub fn into_ledger(mut self) -> Ledger {
        self.pop()
    }

    /// Close the session; fails if any non-persistent tensor is still live.
    pub fn finish(mut self) -> Result<MemReport> {
        let ledger = self.pop();
        let leaked = ledger.leaked();
        if !leaked.is_empty() {
            return Err(Error::Leak {
                bytes: leaked.iter().map(|(_, b)| b).sum(),
                ids: leaked.into_iter().map(|(id, _)| id).collect(),
            });
        }
        Ok(ledger.report())
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if !self.done {
            self.pop();
        }
    }
}

/// Run `f` under a fresh session and return its result with the report.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MemReport) {
    let session = Session::start();
    let out = f();
    (out, session.into_ledger().report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn empty_run_is_all_zeros() {
        let report = Session::start().finish().unwrap();
        assert_eq!(report.peak_total, 0);
        assert_eq!(report.end_live, 0);
        assert!(report.peak_by_category.values().all(|&v| v == 0));
        assert_eq!(report.mean_live, 0.0);
    }

    #[test]
    fn single_f64_tensor_peaks_at_80_bytes() {
        let session = Session::start();
        {
            let t = Tensor::<f64>::zeros(&[10], Category::Activations);
            assert_eq!(t.len(), 10);
        }
        let report = session.finish().unwrap();
        assert_eq!(report.peak_total, 80);
        assert_eq!(report.end_live, 0);
        assert_eq!(report.peak(Category::Activations), 80);
    }

    #[test]
    fn leak_is_reported_with_ids() {
        let session = Session::start();
        let t = Tensor::<f32>::zeros(&[4], Category::Gradients);
        let id = t.id();
        std::mem::forget(t);
        match session.finish() {
            Err(Error::Leak { ids, bytes }) => {
                assert_eq!(ids, vec![id]);
                assert_eq!(bytes, 16);
            }
            other => panic!("expected leak, got {other:?}"),
        }
    }

    #[test]
    fn persistent_categories_are_not_leaks() {
        let session = Session::start();
        let w = Tensor::<f32>::zeros(&[3], Category::Weights);
        let report = session.finish().unwrap();
        assert_eq!(report.end_live, 12);
        drop(w);
    }

    #[test]
    fn conservation_per_category() {
        let session = Session::start();
        let a = Tensor::<f64>::zeros(&[5], Category::Activations);
        let b = Tensor::<f64>::zeros(&[7], Category::Activations);
        let c = Tensor::<f32>::zeros(&[2], Category::DpBuffers);
        drop(a);
        let r = session.report();
        for cat in Category::ALL {
            let k = cat.as_str();
            assert_eq!(
                r.allocated_by_category[k] - r.freed_by_category[k],
                r.end_live_by_category[k]
            );
        }
        assert_eq!(r.end_live, 7 * 8 + 2 * 4);
        drop((b, c));
        session.finish().unwrap();
    }

    #[test]
    fn nested_sessions_both_observe() {
        let outer = Session::start();
        let inner = Session::start();
        let t = Tensor::<f64>::zeros(&[2], Category::Scratch);
        drop(t);
        let ri = inner.finish().unwrap();
        let ro = outer.finish().unwrap();
        assert_eq!(ri.peak_total, 16);
        assert_eq!(ro.peak_total, 16);
    }

    #[test]
    fn scopes_track_activation_peaks() {
        let session = Session::start();
        scoped("side", || {
            let _a = Tensor::<f64>::zeros(&[4], Category::Activations);
            let _g = Tensor::<f64>::zeros(&[4], Category::Gradients);
        });
        let r = session.finish().unwrap();
        assert_eq!(r.scope_activations("side"), 32);
        assert_eq!(r.scope_activations("backbone"), 0);
    }

    #[test]
    fn phase_samples_feed_mean_live() {
        let session = Session::start();
        set_phase(Phase::Forward);
        let t = Tensor::<f64>::zeros(&[10], Category::Activations);
        set_phase(Phase::Backward);
        drop(t);
        set_phase(Phase::Clip);
        set_phase(Phase::Optimize);
        let r = session.finish().unwrap();
        assert!((r.mean_live - 20.0).abs() < 1e-12);
        assert_eq!(r.per_phase_peak["forward"], 80);
        assert_eq!(r.per_phase_peak["clip"], 0);
    }
}
