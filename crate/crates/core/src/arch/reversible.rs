//! Two-stream coupled blocks
//!
//! ```text
//! y¹ = α x¹ + F(x²)        x² = (y² − G(y¹)) / β
//! y² = β x² + G(y¹)        x¹ = (y¹ − F(x²)) / α
//! ```
//!
//! Both streams start from the embedding and the classifier reads
//! `(x¹_N + x²_N) / 2`. Forward keeps only the current pair; backward
//! reconstructs each block's inputs from its outputs, replays that single
//! block on a local tape and pushes the stream cotangents through it.

use super::{reduce_losses, ArchKind, Exchange, FKind, Inject, Model};
use crate::autodiff::{GradCollector, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ledger::{self, Category, Phase};
use crate::tensor::{Element, Tensor};

/// The stream pair after some block.
#[derive(Debug, Clone, PartialEq)]
pub struct RevState<T: Element> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    /// Number of blocks applied.
    pub block: usize,
}

impl<T: Element> Model<T> {
    fn require_rev(&self) -> Result<()> {
        if self.kind != ArchKind::Reversible {
            return Err(Error::State(format!(
                "reversible operation on a `{}` model",
                self.kind
            )));
        }
        Ok(())
    }

    /// Whether the streams trade places after block `i`.
    pub fn swaps_after(&self, i: usize) -> bool {
        match self.tuning.rev.exchange {
            Exchange::Once => i == 0,
            Exchange::EveryBlock => true,
            Exchange::Never => false,
        }
    }

    fn rev_f(&self, tape: &Tape<T>, i: usize, x: &Var<T>) -> Result<Var<T>> {
        let inject = match self.tuning.rev.f_kind {
            FKind::LoraFfn => Inject::Lora { masked: false },
            FKind::DyloraLike => Inject::Lora { masked: true },
            FKind::ParallelAdapter => Inject::ParallelAdapter,
            FKind::PrefixLike => Inject::Prefix,
        };
        self.ffn(tape, i, x, inject)
    }

    fn rev_g(&self, tape: &Tape<T>, i: usize, y: &Var<T>) -> Result<Var<T>> {
        self.adapter(tape, &format!("block{i}.g"), y)
    }

    /// Block `i` followed by its exchange, on whatever `tape` records.
    fn rev_block(&self, tape: &Tape<T>, i: usize, x1: &Var<T>, x2: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (alpha, beta) = (self.tuning.rev.alpha, self.tuning.rev.beta);
        let f = self.rev_f(tape, i, x2)?;
        let y1 = tape.axpby(alpha, x1, 1.0, &f)?;
        drop(f);
        let g = self.rev_g(tape, i, &y1)?;
        let y2 = tape.axpby(beta, x2, 1.0, &g)?;
        Ok(if self.swaps_after(i) { (y2, y1) } else { (y1, y2) })
    }

    /// Apply block `i` (with its exchange) to a pair, recording nothing.
    pub fn rev_block_forward(&self, i: usize, x1: Tensor<T>, x2: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.require_rev()?;
        let tape = Tape::new();
        tape.no_grad(|| {
            let (a, b) = self.rev_block(&tape, i, &Var::constant(x1), &Var::constant(x2))?;
            Ok((a.into_tensor(), b.into_tensor()))
        })
    }

    /// Recover block `i`'s inputs from its (post-exchange) outputs.
    pub fn rev_inverse(&self, i: usize, y1: Tensor<T>, y2: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.require_rev()?;
        let (y1, y2) = if self.swaps_after(i) { (y2, y1) } else { (y1, y2) };
        let (alpha, beta) = (self.tuning.rev.alpha, self.tuning.rev.beta);
        let tape = Tape::new();
        tape.no_grad(|| {
            let (y1, y2) = (Var::constant(y1), Var::constant(y2));
            let g = self.rev_g(&tape, i, &y1)?;
            let x2 = tape.axpby(1.0 / beta, &y2, -1.0 / beta, &g)?;
            drop((g, y2));
            let f = self.rev_f(&tape, i, &x2)?;
            let x1 = tape.axpby(1.0 / alpha, &y1, -1.0 / alpha, &f)?;
            Ok((x1.into_tensor(), x2.into_tensor()))
        })
    }

    /// `‖x²_N − r_N‖ / ‖r_N‖`, where `r` runs the same frozen blocks as a
    /// plain residual stack without any injected module.
    pub fn rev_identity_gap(&self, batch: &Batch) -> Result<f64> {
        let (state, _) = self.rev_forward(batch)?;
        let tape = Tape::new();
        let reference = tape.no_grad(|| {
            let mut x = self.embed(&tape, batch)?;
            for i in 0..self.backbone.depth {
                let f = self.ffn(&tape, i, &x, Inject::None)?;
                x = tape.add(&x, &f)?;
            }
            Ok::<_, Error>(x.into_tensor())
        })?;
        let num: f64 = state
            .x2
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let den: f64 = reference.data().iter().map(|v| v.as_f64().powi(2)).sum();
        Ok((num / den).sqrt())
    }

    fn rev_embed(&self, batch: &Batch) -> Result<Tensor<T>> {
        let tape = Tape::new();
        tape.no_grad(|| self.embed(&tape, batch)).map(Var::into_tensor)
    }

    /// Run all blocks keeping only the current pair; returns the final pair
    /// and the logits.
    pub fn rev_forward(&self, batch: &Batch) -> Result<(RevState<T>, Tensor<T>)> {
        self.require_rev()?;
        self.check_batch(batch)?;
        let x0 = self.rev_embed(batch)?;
        let mut x1 = x0.copy_as(Category::Activations);
        let mut x2 = x0;
        for i in 0..self.backbone.depth {
            (x1, x2) = self.rev_block_forward(i, x1, x2)?;
        }
        let tape = Tape::new();
        let (v1, v2) = (Var::constant(x1), Var::constant(x2));
        let logits = tape.no_grad(|| self.rev_head(&tape, &v1, &v2))?;
        Ok((
            RevState {
                x1: v1.into_tensor(),
                x2: v2.into_tensor(),
                block: self.backbone.depth,
            },
            logits.into_tensor(),
        ))
    }

    fn rev_head(&self, tape: &Tape<T>, x1: &Var<T>, x2: &Var<T>) -> Result<Var<T>> {
        let mean = tape.axpby(0.5, x1, 0.5, x2)?;
        self.head(tape, &mean)
    }

    /// Reference path: every block recorded on one tape.
    pub(super) fn rev_logits_store_all(&self, tape: &Tape<T>, batch: &Batch) -> Result<Var<T>> {
        let x0 = self.embed(tape, batch)?;
        let (mut x1, mut x2) = (x0.clone(), x0);
        for i in 0..self.backbone.depth {
            let (a, b) = self.rev_block(tape, i, &x1, &x2)?;
            x1 = a;
            x2 = b;
        }
        self.rev_head(tape, &x1, &x2)
    }

    /// Backward by reconstruction: constant activation memory in depth.
    pub(super) fn rev_loss_backward(
        &self,
        batch: &Batch,
        weights: Option<&[f64]>,
        collector: &mut GradCollector<T>,
    ) -> Result<Vec<f64>> {
        ledger::set_phase(Phase::Forward);
        let (state, _) = self.rev_forward(batch)?;
        let RevState { x1, x2, .. } = state;

        let tape = Tape::new();
        let v1 = tape.input(x1, true);
        let v2 = tape.input(x2, true);
        let logits = self.rev_head(&tape, &v1, &v2)?;
        let losses = tape.cross_entropy(&logits, batch.labels())?;
        drop(logits);
        let out = losses.value().to_f64_vec();
        let total = reduce_losses(&tape, &losses, weights)?;
        drop(losses);
        ledger::set_phase(Phase::Backward);
        let mut leaves = tape.backward(&total, collector)?;
        let missing = || Error::State("reversible backward lost a stream cotangent".into());
        let mut g1 = leaves.take(&v1).ok_or_else(missing)?;
        let mut g2 = leaves.take(&v2).ok_or_else(missing)?;
        drop((leaves, total, tape));
        let (mut x1, mut x2) = (v1.into_tensor(), v2.into_tensor());

        for i in (0..self.backbone.depth).rev() {
            let (p1, p2) = self.rev_inverse(i, x1, x2)?;
            let local = Tape::new();
            let a = local.input(p1, true);
            let b = local.input(p2, true);
            let (y1, y2) = self.rev_block(&local, i, &a, &b)?;
            let mut leaves = local.backward_from(vec![(y1, g1), (y2, g2)], collector)?;
            g1 = leaves.take(&a).ok_or_else(missing)?;
            g2 = leaves.take(&b).ok_or_else(missing)?;
            drop((leaves, local));
            x1 = a.into_tensor();
            x2 = b.into_tensor();
        }
        Ok(out)
    }
}
