use crate::autodiff::{GradCollector, Nonlinearity, Tape, Var};
use crate::clip::{LayerShape, PerExampleModel};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

use super::{gaussian, layer_shapes_of, reduce_losses};

/// Fully trainable embedding → `Linear+σ` stack → mean-pool → head, with
/// arbitrary layer widths. Used to test per-example clipping on varied shapes.
#[derive(Debug)]
pub struct Mlp<T: Element> {
    params: ParamStore<T>,
    widths: Vec<usize>,
    seq: usize,
    nonlinearity: Nonlinearity,
    num_classes: usize,
}

impl<T: Element> Mlp<T> {
    /// `widths[0]` is the embedding width; each further entry adds a layer.
    pub fn new(
        vocab: usize,
        widths: &[usize],
        seq: usize,
        num_classes: usize,
        nonlinearity: Nonlinearity,
        seed: u64,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || vocab == 0 || seq == 0 || num_classes == 0 {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut params = ParamStore::new();
        params.add("embed", gaussian(&mut rng, &[vocab, widths[0]], 1.0), true)?;
        for (i, pair) in widths.windows(2).enumerate() {
            let std = (pair[0] as f64).recip().sqrt();
            params.add(format!("layer{i}.w"), gaussian(&mut rng, &[pair[0], pair[1]], std), true)?;
            params.add(format!("layer{i}.b"), gaussian(&mut rng, &[pair[1]], 0.1), true)?;
        }
        let last = *widths.last().unwrap();
        let std = (last as f64).recip().sqrt();
        params.add("head.w", gaussian(&mut rng, &[last, num_classes], std), true)?;
        params.add("head.b", gaussian(&mut rng, &[num_classes], 0.1), true)?;
        Ok(Mlp {
            params,
            widths: widths.to_vec(),
            seq,
            nonlinearity,
            num_classes,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn losses(&self, tape: &Tape<T>, batch: &Batch) -> Result<Var<T>> {
        if batch.seq() != self.seq {
            return Err(Error::dim("batch sequence length", &[batch.seq()], &[self.seq]));
        }
        let mut x = tape.embedding(batch.tokens(), [batch.len(), batch.seq()], self.params.get("embed")?)?;
        for i in 0..self.widths.len() - 1 {
            let h = tape.linear(
                &x,
                self.params.get(&format!("layer{i}.w"))?,
                Some(self.params.get(&format!("layer{i}.b"))?),
            )?;
            x = tape.activation(&h, self.nonlinearity);
        }
        let pooled = tape.mean_pool(&x)?;
        let logits = tape.linear(&pooled, self.params.get("head.w")?, Some(self.params.get("head.b")?))?;
        tape.cross_entropy(&logits, batch.labels())
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let tape = Tape::new();
        let l = tape.no_grad(|| self.losses(&tape, batch))?;
        Ok(l.value().to_f64_vec().iter().sum())
    }

    pub fn per_example_losses(&self, batch: &Batch) -> Result<Tensor<T>> {
        let tape = Tape::new();
        tape.no_grad(|| self.losses(&tape, batch)).map(Var::into_tensor)
    }
}

impl<T: Element> PerExampleModel<T> for Mlp<T> {
    fn loss_backward(
        &self,
        batch: &Batch,
        weights: Option<&[f64]>,
        collector: &mut GradCollector<T>,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let losses = self.losses(&tape, batch)?;
        let out = losses.value().to_f64_vec();
        let total = reduce_losses(&tape, &losses, weights)?;
        drop(losses);
        tape.backward(&total, collector)?;
        Ok(out)
    }

    fn layer_shapes(&self, seq: usize) -> Vec<LayerShape> {
        layer_shapes_of(&self.params, seq)
    }
}
