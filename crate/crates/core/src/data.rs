//! Synthetic sequence-classification task, dataset files and batches.
//!
//! Each token has a fixed random embedding `e_v ∈ R^16` and each class a unit
//! direction `u_c`. A sequence is labelled `argmax_c ⟨u_c, mean_t e_{x_t}⟩`;
//! sequences whose top-two scores are closer than the margin are redrawn, so
//! the label is a deterministic, well-separated function of the input.
//!
//! File format: one header line, then `tok tok ... tok<TAB>label` per line.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DATASET_SCHEMA: &str = "dpmem-dataset/1";
const FEATURE_DIM: usize = 16;
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub margin: f64,
}

impl SyntheticTask {
    pub fn new(seed: u64, vocab: usize, seq_len: usize, num_classes: usize) -> Self {
        SyntheticTask {
            seed,
            vocab,
            seq_len,
            num_classes,
            margin: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic task needs vocab >= 2, seq_len >= 1, classes >= 2 (got {}, {}, {})",
                self.vocab, self.seq_len, self.num_classes
            )));
        }
        Ok(())
    }

    /// The fixed token embeddings and class directions of this task.
    pub fn rule(&self) -> TaskRule {
        let mut rng = SeededRng::new(self.seed).fork(0x5eed_7a5c);
        let embeddings = (0..self.vocab * FEATURE_DIM).map(|_| rng.gaussian()).collect();
        let mut directions: Vec<f64> = (0..self.num_classes * FEATURE_DIM)
            .map(|_| rng.gaussian())
            .collect();
        for row in directions.chunks_mut(FEATURE_DIM) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        TaskRule {
            embeddings,
            directions,
            num_classes: self.num_classes,
        }
    }

    /// A `[vocab, width]` token table linear in the task's token features,
    /// standing in for a backbone pretrained on this distribution.
    pub fn backbone_embedding(&self, width: usize) -> Vec<f64> {
        let rule = self.rule();
        let mut rng = SeededRng::new(self.seed).fork(0xe3bed);
        let std = (FEATURE_DIM as f64).recip().sqrt();
        let proj: Vec<f64> = (0..FEATURE_DIM * width).map(|_| std * rng.gaussian()).collect();
        let mut out = vec![0.0; self.vocab * width];
        for (tok, row) in out.chunks_mut(width).enumerate() {
            let e = &rule.embeddings[tok * FEATURE_DIM..(tok + 1) * FEATURE_DIM];
            for (k, &ek) in e.iter().enumerate() {
                for (o, &p) in row.iter_mut().zip(&proj[k * width..(k + 1) * width]) {
                    *o += ek * p;
                }
            }
        }
        out
    }

    /// `n` distinct, margin-filtered examples.
    pub fn generate(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<Example>> {
        self.validate()?;
        let rule = self.rule();
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut redraws = 0;
        while out.len() < n {
            let tokens: Vec<usize> = (0..self.seq_len).map(|_| rng.below(self.vocab)).collect();
            let (label, gap) = rule.score(&tokens);
            if gap < self.margin || !seen.insert(tokens.clone()) {
                redraws += 1;
                if redraws > MAX_REDRAWS.max(20 * n) {
                    return Err(Error::Config(format!(
                        "could not draw {n} distinct examples with margin {} (vocab {}, T {})",
                        self.margin, self.vocab, self.seq_len
                    )));
                }
                continue;
            }
            out.push(Example { tokens, label });
        }
        Ok(out)
    }

    /// Disjoint train/val/test splits from one seeded draw.
    pub fn generate_splits(&self, sizes: SplitSizes) -> Result<Splits> {
        if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        let mut rng = SeededRng::new(self.seed).fork(0xda7a);
        let mut all = self.generate(sizes.train + sizes.val + sizes.test, &mut rng)?;
        rng.shuffle(&mut all);
        let test = all.split_off(sizes.train + sizes.val);
        let val = all.split_off(sizes.train);
        let mk = |examples| Dataset {
            task_seed: Some(self.seed),
            vocab: self.vocab,
            seq_len: self.seq_len,
            num_classes: self.num_classes,
            examples,
        };
        Ok(Splits {
            train: mk(all),
            val: mk(val),
            test: mk(test),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TaskRule {
    embeddings: Vec<f64>,
    directions: Vec<f64>,
    num_classes: usize,
}

impl TaskRule {
    /// `(label, top-1 minus top-2 score)`.
    pub fn score(&self, tokens: &[usize]) -> (usize, f64) {
        let mut mean = [0.0; FEATURE_DIM];
        for &tok in tokens {
            for (m, e) in mean.iter_mut().zip(&self.embeddings[tok * FEATURE_DIM..]) {
                *m += e;
            }
        }
        mean.iter_mut().for_each(|m| *m /= tokens.len() as f64);
        let scores: Vec<f64> = (0..self.num_classes)
            .map(|c| {
                self.directions[c * FEATURE_DIM..(c + 1) * FEATURE_DIM]
                    .iter()
                    .zip(&mean)
                    .map(|(u, m)| u * m)
                    .sum()
            })
            .collect();
        let mut best = 0;
        for c in 1..scores.len() {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        let runner_up = scores
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != best)
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        (best, scores[best] - runner_up)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 50_000,
            val: 1_000,
            test: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Seed of the synthetic task that produced the examples, if known.
    pub task_seed: Option<u64>,
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub const FILES: [&'static str; 3] = ["train.txt", "val.txt", "test.txt"];

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ds) in Self::FILES.iter().zip([&self.train, &self.val, &self.test]) {
            ds.write(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let [train, val, test] = Self::FILES.map(|name| Dataset::read(&dir.join(name)));
        Ok(Splits {
            train: train?,
            val: val?,
            test: test?,
        })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{DATASET_SCHEMA} vocab={} seq_len={} classes={} n={}",
            self.vocab,
            self.seq_len,
            self.num_classes,
            self.examples.len()
        );
        if let Some(seed) = self.task_seed {
            write!(s, " task_seed={seed}").unwrap();
        }
        s.push('\n');
        for ex in &self.examples {
            for (j, t) in ex.tokens.iter().enumerate() {
                if j > 0 {
                    s.push(' ');
                }
                write!(s, "{t}").unwrap();
            }
            writeln!(s, "\t{}", ex.label).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Data {
            index: 0,
            reason: "empty dataset file".into(),
        })?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(DATASET_SCHEMA) {
            return Err(Error::Data {
                index: 0,
                reason: format!("expected schema `{DATASET_SCHEMA}` in header, got `{header}`"),
            });
        }
        let (mut vocab, mut seq_len, mut classes, mut n, mut task_seed) = (None, None, None, None, None);
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| Error::Data {
                index: 0,
                reason: format!("bad header field `{f}`"),
            })?;
            let v: u64 = v.parse().map_err(|_| Error::Data {
                index: 0,
                reason: format!("bad header value `{f}`"),
            })?;
            if k == "task_seed" {
                task_seed = Some(v);
                continue;
            }
            let v = v as usize;
            match k {
                "vocab" => vocab = Some(v),
                "seq_len" => seq_len = Some(v),
                "classes" => classes = Some(v),
                "n" => n = Some(v),
                _ => {}
            }
        }
        let missing = |k: &str| Error::Data {
            index: 0,
            reason: format!("header is missing `{k}`"),
        };
        let vocab = vocab.ok_or_else(|| missing("vocab"))?;
        let seq_len = seq_len.ok_or_else(|| missing("seq_len"))?;
        let num_classes = classes.ok_or_else(|| missing("classes"))?;

        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = |reason: String| Error::Data { index: i, reason };
            let (toks, label) = line
                .split_once('\t')
                .ok_or_else(|| bad("missing tab before label".into()))?;
            let tokens = toks
                .split(' ')
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("bad token id: {e}")))?;
            let label: usize = label.trim().parse().map_err(|e| bad(format!("bad label: {e}")))?;
            if tokens.len() != seq_len {
                return Err(bad(format!("expected {seq_len} tokens, found {}", tokens.len())));
            }
            if let Some(t) = tokens.iter().find(|&&t| t >= vocab) {
                return Err(bad(format!("token {t} outside vocab {vocab}")));
            }
            if label >= num_classes {
                return Err(bad(format!("label {label} outside {num_classes} classes")));
            }
            examples.push(Example { tokens, label });
        }
        if let Some(n) = n {
            if n != examples.len() {
                return Err(Error::Data {
                    index: examples.len(),
                    reason: format!("header declares {n} examples, file has {}", examples.len()),
                });
            }
        }
        Ok(Dataset {
            task_seed,
            vocab,
            seq_len,
            num_classes,
            examples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Examples at `indices`, as one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = self.examples.get(i).ok_or_else(|| Error::Data {
                index: i,
                reason: format!("example index beyond dataset of {}", self.len()),
            })?;
            tokens.extend_from_slice(&ex.tokens);
            labels.push(ex.label);
        }
        Batch::new(tokens, labels, self.seq_len)
    }
}

/// Token ids `[B, T]` and labels `[B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    tokens: Rc<[usize]>,
    labels: Rc<[usize]>,
    seq: usize,
}

impl Batch {
    pub fn new(tokens: Vec<usize>, labels: Vec<usize>, seq: usize) -> Result<Self> {
        if seq == 0 || tokens.len() != labels.len() * seq {
            return Err(Error::dim("batch", &[tokens.len()], &[labels.len(), seq]));
        }
        Ok(Batch {
            tokens: Rc::from(tokens),
            labels: Rc::from(labels),
            seq,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn tokens(&self) -> &Rc<[usize]> {
        &self.tokens
    }

    pub fn labels(&self) -> &Rc<[usize]> {
        &self.labels
    }

    pub fn example(&self, i: usize) -> Batch {
        self.select(&[i])
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let t = self.seq;
        let tokens: Vec<usize> = indices
            .iter()
            .flat_map(|&i| self.tokens[i * t..(i + 1) * t].iter().copied())
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(tokens, labels, t).expect("consistent by construction")
    }
}
