//! Synthetic token streams.

use super::config::{CorpusKind, CorpusSpec};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::{derive_seed, Rng};

/// Token source for training and evaluation batches.
#[derive(Clone, Debug)]
pub struct Corpus {
    kind: CorpusKind,
    vocab: usize,
    span: usize,
    /// `vocab² × vocab` next-token probabilities, indexed by `(a·V + b)·V + c`.
    table: Vec<f64>,
}

impl Corpus {
    pub fn new(spec: &CorpusSpec, vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::config("corpus vocabulary must have at least two tokens"));
        }
        let table = match spec.kind {
            CorpusKind::Markov => markov_table(spec.seed, vocab, spec.sharpness),
            CorpusKind::Copy => {
                if spec.span == 0 {
                    return Err(Error::config("copy span must be >= 1"));
                }
                Vec::new()
            }
        };
        Ok(Self {
            kind: spec.kind,
            vocab,
            span: spec.span,
            table,
        })
    }

    pub fn kind(&self) -> CorpusKind {
        self.kind
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Next-token distribution after `(a, b)`; `None` for the copy task.
    pub fn transition(&self, a: u32, b: u32) -> Option<&[f64]> {
        if self.table.is_empty() {
            return None;
        }
        let v = self.vocab;
        let start = (a as usize * v + b as usize) * v;
        Some(&self.table[start..start + v])
    }

    /// A stream of `len` tokens determined by `seed`.
    pub fn sequence(&self, seed: u64, len: usize) -> Vec<u32> {
        let mut rng = Rng::new(seed);
        match self.kind {
            CorpusKind::Markov => self.markov_sequence(&mut rng, len),
            CorpusKind::Copy => self.copy_sequence(&mut rng, len),
        }
    }

    /// `sequences` independent windows of `length + 1` tokens.
    pub fn batch(&self, seed: u64, sequences: usize, length: usize) -> Result<Batch> {
        let seqs = (0..sequences)
            .map(|i| self.sequence(derive_seed(seed, &format!("seq/{i}")), length + 1))
            .collect();
        Batch::new(seqs)
    }

    fn markov_sequence(&self, rng: &mut Rng, len: usize) -> Vec<u32> {
        let v = self.vocab;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len.min(2) {
            out.push(rng.below(v) as u32);
        }
        while out.len() < len {
            let n = out.len();
            let probs = self.transition(out[n - 2], out[n - 1]).unwrap_or_default();
            out.push(sample_index(probs, rng.uniform()) as u32);
        }
        out
    }

    /// Chunks of `span` tokens from `1..vocab`, the delimiter `0`, and the
    /// same span again; the stream starts at a random phase.
    fn copy_sequence(&self, rng: &mut Rng, len: usize) -> Vec<u32> {
        let chunk = 2 * self.span + 1;
        let skip = rng.below(chunk);
        let mut out = Vec::with_capacity(len + skip + chunk);
        while out.len() < len + skip {
            let span: Vec<u32> = (0..self.span)
                .map(|_| 1 + rng.below(self.vocab - 1) as u32)
                .collect();
            out.extend_from_slice(&span);
            out.push(0);
            out.extend_from_slice(&span);
        }
        out.drain(..skip);
        out.truncate(len);
        out
    }
}

/// Logits `sharpness·(u[b][c] + w[a][b][c])` with standard gaussian `u`,
/// `w`: the last token alone is informative, the pair more so.
fn markov_table(seed: u64, vocab: usize, sharpness: f64) -> Vec<f64> {
    let mut rng = Rng::derived(seed, "markov-table");
    let bigram: Vec<f64> = (0..vocab * vocab).map(|_| rng.standard_normal()).collect();
    let mut table = Vec::with_capacity(vocab * vocab * vocab);
    for ctx in 0..vocab * vocab {
        let b = ctx % vocab;
        let logits: Vec<f64> = (0..vocab)
            .map(|c| sharpness * (bigram[b * vocab + c] + rng.standard_normal()))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        table.extend(exp.iter().map(|e| e / z));
    }
    table
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// A token stream of `length` tokens.
pub fn generate_corpus(spec: &CorpusSpec, vocab: usize, seed: u64, length: usize) -> Result<Vec<u32>> {
    Ok(Corpus::new(spec, vocab)?.sequence(seed, length))
}
