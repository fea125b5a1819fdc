//! Generated toy sequence tasks.
//!
//! Sequence `j` of stream `s` is drawn from its own RNG keyed by
//! `(seed, s, j)`, so any subset of a stream can be regenerated on its own.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Order-2 Markov chain with uniform marginals.
    MarkovChain,
    /// `x_t = (x_{t-1} + x_{t-2}) mod vocab` after two random tokens.
    ModularAddition,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov-chain" | "markov" => Ok(Self::MarkovChain),
            "modular-addition" | "modadd" => Ok(Self::ModularAddition),
            other => Err(Error::invalid(format!(
                "unknown task {other:?} (expected markov-chain or modular-addition)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MarkovChain => "markov-chain",
            Self::ModularAddition => "modular-addition",
        })
    }
}

/// Disjoint sample streams of one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Train,
    Eval,
    Capture,
}

impl Stream {
    fn label(self) -> u64 {
        match self {
            Stream::Train => 0x7472_6169_6e,
            Stream::Eval => 0x6576_616c,
            Stream::Capture => 0x6361_7074,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::MarkovChain,
            vocab_size: 16,
            seq_len: 16,
            seed: 0,
            batch_size: 8,
        }
    }
}

/// Weights of the next-token offsets around the predicted symbol.
const OFFSETS: [(usize, f64); 3] = [(0, 0.8), (1, 0.1), (usize::MAX, 0.1)];
/// Probability that the next symbol is keyed on the token two steps back
/// rather than the previous one.
const SKIP_PROB: f64 = 0.6;

/// Fixed transition structure of the Markov task for a vocabulary size.
///
/// The next symbol is a permutation of either the previous token or the one
/// before it, plus a small offset. Permutations keep every marginal uniform
/// when the first two tokens are uniform.
#[derive(Clone, Debug)]
struct MarkovTable {
    sigma: Vec<usize>,
    pi: Vec<usize>,
}

impl MarkovTable {
    fn new(vocab: usize) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(rng::derive(0x6d61_726b_6f76, &[vocab as u64]));
        let mut perm = || {
            let mut p: Vec<usize> = (0..vocab).collect();
            p.shuffle(&mut r);
            p
        };
        Self {
            sigma: perm(),
            pi: perm(),
        }
    }

    fn next(&self, a: usize, b: usize, r: &mut ChaCha8Rng) -> usize {
        let v = self.sigma.len();
        let base = if r.random::<f64>() < SKIP_PROB {
            self.sigma[a]
        } else {
            self.pi[b]
        };
        let u: f64 = r.random();
        let mut acc = 0.0;
        for &(off, p) in &OFFSETS {
            acc += p;
            if u < acc {
                return if off == usize::MAX {
                    (base + v - 1) % v
                } else {
                    (base + off) % v
                };
            }
        }
        base
    }
}

impl ToyTask {
    pub fn new(kind: TaskKind, vocab_size: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            kind,
            vocab_size,
            seq_len,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("task vocab_size must be >= 2"));
        }
        if self.seq_len < 3 {
            return Err(Error::invalid("task seq_len must be >= 3"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("task batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Sequences `start..start+count` of `stream`.
    pub fn sequences(&self, stream: Stream, start: usize, count: usize) -> Vec<Vec<u32>> {
        let table = match self.kind {
            TaskKind::MarkovChain => Some(MarkovTable::new(self.vocab_size)),
            TaskKind::ModularAddition => None,
        };
        (start..start + count)
            .map(|j| self.sequence_with(table.as_ref(), stream, j))
            .collect()
    }

    /// Batch `index` of `stream` (`batch_size` sequences).
    pub fn batch(&self, stream: Stream, index: usize) -> Vec<Vec<u32>> {
        self.sequences(stream, index * self.batch_size, self.batch_size)
    }

    fn sequence_with(&self, table: Option<&MarkovTable>, stream: Stream, j: usize) -> Vec<u32> {
        let v = self.vocab_size;
        let mut r = rng::rng_for(self.seed, &[stream.label(), j as u64]);
        let mut seq = Vec::with_capacity(self.seq_len);
        seq.push(r.random_range(0..v));
        seq.push(r.random_range(0..v));
        while seq.len() < self.seq_len {
            let (a, b) = (seq[seq.len() - 2], seq[seq.len() - 1]);
            let next = match table {
                Some(t) => t.next(a, b, &mut r),
                None => (a + b) % v,
            };
            seq.push(next);
        }
        seq.into_iter().map(|x| x as u32).collect()
    }
}
