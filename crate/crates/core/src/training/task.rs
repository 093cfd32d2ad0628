use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// `x ++ x`: the second half repeats the first.
    Copy,
    /// `x ++ reverse(x)`.
    Reverse,
    /// `a_1 .. a_{n-1}, (Σ a_i) mod V`.
    ModularAdd,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularAdd => "modular-add",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "modular-add" | "add" => Ok(Self::ModularAdd),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// One training or evaluation sequence. `targets[i]` is the token expected
/// after `inputs[..=i]`, or `None` where the next token is not determined.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Task {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Full sequence length; the model sees `seq_len - 1` input tokens.
    pub seq_len: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
}

impl Default for Task {
    fn default() -> Self {
        Task::copy(16, 12)
    }
}

impl Task {
    pub fn copy(vocab_size: usize, seq_len: usize) -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size,
            seq_len,
            train_examples: 2048,
            eval_examples: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("task vocab_size must be >= 2".into()));
        }
        let min_len = match self.kind {
            TaskKind::Copy | TaskKind::Reverse => 4,
            TaskKind::ModularAdd => 3,
        };
        if self.seq_len < min_len {
            return Err(Error::Config(format!("{} needs seq_len >= {min_len}", self.kind)));
        }
        if matches!(self.kind, TaskKind::Copy | TaskKind::Reverse) && self.seq_len % 2 != 0 {
            return Err(Error::Config(format!("{} needs an even seq_len", self.kind)));
        }
        if self.train_examples == 0 || self.eval_examples == 0 {
            return Err(Error::Config("task needs at least one train and one eval example".into()));
        }
        Ok(())
    }

    /// Model input length.
    pub fn input_len(&self) -> usize {
        self.seq_len - 1
    }

    /// Training split drawn from stream `(seed, 1)`.
    pub fn train_set(&self, seed: u64) -> Result<Vec<Example>> {
        self.generate(&mut Rng::derive(seed, 1), self.train_examples)
    }

    /// Evaluation split drawn from stream `(seed, 2)`.
    pub fn eval_set(&self, seed: u64) -> Result<Vec<Example>> {
        self.generate(&mut Rng::derive(seed, 2), self.eval_examples)
    }

    fn generate(&self, rng: &mut Rng, count: usize) -> Result<Vec<Example>> {
        self.validate()?;
        Ok((0..count).map(|_| self.example(rng)).collect())
    }

    fn example(&self, rng: &mut Rng) -> Example {
        let v = self.vocab_size;
        let n = self.seq_len;
        let (seq, first_target) = match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                let half: Vec<usize> = (0..n / 2).map(|_| rng.below(v)).collect();
                let mut seq = half.clone();
                if self.kind == TaskKind::Copy {
                    seq.extend_from_slice(&half);
                } else {
                    seq.extend(half.iter().rev());
                }
                (seq, n / 2)
            }
            TaskKind::ModularAdd => {
                let mut seq: Vec<usize> = (0..n - 1).map(|_| rng.below(v)).collect();
                seq.push(seq.iter().sum::<usize>() % v);
                (seq, n - 1)
            }
        };
        let inputs = seq[..n - 1].to_vec();
        let targets = (0..n - 1)
            .map(|i| (i + 1 >= first_target).then(|| seq[i + 1]))
            .collect();
        Example { inputs, targets }
    }
}
