//! Synthetic sequence tasks and a character-level corpus reader.
//!
//! Synthetic sequences are `[x1..xm, SEP, y1..ym]` padded to the context
//! length; only the answer tokens `y` are scored. Token 0 is the
//! separator, 1 is padding, symbols start at 2.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEP: usize = 0;
pub const PAD: usize = 1;
pub const FIRST_SYMBOL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Running sums modulo the number of symbols.
    ModSum,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mod_sum" | "modsum" => Ok(TaskKind::ModSum),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModSum => "mod_sum",
        })
    }
}

/// Token ids and per-position next-token targets for `batch` sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub enum Source {
    Synthetic {
        kind: TaskKind,
        /// Symbols per prompt.
        span: usize,
        symbols: usize,
    },
    Corpus {
        ids: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct Task {
    pub source: Source,
    pub context: usize,
}

impl Task {
    pub fn synthetic(kind: TaskKind, vocab: usize, context: usize, span: Option<usize>) -> Result<Self> {
        if vocab <= FIRST_SYMBOL + 1 {
            return Err(Error::config(format!("vocab {vocab} leaves fewer than two symbols")));
        }
        let span = span.unwrap_or((context.saturating_sub(1)) / 2);
        if span == 0 || 2 * span + 1 > context {
            return Err(Error::config(format!(
                "span {span} does not fit a context of {context}"
            )));
        }
        Ok(Task {
            source: Source::Synthetic {
                kind,
                span,
                symbols: vocab - FIRST_SYMBOL,
            },
            context,
        })
    }

    /// Character-level next-token prediction over a text file.
    pub fn corpus(path: &Path, vocab: usize, context: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Task::corpus_from_text(&text, vocab, context)
    }

    pub fn corpus_from_text(text: &str, vocab: usize, context: usize) -> Result<Self> {
        let chars: BTreeSet<char> = text.chars().collect();
        let sorted: BTreeMap<char, usize> = chars
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, FIRST_SYMBOL + i))
            .collect();
        if FIRST_SYMBOL + sorted.len() > vocab {
            return Err(Error::config(format!(
                "corpus has {} distinct characters, vocab fits {}",
                sorted.len(),
                vocab - FIRST_SYMBOL
            )));
        }
        let ids: Vec<usize> = text.chars().map(|c| sorted[&c]).collect();
        if ids.len() <= context {
            return Err(Error::config(format!(
                "corpus of {} characters is shorter than the context",
                ids.len()
            )));
        }
        Ok(Task {
            source: Source::Corpus { ids },
            context,
        })
    }

    /// One sequence of `context` tokens with its targets.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<usize>, Vec<Option<usize>>) {
        let n = self.context;
        match &self.source {
            Source::Synthetic { kind, span, symbols } => {
                let m = *span;
                let xs: Vec<usize> = (0..m).map(|_| rng.random_range(0..*symbols)).collect();
                let ys = answer(*kind, &xs, *symbols);
                let mut seq: Vec<usize> = xs.iter().map(|x| x + FIRST_SYMBOL).collect();
                seq.push(SEP);
                seq.extend(ys.iter().map(|y| y + FIRST_SYMBOL));
                seq.resize(n, PAD);
                let mut targets = vec![None; n];
                for (i, t) in targets.iter_mut().enumerate().take(2 * m).skip(m) {
                    *t = Some(seq[i + 1]);
                }
                (seq, targets)
            }
            Source::Corpus { ids } => {
                let start = rng.random_range(0..ids.len() - n);
                let seq = ids[start..start + n].to_vec();
                let targets = (0..n).map(|i| Some(ids[start + i + 1])).collect();
                (seq, targets)
            }
        }
    }

    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Batch {
        let mut ids = Vec::with_capacity(batch * self.context);
        let mut targets = Vec::with_capacity(batch * self.context);
        for _ in 0..batch {
            let (s, t) = self.sample(rng);
            ids.extend(s);
            targets.extend(t);
        }
        Batch { ids, targets, batch }
    }

    pub fn stream(&self, seed: u64) -> TaskStream<'_> {
        TaskStream {
            task: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Fixed held-out batches, independent of any training stream.
    pub fn eval_set(&self, seed: u64, batches: usize, batch: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
        (0..batches).map(|_| self.batch(&mut rng, batch)).collect()
    }
}

/// The answer symbols for prompt symbols `xs` (both zero-based).
pub fn answer(kind: TaskKind, xs: &[usize], symbols: usize) -> Vec<usize> {
    match kind {
        TaskKind::Copy => xs.to_vec(),
        TaskKind::Reverse => xs.iter().rev().copied().collect(),
        TaskKind::ModSum => xs
            .iter()
            .scan(0, |acc, &x| {
                *acc = (*acc + x) % symbols;
                Some(*acc)
            })
            .collect(),
    }
}

pub struct TaskStream<'a> {
    task: &'a Task,
    rng: ChaCha8Rng,
}

impl TaskStream<'_> {
    pub fn next_batch(&mut self, batch: usize) -> Batch {
        self.task.batch(&mut self.rng, batch)
    }
}
