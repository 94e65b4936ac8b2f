//! Synthetic sequence-to-sequence corpora and batching. Integer tokens, no
//! subword machinery: the tasks (copy, reverse, sort) are stand-ins whose
//! target side is computable, so models can be verified against the task
//! definition itself. A TSV loader accepts pre-tokenized data.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{IdMatrix, BOS, EOS, PAD, RESERVED_IDS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid length range {lo}..={hi}")]
    InvalidRange { lo: usize, hi: usize },
    #[error("vocab {vocab} too small; needs at least {} (reserved ids + 1 symbol)", RESERVED_IDS + 1)]
    VocabTooSmall { vocab: usize },
    #[error("corpus empty after dropping over-length pairs (dropped {dropped})")]
    EmptyAfterFilter { dropped: usize },
    #[error("batch size must be >= 1")]
    ZeroBatchSize,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("token id {id} at line {line} exceeds vocab {vocab}")]
    IdOutOfRange { id: u32, line: usize, vocab: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    File,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::File => "file",
        };
        write!(f, "{s}")
    }
}

/// Paired id sequences. Targets always end with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub vocab: usize,
    pub task: TaskKind,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|(s, _)| s.clone()).collect()
    }

    /// Reference targets with the trailing EOS stripped.
    pub fn target_contents(&self) -> Vec<Vec<u32>> {
        self.pairs
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                if t.last() == Some(&EOS) {
                    t.pop();
                }
                t
            })
            .collect()
    }
}

/// Deterministic synthetic corpus. Source tokens are drawn uniformly from the
/// non-reserved alphabet with lengths in `len_range`; the target is the
/// task's function of the source plus EOS.
pub fn gen_synthetic(
    task: TaskKind,
    n: usize,
    len_range: (usize, usize),
    vocab: usize,
    seed: u64,
) -> Result<Corpus, DataError> {
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(DataError::InvalidRange { lo, hi });
    }
    if vocab <= RESERVED_IDS as usize {
        return Err(DataError::VocabTooSmall { vocab });
    }
    if task == TaskKind::File {
        return Err(DataError::Parse {
            line: 0,
            msg: "file task requires load_tsv".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(lo..=hi);
        let src: Vec<u32> = (0..len)
            .map(|_| rng.gen_range(RESERVED_IDS..vocab as u32))
            .collect();
        let mut tgt = match task {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = src.clone();
                t.sort_unstable();
                t
            }
            TaskKind::File => unreachable!(),
        };
        tgt.push(EOS);
        pairs.push((src, tgt));
    }
    Ok(Corpus { pairs, vocab, task })
}

/// Loads a tab-separated corpus: one pair per line, space-separated ids,
/// a tab between source and target. Appends EOS to targets lacking one.
pub fn load_tsv(path: &Path, vocab: usize) -> Result<Corpus, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (src_str, tgt_str) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: line_no,
            msg: "missing tab separator".into(),
        })?;
        let parse_side = |side: &str| -> Result<Vec<u32>, DataError> {
            side.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|e| DataError::Parse {
                        line: line_no,
                        msg: format!("bad token {tok:?}: {e}"),
                    })
                })
                .collect()
        };
        let src = parse_side(src_str)?;
        let mut tgt = parse_side(tgt_str)?;
        for &id in src.iter().chain(tgt.iter()) {
            if id as usize >= vocab {
                return Err(DataError::IdOutOfRange {
                    id,
                    line: line_no,
                    vocab,
                });
            }
        }
        if tgt.last() != Some(&EOS) {
            tgt.push(EOS);
        }
        pairs.push((src, tgt));
    }
    Ok(Corpus {
        pairs,
        vocab,
        task: TaskKind::File,
    })
}

/// Writes a corpus in the TSV format accepted by [`load_tsv`].
pub fn save_tsv(path: &Path, corpus: &Corpus) -> Result<(), DataError> {
    let mut out = String::new();
    for (src, tgt) in &corpus.pairs {
        let fmt_side = |ids: &[u32]| {
            ids.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        out.push_str(&fmt_side(src));
        out.push('\t');
        out.push_str(&fmt_side(tgt));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Borrowed train/validation pair handed to training procedures.
#[derive(Clone, Copy)]
pub struct TrainDataSplit<'a> {
    pub train: &'a Corpus,
    pub valid: &'a Corpus,
}

/// One padded training batch. Targets include EOS; sources and targets sit
/// in separate buffers so targets are unreachable through source data.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: IdMatrix,
    pub tgt: IdMatrix,
    pub src_len: Vec<usize>,
    pub tgt_len: Vec<usize>,
    /// Corpus indices of the pairs in this batch, in row order.
    pub pair_idx: Vec<usize>,
}

impl Batch {
    fn from_pairs(corpus: &Corpus, idx: &[usize]) -> Batch {
        let srcs: Vec<Vec<u32>> = idx.iter().map(|&i| corpus.pairs[i].0.clone()).collect();
        let tgts: Vec<Vec<u32>> = idx.iter().map(|&i| corpus.pairs[i].1.clone()).collect();
        Batch {
            src_len: srcs.iter().map(Vec::len).collect(),
            tgt_len: tgts.iter().map(Vec::len).collect(),
            src: IdMatrix::from_rows(&srcs),
            tgt: IdMatrix::from_rows(&tgts),
            pair_idx: idx.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.src.rows
    }

    /// Decoder input: BOS followed by the target minus its last token,
    /// padded like the target matrix.
    pub fn decoder_input(&self) -> IdMatrix {
        let rows: Vec<Vec<u32>> = (0..self.tgt.rows)
            .map(|r| {
                let len = self.tgt_len[r];
                let mut row = Vec::with_capacity(self.tgt.cols);
                row.push(BOS);
                row.extend_from_slice(&self.tgt.row(r)[..len - 1]);
                while row.len() < self.tgt.cols {
                    row.push(PAD);
                }
                row
            })
            .collect();
        IdMatrix::from_rows(&rows)
    }

    /// Per-position mask over the flattened `[B*T]` target grid; true marks
    /// padding rows excluded from losses and accuracy.
    pub fn target_pad_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.tgt.rows * self.tgt.cols];
        for r in 0..self.tgt.rows {
            for c in self.tgt_len[r]..self.tgt.cols {
                mask[r * self.tgt.cols + c] = true;
            }
        }
        mask
    }
}

/// Epoch batcher: drops over-length pairs once, then yields shuffled batches
/// with a per-epoch derived seed. Same seed, same batches.
#[derive(Debug, Clone)]
pub struct Batcher {
    kept: Vec<usize>,
    dropped: usize,
    batch_size: usize,
}

impl Batcher {
    /// `max_len` bounds both sides; longer pairs are dropped and counted.
    pub fn new(corpus: &Corpus, batch_size: usize, max_len: usize) -> Result<Batcher, DataError> {
        if batch_size == 0 {
            return Err(DataError::ZeroBatchSize);
        }
        let mut kept = Vec::with_capacity(corpus.len());
        let mut dropped = 0;
        for (i, (src, tgt)) in corpus.pairs.iter().enumerate() {
            if src.len() <= max_len && tgt.len() <= max_len && !src.is_empty() {
                kept.push(i);
            } else {
                dropped += 1;
            }
        }
        if kept.is_empty() {
            return Err(DataError::EmptyAfterFilter { dropped });
        }
        Ok(Batcher {
            kept,
            dropped,
            batch_size,
        })
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Kept corpus indices in original order.
    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn kept(&self) -> usize {
        self.kept.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.kept.len().div_ceil(self.batch_size)
    }

    /// Batches for one epoch, shuffled with a seed derived from
    /// `(seed, epoch)`.
    pub fn epoch_batches(&self, corpus: &Corpus, seed: u64, epoch: usize) -> Vec<Batch> {
        let mut order = self.kept.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(|chunk| Batch::from_pairs(corpus, chunk))
            .collect()
    }
}

/// Splits one derived stream per (seed, salt) pair; used so data shuffling,
/// initialization, and generator initialization never share a stream.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt)
        .rotate_left(17)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
}
