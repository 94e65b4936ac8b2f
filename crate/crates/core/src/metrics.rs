//! Evaluation: token accuracy, corpus BLEU (multi-bleu conventions, no
//! smoothing), and single-threaded decoding throughput.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{greedy_decode, ModelConfig, ModelError, TransformerParams};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis count {hyps} != reference count {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("reference {index} is empty")]
    EmptyReference { index: usize },
    #[error("prediction/gold shape mismatch: {pred} vs {gold}")]
    ShapeMismatch { pred: usize, gold: usize },
    #[error("empty benchmark sample")]
    EmptySample,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One evaluation's results plus the resolved config that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub bleu: f64,
    pub sentences_per_second: f64,
    pub params_count: usize,
    pub config: serde_json::Value,
}

/// Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram
/// precisions up to `max_n`, times the brevity penalty, computed from
/// corpus-aggregated counts with no smoothing. Short sentences contribute
/// their shorter n-grams to the aggregate; a zero precision at any order
/// zeroes the score.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>], max_n: usize) -> Result<f64, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if let Some(index) = refs.iter().position(|r| r.is_empty()) {
        return Err(EvalError::EmptyReference { index });
    }
    let max_n = max_n.max(1);
    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[u32], u64> = HashMap::new();
            if reference.len() >= n {
                for gram in reference.windows(n) {
                    *ref_counts.entry(gram).or_default() += 1;
                }
            }
            for gram in hyp.windows(n) {
                total[n - 1] += 1;
                if let Some(c) = ref_counts.get_mut(gram) {
                    if *c > 0 {
                        *c -= 1;
                        matched[n - 1] += 1;
                    }
                }
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * precision * bp)
}

/// Fraction of unmasked positions where the prediction equals gold.
pub fn token_accuracy(pred: &[u32], gold: &[u32], pad_mask: &[bool]) -> Result<f64, EvalError> {
    if pred.len() != gold.len() || pred.len() != pad_mask.len() {
        return Err(EvalError::ShapeMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let mut hit = 0usize;
    let mut kept = 0usize;
    for i in 0..pred.len() {
        if pad_mask[i] {
            continue;
        }
        kept += 1;
        if pred[i] == gold[i] {
            hit += 1;
        }
    }
    if kept == 0 {
        return Ok(0.0);
    }
    Ok(hit as f64 / kept as f64)
}

/// Row-wise argmax of `[n, v]` logits as token ids (ties to the lower id).
pub fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let shape = logits.shape();
    let v = *shape.last().expect("non-empty shape");
    let rows = logits.numel() / v;
    let data = logits.data();
    (0..rows)
        .map(|r| {
            let row = &data[r * v..(r + 1) * v];
            let mut best = 0usize;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Greedy-decoding throughput: after one untimed warm-up pass, decodes the
/// sample `repeats` times and reports sentences/second per run plus the
/// median. Single-threaded; model load and warm-up are excluded from timing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub per_run: Vec<f64>,
    pub median: f64,
}

pub fn bench_decode(
    params: &TransformerParams,
    cfg: &ModelConfig,
    sample: &[Vec<u32>],
    max_steps: usize,
    repeats: usize,
) -> Result<BenchResult, EvalError> {
    if sample.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let repeats = repeats.max(1);
    greedy_decode(params, cfg, sample, max_steps)?;
    let mut per_run = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        greedy_decode(params, cfg, sample, max_steps)?;
        let elapsed = start.elapsed().as_secs_f64();
        per_run.push(sample.len() as f64 / elapsed.max(1e-12));
    }
    let mut sorted = per_run.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(BenchResult { per_run, median })
}

/// Median of a small sample, by value.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn perfect_hypotheses_score_exactly_100() {
        let refs = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 3, 4]];
        let bleu = corpus_bleu(&refs, &refs, 4).unwrap();
        assert_eq!(bleu, 100.0);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let refs = vec![vec![3, 4, 5, 6], vec![7, 8, 9, 3]];
        let hyps = vec![vec![], vec![]];
        assert_eq!(corpus_bleu(&hyps, &refs, 4).unwrap(), 0.0);
    }

    #[test]
    fn two_sentence_case_matches_hand_counted_oracle() {
        // Hyp 1: [3 4 5 3], ref 1: [3 4 5 6]
        //   1-grams: matched 3 (3,4,5; second 3 clipped), total 4
        //   2-grams: matched 2 (34,45), total 3
        //   3-grams: matched 1 (345), total 2
        //   4-grams: matched 0, total 1
        // Hyp 2: [7 8 9 3 4], ref 2: [7 8 9 3 4]
        //   adds 5/5, 4/4, 3/3, 2/2 fully matched.
        let hyps = vec![vec![3, 4, 5, 3], vec![7, 8, 9, 3, 4]];
        let refs = vec![vec![3, 4, 5, 6], vec![7, 8, 9, 3, 4]];
        let p: [f64; 4] = [
            (3.0 + 5.0) / (4.0 + 5.0),
            (2.0 + 4.0) / (3.0 + 4.0),
            (1.0 + 3.0) / (2.0 + 3.0),
            (0.0 + 2.0) / (1.0 + 2.0),
        ];
        let expect = 100.0 * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
        let got = corpus_bleu(&hyps, &refs, 4).unwrap();
        assert!((got - expect).abs() < 1e-6, "got {got}, expect {expect}");
    }

    #[test]
    fn brevity_penalty_punishes_short_output() {
        let refs = vec![vec![3, 4, 5, 6, 7, 8]];
        let hyps = vec![vec![3, 4, 5, 6]];
        let got = corpus_bleu(&hyps, &refs, 4).unwrap();
        // Precisions are perfect; only BP remains.
        let expect = 100.0 * (1.0_f64 - 6.0 / 4.0).exp();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_100_iff_identical() {
        let refs = vec![vec![3, 4, 5, 6]];
        assert_eq!(corpus_bleu(&refs, &refs, 4).unwrap(), 100.0);
        let close = vec![vec![3, 4, 5, 7]];
        assert!(corpus_bleu(&close, &refs, 4).unwrap() < 100.0);
        // Longer-but-matching also falls short of 100.
        let longer = vec![vec![3, 4, 5, 6, 6]];
        assert!(corpus_bleu(&longer, &refs, 4).unwrap() < 100.0);
    }

    #[test]
    fn appending_identical_pair_keeps_perfect_score() {
        let mut refs = vec![vec![3, 4, 5, 6, 7]];
        let bleu1 = corpus_bleu(&refs, &refs, 4).unwrap();
        refs.push(vec![8, 9, 4, 3]);
        let bleu2 = corpus_bleu(&refs, &refs, 4).unwrap();
        assert_eq!(bleu1, 100.0);
        assert_eq!(bleu2, 100.0);
    }

    #[test]
    fn bleu_validates_inputs() {
        assert!(matches!(
            corpus_bleu(&[vec![3]], &[], 4),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            corpus_bleu(&[vec![3]], &[vec![]], 4),
            Err(EvalError::EmptyReference { index: 0 })
        ));
    }

    #[test]
    fn accuracy_extremes() {
        let gold = vec![3, 4, 5, 6];
        let mask = vec![false; 4];
        assert_eq!(token_accuracy(&gold, &gold, &mask).unwrap(), 1.0);
        let wrong = vec![4, 5, 6, 7];
        assert_eq!(token_accuracy(&wrong, &gold, &mask).unwrap(), 0.0);
        assert!(token_accuracy(&wrong, &gold[..3].to_vec(), &mask).is_err());
    }

    #[test]
    fn accuracy_ignores_masked_positions() {
        let gold = vec![3, 4, 5, 6];
        let pred = vec![3, 4, 9, 9];
        let mask = vec![false, false, true, true];
        assert_eq!(token_accuracy(&pred, &gold, &mask).unwrap(), 1.0);
    }

    #[test]
    fn random_predictions_hit_chance_rate() {
        // 1e4 uniform guesses over 4 symbols: within 3 binomial sigma of 1/4.
        let n = 10_000usize;
        let mut state = 99u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) % 4) as u32 + 3
        };
        let pred: Vec<u32> = (0..n).map(|_| next()).collect();
        let gold: Vec<u32> = (0..n).map(|_| next()).collect();
        let mask = vec![false; n];
        let acc = token_accuracy(&pred, &gold, &mask).unwrap();
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        assert!(
            (acc - 0.25).abs() < 3.0 * sigma,
            "acc {acc}, sigma {sigma}"
        );
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_id() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn bench_reports_requested_run_count_and_positive_throughput() {
        let cfg = ModelConfig::new(1, 1, 4, 1, 6, 8);
        let params = init_params(&cfg, 1).unwrap();
        let sample: Vec<Vec<u32>> = (0..4).map(|i| vec![3 + (i % 3) as u32, 4]).collect();
        let res = bench_decode(&params, &cfg, &sample, 4, 5).unwrap();
        assert_eq!(res.per_run.len(), 5);
        assert!(res.median > 0.0);
        assert!(res.per_run.iter().all(|&v| v > 0.0));
        assert!(matches!(
            bench_decode(&params, &cfg, &[], 4, 5),
            Err(EvalError::EmptySample)
        ));
    }
}
