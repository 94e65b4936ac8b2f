//! Autoregressive decoding: greedy and beam search with length
//! normalization. Pure functions of the parameters; deterministic.

use crate::tensor::Graph;

use super::forward::{bind_params, decode_logits, encode};
use super::{IdMatrix, ModelConfig, ModelError, TransformerParams, BOS, EOS};

/// Greedy argmax decoding, one source row at a time. Stops on EOS or after
/// `max_steps` emissions; the returned sequence excludes BOS and EOS. Ties
/// resolve to the lower token id.
pub fn greedy_decode(
    params: &TransformerParams,
    cfg: &ModelConfig,
    sources: &[Vec<u32>],
    max_steps: usize,
) -> Result<Vec<Vec<u32>>, ModelError> {
    let mut out = Vec::with_capacity(sources.len());
    for src in sources {
        out.push(greedy_one(params, cfg, src, max_steps)?);
    }
    Ok(out)
}

fn greedy_one(
    params: &TransformerParams,
    cfg: &ModelConfig,
    src: &[u32],
    max_steps: usize,
) -> Result<Vec<u32>, ModelError> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false);
    let src_mat = IdMatrix::from_rows(&[src.to_vec()]);
    let src_len = [src.len().max(1)];
    let enc_out = encode(&mut g, &bound, cfg, &src_mat, &src_len)?;

    let mut tokens: Vec<u32> = Vec::new();
    for _ in 0..max_steps.min(cfg.max_len.saturating_sub(1)) {
        let mut dec_row = vec![BOS];
        dec_row.extend_from_slice(&tokens);
        let t = dec_row.len();
        let dec_in = IdMatrix::from_rows(&[dec_row]);
        let logits = decode_logits(
            &mut g,
            &bound,
            cfg,
            enc_out,
            src_mat.cols,
            &src_len,
            &dec_in,
            &[t],
        )?;
        let data = g.value(logits).data();
        let last = &data[(t - 1) * cfg.vocab..t * cfg.vocab];
        let next = argmax(last) as u32;
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    Ok(tokens)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    raw: f64,
    finished: bool,
}

impl Hypothesis {
    /// Sum of token log-probabilities divided by length^alpha; the length
    /// counts every emission including the terminating EOS.
    fn normalized(&self, alpha: f64) -> f64 {
        let n = self.tokens.len().max(1) as f64;
        self.raw / n.powf(alpha)
    }
}

/// Beam search with score `sum-logprob / length^alpha`. Hypotheses that emit
/// EOS stay in the beam frozen; the best hypothesis by normalized score is
/// returned regardless of whether it finished. With width 1 and alpha 0 this
/// reduces to greedy decoding token for token. Ties during expansion resolve
/// by lower token id, then lower beam index.
pub fn beam_decode(
    params: &TransformerParams,
    cfg: &ModelConfig,
    sources: &[Vec<u32>],
    width: usize,
    lennorm_alpha: f64,
    max_steps: usize,
) -> Result<Vec<Vec<u32>>, ModelError> {
    if width < 1 {
        return Err(ModelError::BeamWidth(width));
    }
    let mut out = Vec::with_capacity(sources.len());
    for src in sources {
        out.push(beam_one(params, cfg, src, width, lennorm_alpha, max_steps)?);
    }
    Ok(out)
}

fn beam_one(
    params: &TransformerParams,
    cfg: &ModelConfig,
    src: &[u32],
    width: usize,
    alpha: f64,
    max_steps: usize,
) -> Result<Vec<u32>, ModelError> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false);
    let src_mat = IdMatrix::from_rows(&[src.to_vec()]);
    let src_len = src.len().max(1);
    let enc_out = encode(&mut g, &bound, cfg, &src_mat, &[src_len])?;
    let s = src_mat.cols;
    let v = cfg.vocab;

    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        raw: 0.0,
        finished: false,
    }];

    for step in 0..max_steps.min(cfg.max_len.saturating_sub(1)) {
        let live: Vec<usize> = (0..beams.len()).filter(|&i| !beams[i].finished).collect();
        if live.is_empty() {
            break;
        }
        // One batched decoder pass over all live beams; the encoder output is
        // replicated per beam by gathering its rows.
        let b = live.len();
        let rep: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let enc_rep = g.gather_rows(enc_out, &rep)?;
        let rows: Vec<Vec<u32>> = live
            .iter()
            .map(|&i| {
                let mut r = vec![BOS];
                r.extend_from_slice(&beams[i].tokens);
                r
            })
            .collect();
        let t = step + 1;
        let dec_in = IdMatrix::from_rows(&rows);
        let logits = decode_logits(
            &mut g,
            &bound,
            cfg,
            enc_rep,
            s,
            &vec![src_len; b],
            &dec_in,
            &vec![t; b],
        )?;
        let data = g.value(logits).data();

        // (normalized score, token, origin slot, raw score, finished)
        let mut candidates: Vec<(f64, u32, usize, f64, bool)> = Vec::new();
        for (slot, hyp) in beams.iter().enumerate() {
            if hyp.finished {
                candidates.push((hyp.normalized(alpha), EOS, slot, hyp.raw, true));
            }
        }
        for (bi, &slot) in live.iter().enumerate() {
            let row = &data[(bi * t + (t - 1)) * v..(bi * t + t) * v];
            let logp = log_softmax(row);
            for (tok, &lp) in logp.iter().enumerate() {
                let raw = beams[slot].raw + lp;
                // Normalized score at the candidate's new length.
                let n = (beams[slot].tokens.len() + 1) as f64;
                let norm = raw / n.powf(alpha);
                candidates.push((norm, tok as u32, slot, raw, false));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(width);

        beams = candidates
            .into_iter()
            .map(|(_, tok, slot, raw, carried)| {
                if carried {
                    beams[slot].clone()
                } else {
                    let mut tokens = beams[slot].tokens.clone();
                    tokens.push(tok);
                    Hypothesis {
                        tokens,
                        raw,
                        finished: tok == EOS,
                    }
                }
            })
            .collect();
    }

    let best = beams
        .into_iter()
        .max_by(|a, b| {
            a.normalized(alpha)
                .partial_cmp(&b.normalized(alpha))
                .unwrap()
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .expect("at least one beam");
    let mut tokens = best.tokens;
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok(tokens)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + z.ln();
    row.iter().map(|v| v - log_z).collect()
}

/// Normalized score of a token sequence under the model, using the same
/// convention as [`beam_decode`]. The sequence is scored as emitted tokens
/// followed by EOS unless it already ends with one or `finished` is false.
pub fn score_sequence(
    params: &TransformerParams,
    cfg: &ModelConfig,
    src: &[u32],
    emissions: &[u32],
    alpha: f64,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false);
    let src_mat = IdMatrix::from_rows(&[src.to_vec()]);
    let src_len = src.len().max(1);
    let enc_out = encode(&mut g, &bound, cfg, &src_mat, &[src_len])?;
    let mut dec_row = vec![BOS];
    dec_row.extend_from_slice(emissions);
    let t = dec_row.len();
    let dec_in = IdMatrix::from_rows(&[dec_row]);
    let logits = decode_logits(
        &mut g,
        &bound,
        cfg,
        enc_out,
        src_mat.cols,
        &[src_len],
        &dec_in,
        &[t],
    )?;
    let data = g.value(logits).data();
    let mut raw = 0.0;
    for (i, &tok) in emissions.iter().enumerate() {
        let row = &data[i * cfg.vocab..(i + 1) * cfg.vocab];
        raw += log_softmax(row)[tok as usize];
    }
    let n = emissions.len().max(1) as f64;
    Ok(raw / n.powf(alpha))
}
