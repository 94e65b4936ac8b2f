//! Teacher-forced forward pass over graph ops, usable both with stored
//! parameters and with parameters produced in-graph by a generator.

use std::collections::BTreeMap;

use crate::tensor::{Graph, TensorId};

use super::{
    IdMatrix, ModelConfig, ModelError, Part, TransformerParams, WeightClass, WeightKey,
};

/// Parameters bound into a graph: weight key -> node id. Built either from a
/// [`TransformerParams`] store or assembled from generated tensors.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<WeightKey, TensorId>,
}

impl BoundParams {
    pub fn from_ids(ids: BTreeMap<WeightKey, TensorId>) -> Self {
        BoundParams { ids }
    }

    pub fn get(&self, key: &WeightKey) -> Result<TensorId, ModelError> {
        self.ids
            .get(key)
            .copied()
            .ok_or_else(|| ModelError::MissingWeight(key.to_string()))
    }

    pub fn ids(&self) -> &BTreeMap<WeightKey, TensorId> {
        &self.ids
    }
}

/// Inserts every stored weight into the graph. With `trainable` the leaves
/// receive gradients; otherwise they are constants.
pub fn bind_params(g: &mut Graph, params: &TransformerParams, trainable: bool) -> BoundParams {
    let mut ids = BTreeMap::new();
    for (key, tensor) in params.iter() {
        let id = if trainable {
            g.leaf(tensor.clone().with_grad())
        } else {
            g.constant(tensor.clone())
        };
        ids.insert(*key, id);
    }
    BoundParams::from_ids(ids)
}

/// Teacher-forced logits `[B, T, V]` for a batch of padded source rows and
/// decoder input rows (BOS-shifted targets). Decoder self-attention is
/// causally masked; padded source and target keys are masked out of every
/// attention.
pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    src: &IdMatrix,
    src_len: &[usize],
    dec_in: &IdMatrix,
    dec_len: &[usize],
) -> Result<TensorId, ModelError> {
    validate_ids(cfg, src)?;
    validate_ids(cfg, dec_in)?;
    let enc_out = encode(g, p, cfg, src, src_len)?;
    decode_logits(g, p, cfg, enc_out, src.cols, src_len, dec_in, dec_len)
}

/// Encoder stack output `[B*S, d]`.
pub(super) fn encode(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    src: &IdMatrix,
    src_len: &[usize],
) -> Result<TensorId, ModelError> {
    let b = src.rows;
    let s = src.cols;
    let mut x = embed(g, p, Part::Encoder, src)?;
    let self_mask = attn_mask(b, cfg.heads, s, s, src_len, false);
    for layer in 0..cfg.enc_depth {
        let l = layer as i32;
        let key = |class| WeightKey::new(Part::Encoder, l, class);

        let normed = layer_norm(g, p, x, key(WeightClass::LnG1), key(WeightClass::LnB1))?;
        let attn = attention(
            g,
            p,
            cfg,
            normed,
            normed,
            b,
            s,
            s,
            &self_mask,
            AttnWeights::self_attn(Part::Encoder, l),
        )?;
        x = g.add(x, attn)?;

        let normed = layer_norm(g, p, x, key(WeightClass::LnG2), key(WeightClass::LnB2))?;
        let ff = ffn(g, p, normed, Part::Encoder, l)?;
        x = g.add(x, ff)?;
    }
    layer_norm(
        g,
        p,
        x,
        WeightKey::shared(Part::Encoder, WeightClass::FinalNormGain),
        WeightKey::shared(Part::Encoder, WeightClass::FinalNormBias),
    )
}

/// Decoder stack over a precomputed encoder output, returning `[B, T, V]`.
#[allow(clippy::too_many_arguments)]
pub(super) fn decode_logits(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    enc_out: TensorId,
    src_cols: usize,
    src_len: &[usize],
    dec_in: &IdMatrix,
    dec_len: &[usize],
) -> Result<TensorId, ModelError> {
    let b = dec_in.rows;
    let t = dec_in.cols;
    let mut x = embed(g, p, Part::Decoder, dec_in)?;
    let self_mask = attn_mask(b, cfg.heads, t, t, dec_len, true);
    let cross_mask = attn_mask(b, cfg.heads, t, src_cols, src_len, false);
    for layer in 0..cfg.dec_depth {
        let l = layer as i32;
        let key = |class| WeightKey::new(Part::Decoder, l, class);

        let normed = layer_norm(g, p, x, key(WeightClass::LnG1), key(WeightClass::LnB1))?;
        let attn = attention(
            g,
            p,
            cfg,
            normed,
            normed,
            b,
            t,
            t,
            &self_mask,
            AttnWeights::self_attn(Part::Decoder, l),
        )?;
        x = g.add(x, attn)?;

        let normed = layer_norm(g, p, x, key(WeightClass::LnG2), key(WeightClass::LnB2))?;
        let cross = attention(
            g,
            p,
            cfg,
            normed,
            enc_out,
            b,
            t,
            src_cols,
            &cross_mask,
            AttnWeights::cross_attn(l),
        )?;
        x = g.add(x, cross)?;

        let normed = layer_norm(g, p, x, key(WeightClass::LnG3), key(WeightClass::LnB3))?;
        let ff = ffn(g, p, normed, Part::Decoder, l)?;
        x = g.add(x, ff)?;
    }
    let x = layer_norm(
        g,
        p,
        x,
        WeightKey::shared(Part::Decoder, WeightClass::FinalNormGain),
        WeightKey::shared(Part::Decoder, WeightClass::FinalNormBias),
    )?;
    let proj = p.get(&WeightKey::shared(Part::Decoder, WeightClass::OutputProj))?;
    let logits = g.matmul(x, proj)?;
    Ok(g.reshape(logits, &[b, t, cfg.vocab])?)
}

fn validate_ids(cfg: &ModelConfig, m: &IdMatrix) -> Result<(), ModelError> {
    if m.cols > cfg.max_len {
        return Err(ModelError::LengthOverflow {
            len: m.cols,
            max: cfg.max_len,
        });
    }
    if let Some(&id) = m.data.iter().find(|&&id| id as usize >= cfg.vocab) {
        return Err(ModelError::IdOutOfRange {
            id,
            vocab: cfg.vocab,
        });
    }
    Ok(())
}

/// Token plus learned positional embeddings, `[B*L, d]`.
fn embed(
    g: &mut Graph,
    p: &BoundParams,
    part: Part,
    ids: &IdMatrix,
) -> Result<TensorId, ModelError> {
    let table = p.get(&WeightKey::shared(part, WeightClass::Embed))?;
    let pos_table = p.get(&WeightKey::shared(part, WeightClass::PosEmbed))?;
    let flat: Vec<usize> = ids.data.iter().map(|&v| v as usize).collect();
    let tok = g.gather_rows(table, &flat)?;
    let positions: Vec<usize> = (0..ids.rows).flat_map(|_| 0..ids.cols).collect();
    let pos = g.gather_rows(pos_table, &positions)?;
    Ok(g.add(tok, pos)?)
}

fn layer_norm(
    g: &mut Graph,
    p: &BoundParams,
    x: TensorId,
    gain: WeightKey,
    bias: WeightKey,
) -> Result<TensorId, ModelError> {
    let gain = p.get(&gain)?;
    let bias = p.get(&bias)?;
    Ok(g.layer_norm(x, gain, bias)?)
}

fn ffn(
    g: &mut Graph,
    p: &BoundParams,
    x: TensorId,
    part: Part,
    layer: i32,
) -> Result<TensorId, ModelError> {
    let key = |class| WeightKey::new(part, layer, class);
    let w1 = p.get(&key(WeightClass::FfnW1))?;
    let b1 = p.get(&key(WeightClass::FfnB1))?;
    let w2 = p.get(&key(WeightClass::FfnW2))?;
    let b2 = p.get(&key(WeightClass::FfnB2))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias_row(h, b1)?;
    let h = g.relu(h);
    let out = g.matmul(h, w2)?;
    Ok(g.add_bias_row(out, b2)?)
}

struct AttnWeights {
    part: Part,
    layer: i32,
    wq: WeightClass,
    bq: WeightClass,
    wk: WeightClass,
    bk: WeightClass,
    wv: WeightClass,
    bv: WeightClass,
    wo: WeightClass,
    bo: WeightClass,
}

impl AttnWeights {
    fn self_attn(part: Part, layer: i32) -> Self {
        use WeightClass::*;
        AttnWeights {
            part,
            layer,
            wq: SelfAttnWq,
            bq: SelfAttnBq,
            wk: SelfAttnWk,
            bk: SelfAttnBk,
            wv: SelfAttnWv,
            bv: SelfAttnBv,
            wo: SelfAttnWo,
            bo: SelfAttnBo,
        }
    }

    fn cross_attn(layer: i32) -> Self {
        use WeightClass::*;
        AttnWeights {
            part: Part::Decoder,
            layer,
            wq: CrossAttnWq,
            bq: CrossAttnBq,
            wk: CrossAttnWk,
            bk: CrossAttnBk,
            wv: CrossAttnWv,
            bv: CrossAttnBv,
            wo: CrossAttnWo,
            bo: CrossAttnBo,
        }
    }
}

/// Multi-head scaled dot-product attention. Queries come from `x_q`
/// (`[B*Lq, d]`), keys and values from `x_kv` (`[B*Lk, d]`); the boolean mask
/// (`B*h*Lq*Lk`, true = excluded) carries padding and causality.
#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    x_q: TensorId,
    x_kv: TensorId,
    b: usize,
    lq: usize,
    lk: usize,
    mask: &[bool],
    w: AttnWeights,
) -> Result<TensorId, ModelError> {
    let d = cfg.width;
    let h = cfg.heads;
    let dk = cfg.head_dim();
    let key = |class| WeightKey::new(w.part, w.layer, class);

    let project = |g: &mut Graph, x: TensorId, wc, bc, len: usize| -> Result<TensorId, ModelError> {
        let wt = p.get(&key(wc))?;
        let bt = p.get(&key(bc))?;
        let y = g.matmul(x, wt)?;
        let y = g.add_bias_row(y, bt)?;
        // [B*L, d] -> [B*h, L, dk]
        let y = g.reshape(y, &[b, len, h, dk])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        Ok(g.reshape(y, &[b * h, len, dk])?)
    };

    let q = project(g, x_q, w.wq, w.bq, lq)?;
    let k = project(g, x_kv, w.wk, w.bk, lk)?;
    let v = project(g, x_kv, w.wv, w.bv, lk)?;

    let scores = g.bmm_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let probs = g.softmax_rows(scores, Some(mask))?;
    let ctx = g.bmm(probs, v)?;

    // [B*h, Lq, dk] -> [B*Lq, d]
    let ctx = g.reshape(ctx, &[b, h, lq, dk])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b * lq, d])?;

    let wo = p.get(&key(w.wo))?;
    let bo = p.get(&key(w.bo))?;
    let out = g.matmul(ctx, wo)?;
    Ok(g.add_bias_row(out, bo)?)
}

/// Attention exclusion mask over `[B, h, Lq, Lk]`: key positions at or beyond
/// a row's length are masked, optionally together with future positions.
pub(super) fn attn_mask(
    b: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    klens: &[usize],
    causal: bool,
) -> Vec<bool> {
    let mut mask = vec![false; b * heads * lq * lk];
    let mut idx = 0;
    for bi in 0..b {
        let klen = klens[bi];
        for _ in 0..heads {
            for qi in 0..lq {
                for ki in 0..lk {
                    mask[idx] = ki >= klen || (causal && ki > qi);
                    idx += 1;
                }
            }
        }
    }
    mask
}
