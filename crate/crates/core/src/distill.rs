//! Training procedures: direct model training (teachers, students,
//! baselines), generator training against a frozen teacher, fine-tuning of
//! the generated student, pseudo-corpus construction, and the
//! slice-initialization baseline.
//!
//! Every loss is a convex combination of a word-level distillation term
//! (cross-entropy against the teacher's output distributions) and the
//! ground-truth cross-entropy, weighted by `alpha`. Loss curves are emitted
//! as CSV rows and are bit-reproducible for a fixed seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{digest_model, CheckpointError};
use crate::data::{Batch, Batcher, Corpus, DataError, TaskKind, TrainDataSplit};
use crate::generator::{
    bind_generator, generate, materialize, GenComponent, Generator, GeneratorError,
    SelectedClasses,
};
use crate::metrics::argmax_rows;
use crate::model::{
    beam_decode, bind_params, forward, greedy_decode, BoundParams, IdMatrix, ModelConfig,
    ModelError, TransformerParams, WeightKey, EOS,
};
use crate::optim::{inverse_sqrt_lr, Adam};
use crate::tensor::{Graph, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("loss diverged to a non-finite value in {phase} at epoch {epoch}, step {step}")]
    Diverged {
        phase: String,
        epoch: usize,
        step: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// True when an error chain bottoms out in a non-finite value: during a
/// training step that means the optimization diverged rather than that the
/// program is wrong.
fn is_numeric_breakdown(err: &TrainError) -> bool {
    matches!(
        err,
        TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Optimization hyperparameters shared by every training procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the ground-truth term; `1 - alpha` weights the word-level
    /// distillation term.
    pub alpha: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fine-tuning runs on this fraction of the baseline warmup.
    pub phase2_warmup_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            base_lr: 3e-3,
            warmup_steps: 400,
            max_epochs: 10,
            batch_size: 32,
            seed: 1,
            phase2_warmup_factor: 0.25,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.warmup_steps < 1 {
            return Err(TrainError::Config("warmup_steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.base_lr < 0.0 {
            return Err(TrainError::Config("base_lr must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.phase2_warmup_factor) {
            return Err(TrainError::Config(
                "phase2_warmup_factor must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Warmup used when fine-tuning a generated student:
    /// `round(warmup_steps * phase2_warmup_factor)`, at least one step.
    pub fn phase2_warmup(&self) -> usize {
        ((self.warmup_steps as f64 * self.phase2_warmup_factor).round() as usize).max(1)
    }
}

/// Per-batch loss values; `total = (1 - alpha) * kd + alpha * gt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kd_term: f64,
    pub gt_term: f64,
    pub total: f64,
}

/// Convex combination of the two loss terms.
pub fn combine_losses(kd_term: f64, gt_term: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        kd_term,
        gt_term,
        total: (1.0 - alpha) * kd_term + alpha * gt_term,
    }
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub kd_term: f64,
    pub gt_term: f64,
    pub total: f64,
    pub valid_loss: Option<f64>,
}

/// Loss curve; serializes to CSV with the column layout
/// `phase,epoch,step,kd_term,gt_term,total,valid_loss`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("phase,epoch,step,kd_term,gt_term,total,valid_loss\n");
        for p in &self.points {
            let valid = p
                .valid_loss
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.17e},{:.17e},{:.17e},{}\n",
                p.phase, p.epoch, p.step, p.kd_term, p.gt_term, p.total, valid
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_csv_string())
    }
}

/// Result of one training procedure.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: LossCurve,
    pub final_valid_loss: f64,
}

/// A frozen teacher: parameters, config, and optionally precomputed output
/// distributions for the training corpus (computed on demand otherwise).
pub struct TeacherBundle<'a> {
    pub params: &'a TransformerParams,
    pub cfg: &'a ModelConfig,
    pub probs: Option<&'a TeacherProbCache>,
}

/// Teacher softmax rows per corpus pair, `[target_len, vocab]` each, indexed
/// by pair position. Over-length pairs hold no entry.
pub struct TeacherProbCache {
    rows: Vec<Option<Tensor>>,
}

impl TeacherProbCache {
    pub fn get(&self, pair_idx: usize) -> Option<&Tensor> {
        self.rows.get(pair_idx).and_then(|r| r.as_ref())
    }
}

/// Runs the teacher over every usable pair once and caches its per-position
/// output distributions. The teacher is evaluated without gradients.
pub fn teacher_prob_cache(
    teacher: &TransformerParams,
    teacher_cfg: &ModelConfig,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<TeacherProbCache, TrainError> {
    let max_len = teacher_cfg.max_len;
    let mut rows: Vec<Option<Tensor>> = vec![None; corpus.len()];
    let kept: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            let (s, t) = &corpus.pairs[i];
            !s.is_empty() && s.len() <= max_len && t.len() <= max_len
        })
        .collect();
    for chunk in kept.chunks(batch_size.max(1)) {
        let batch = batch_from_indices(corpus, chunk);
        let probs = teacher_distributions(teacher, teacher_cfg, &batch)?;
        let v = teacher_cfg.vocab;
        let t_cols = batch.tgt.cols;
        for (r, &pair) in chunk.iter().enumerate() {
            let len = batch.tgt_len[r];
            let mut data = Vec::with_capacity(len * v);
            data.extend_from_slice(&probs[r * t_cols * v..(r * t_cols + len) * v]);
            rows[pair] = Some(Tensor::from_vec(&[len, v], data)?);
        }
    }
    Ok(TeacherProbCache { rows })
}

fn batch_from_indices(corpus: &Corpus, idx: &[usize]) -> Batch {
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

/// Teacher-forced softmax rows over a batch, flattened `[B*T*V]`.
fn teacher_distributions(
    params: &TransformerParams,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<Vec<f64>, TrainError> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false);
    let dec_in = batch.decoder_input();
    let logits = forward(
        &mut g,
        &bound,
        cfg,
        &batch.src,
        &batch.src_len,
        &dec_in,
        &batch.tgt_len,
    )?;
    let b = batch.rows();
    let t = batch.tgt.cols;
    let flat = g.reshape(logits, &[b * t, cfg.vocab])?;
    let probs = g.softmax_rows(flat, None)?;
    Ok(g.value(probs).data().to_vec())
}

/// Word-level distillation loss: cross-entropy of the student's softmax
/// against the teacher's softmax rows (temperature 1). The teacher side is a
/// constant; gradients reach the student logits only.
pub fn kd_word_loss(
    g: &mut Graph,
    student_logits: TensorId,
    teacher_logits: &Tensor,
    pad_rows: &[bool],
) -> Result<TensorId, TrainError> {
    let shape = teacher_logits.shape().to_vec();
    if shape.len() != 2 {
        return Err(TrainError::Config(format!(
            "teacher logits must be [rows, vocab], got {shape:?}"
        )));
    }
    let tl = g.constant(teacher_logits.clone());
    let probs = g.softmax_rows(tl, None)?;
    let target = g.value(probs).clone();
    let target = g.constant(target);
    Ok(g.softmax_cross_entropy(student_logits, target, pad_rows)?)
}

/// Graph nodes of one combined loss.
pub struct LossNodes {
    pub kd: Option<TensorId>,
    pub gt: TensorId,
    pub total: TensorId,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph, alpha: f64) -> LossBreakdown {
        let kd = self.kd.map(|id| g.item(id)).unwrap_or(0.0);
        let gt = g.item(self.gt);
        combine_losses(kd, gt, alpha)
    }
}

/// Builds the combined objective over `[rows, vocab]` student logits:
/// a ground-truth cross-entropy term against `gold` ids, an optional
/// word-level distillation term against teacher distributions, and their
/// convex combination. Zero-weighted branches are kept out of the gradient
/// path entirely.
pub fn combined_loss(
    g: &mut Graph,
    student_logits: TensorId,
    teacher_probs: Option<&Tensor>,
    gold: &[u32],
    alpha: f64,
    pad_rows: &[bool],
) -> Result<LossNodes, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let shape = g.value(student_logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(TrainError::Config(format!(
            "student logits must be [rows, vocab], got {shape:?}"
        )));
    }
    let (rows, vocab) = (shape[0], shape[1]);
    let onehot = one_hot_rows(gold, rows, vocab)?;
    let target = g.constant(onehot);
    let gt = g.softmax_cross_entropy(student_logits, target, pad_rows)?;

    let kd = match teacher_probs {
        Some(probs) => {
            let t = g.constant(probs.clone());
            Some(g.softmax_cross_entropy(student_logits, t, pad_rows)?)
        }
        None => None,
    };

    let total = match (kd, alpha) {
        (None, _) => gt,
        (Some(_), a) if a == 1.0 => gt,
        (Some(kd_id), a) if a == 0.0 => kd_id,
        (Some(kd_id), a) => {
            let kd_scaled = g.scale(kd_id, 1.0 - a);
            let gt_scaled = g.scale(gt, a);
            g.add(kd_scaled, gt_scaled)?
        }
    };
    Ok(LossNodes { kd, gt, total })
}

fn one_hot_rows(gold: &[u32], rows: usize, vocab: usize) -> Result<Tensor, TrainError> {
    if gold.len() != rows {
        return Err(TrainError::Config(format!(
            "gold ids length {} != rows {rows}",
            gold.len()
        )));
    }
    let mut data = vec![0.0; rows * vocab];
    for (r, &id) in gold.iter().enumerate() {
        let id = id as usize;
        if id >= vocab {
            return Err(TrainError::Model(ModelError::IdOutOfRange {
                id: id as u32,
                vocab,
            }));
        }
        data[r * vocab + id] = 1.0;
    }
    Ok(Tensor::from_vec(&[rows, vocab], data)?)
}

/// Assembles the per-batch distillation target from cached teacher rows.
fn kd_target_for_batch(
    cache: &TeacherProbCache,
    batch: &Batch,
    vocab: usize,
) -> Result<Tensor, TrainError> {
    let t = batch.tgt.cols;
    let rows = batch.rows() * t;
    let mut data = vec![0.0; rows * vocab];
    for (r, &pair) in batch.pair_idx.iter().enumerate() {
        let cached = cache.get(pair).ok_or_else(|| {
            TrainError::Config(format!("missing teacher distributions for pair {pair}"))
        })?;
        let len = batch.tgt_len[r];
        data[(r * t) * vocab..(r * t + len) * vocab]
            .copy_from_slice(&cached.data()[..len * vocab]);
    }
    Ok(Tensor::from_vec(&[rows, vocab], data)?)
}

/// Mean ground-truth cross-entropy over a corpus, weighted by unmasked
/// positions. Deterministic (no shuffling).
pub fn validation_loss(
    params: &TransformerParams,
    cfg: &ModelConfig,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let batcher = Batcher::new(corpus, batch_size, cfg.max_len)?;
    let mut loss_sum = 0.0;
    let mut kept_total = 0usize;
    for batch in eval_batches(&batcher, corpus) {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params, false);
        let dec_in = batch.decoder_input();
        let logits = forward(
            &mut g,
            &bound,
            cfg,
            &batch.src,
            &batch.src_len,
            &dec_in,
            &batch.tgt_len,
        )?;
        let flat = g.reshape(logits, &[batch.rows() * batch.tgt.cols, cfg.vocab])?;
        let pad = batch.target_pad_mask();
        let gold: Vec<u32> = batch.tgt.data.clone();
        let nodes = combined_loss(&mut g, flat, None, &gold, 1.0, &pad)?;
        let kept = pad.iter().filter(|&&m| !m).count();
        loss_sum += g.item(nodes.total) * kept as f64;
        kept_total += kept;
    }
    Ok(loss_sum / kept_total.max(1) as f64)
}

/// Teacher-forced token accuracy over a corpus.
pub fn teacher_forced_accuracy(
    params: &TransformerParams,
    cfg: &ModelConfig,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let batcher = Batcher::new(corpus, batch_size, cfg.max_len)?;
    let mut hit = 0usize;
    let mut kept = 0usize;
    for batch in eval_batches(&batcher, corpus) {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params, false);
        let dec_in = batch.decoder_input();
        let logits = forward(
            &mut g,
            &bound,
            cfg,
            &batch.src,
            &batch.src_len,
            &dec_in,
            &batch.tgt_len,
        )?;
        let pred = argmax_rows(g.value(logits));
        let pad = batch.target_pad_mask();
        for i in 0..pred.len() {
            if pad[i] {
                continue;
            }
            kept += 1;
            if pred[i] == batch.tgt.data[i] {
                hit += 1;
            }
        }
    }
    Ok(hit as f64 / kept.max(1) as f64)
}

/// Unshuffled batches over the batcher's kept pairs, in corpus order.
fn eval_batches(batcher: &Batcher, corpus: &Corpus) -> Vec<Batch> {
    batcher
        .kept_indices()
        .chunks(batcher.batch_size())
        .map(|chunk| batch_from_indices(corpus, chunk))
        .collect()
}

/// Trains a model directly on `(train, valid)` data. Used for teachers
/// (alpha forced to 1, no teacher), plain/initialized students, and the
/// distillation baseline; [`train_phase2`] routes here with reduced warmup.
#[allow(clippy::too_many_arguments)]
fn train_direct(
    params: &mut TransformerParams,
    cfg: &ModelConfig,
    teacher: Option<&TeacherBundle>,
    data: &TrainDataSplit,
    tcfg: &TrainConfig,
    warmup: usize,
    phase: &str,
) -> Result<TrainOutcome, TrainError> {
    tcfg.validate()?;
    cfg.validate()?;
    let alpha = tcfg.alpha;
    let use_kd = teacher.is_some() && alpha < 1.0;
    let owned_cache;
    let cache: Option<&TeacherProbCache> = match teacher {
        Some(t) if use_kd => match t.probs {
            Some(c) => Some(c),
            None => {
                owned_cache = teacher_prob_cache(t.params, t.cfg, data.train, tcfg.batch_size)?;
                Some(&owned_cache)
            }
        },
        _ => None,
    };

    let batcher = Batcher::new(data.train, tcfg.batch_size, cfg.max_len)?;
    let mut adam: Adam<WeightKey> = Adam::new(tcfg.beta1, tcfg.beta2, tcfg.eps);
    let mut curve = LossCurve::default();
    let mut step = 0usize;
    let mut final_valid = f64::INFINITY;

    for epoch in 0..tcfg.max_epochs {
        for batch in batcher.epoch_batches(data.train, tcfg.seed, epoch) {
            let mut g = Graph::new();
            let bound = bind_params(&mut g, params, true);
            let nodes = step_loss(&mut g, &bound, cfg, &batch, cache, alpha).map_err(|e| {
                if is_numeric_breakdown(&e) {
                    TrainError::Diverged {
                        phase: phase.into(),
                        epoch,
                        step,
                    }
                } else {
                    e
                }
            })?;
            let breakdown = nodes.breakdown(&g, alpha);
            if !breakdown.total.is_finite() {
                return Err(TrainError::Diverged {
                    phase: phase.into(),
                    epoch,
                    step,
                });
            }
            g.backward(nodes.total)?;
            adam.begin_step();
            let lr = inverse_sqrt_lr(tcfg.base_lr, warmup, adam.step_count());
            for (key, id) in bound.ids() {
                if let Some(grad) = g.grad(*id) {
                    let grad = grad.to_vec();
                    adam.update(key, params.get_mut(key).unwrap(), &grad, lr);
                }
            }
            curve.points.push(CurvePoint {
                phase: phase.into(),
                epoch,
                step,
                kd_term: breakdown.kd_term,
                gt_term: breakdown.gt_term,
                total: breakdown.total,
                valid_loss: None,
            });
            step += 1;
        }
        final_valid = validation_loss(params, cfg, data.valid, tcfg.batch_size)?;
        if let Some(last) = curve.points.last_mut() {
            last.valid_loss = Some(final_valid);
        }
    }
    if tcfg.max_epochs == 0 {
        final_valid = validation_loss(params, cfg, data.valid, tcfg.batch_size)?;
    }
    Ok(TrainOutcome {
        curve,
        final_valid_loss: final_valid,
    })
}

fn step_loss(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    cache: Option<&TeacherProbCache>,
    alpha: f64,
) -> Result<LossNodes, TrainError> {
    let dec_in = batch.decoder_input();
    let logits = forward(
        g,
        bound,
        cfg,
        &batch.src,
        &batch.src_len,
        &dec_in,
        &batch.tgt_len,
    )?;
    let flat = g.reshape(logits, &[batch.rows() * batch.tgt.cols, cfg.vocab])?;
    let pad = batch.target_pad_mask();
    let kd_target = match cache {
        Some(c) => Some(kd_target_for_batch(c, batch, cfg.vocab)?),
        None => None,
    };
    combined_loss(g, flat, kd_target.as_ref(), &batch.tgt.data, alpha, &pad)
}

/// Plain supervised training (ground truth only). The teacher baseline and
/// the no-distillation student both use this.
pub fn train_plain(
    params: &mut TransformerParams,
    cfg: &ModelConfig,
    data: &TrainDataSplit,
    tcfg: &TrainConfig,
    phase: &str,
) -> Result<TrainOutcome, TrainError> {
    let mut plain = tcfg.clone();
    plain.alpha = 1.0;
    train_direct(params, cfg, None, data, &plain, tcfg.warmup_steps, phase)
}

/// Fine-tunes a student directly with the combined objective. Warmup is
/// scaled by `phase2_warmup_factor`; pass a factor of 1 for baselines that
/// train from scratch. With `teacher == None` or alpha 1 this degenerates to
/// plain student training.
pub fn train_phase2(
    student: &mut TransformerParams,
    cfg: &ModelConfig,
    teacher: Option<&TeacherBundle>,
    data: &TrainDataSplit,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let warmup = tcfg.phase2_warmup();
    train_direct(student, cfg, teacher, data, tcfg, warmup, "phase2")
}

/// Identifies one trainable scalar buffer during generator training.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Phase1Param {
    Gen(WeightKey, GenComponent),
    Student(WeightKey),
}

/// Trains the parameter generator: every step regenerates the selected
/// student weights from the frozen teacher, runs the student, and updates the
/// generator components (plus any unselected student weights, which train
/// directly). The teacher's bytes are never touched.
pub fn train_phase1(
    gen: &mut Generator,
    teacher: &TeacherBundle,
    unselected: &mut TransformerParams,
    data: &TrainDataSplit,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    tcfg.validate()?;
    let student_cfg = gen.student_cfg.clone();
    let alpha = tcfg.alpha;
    let use_kd = alpha < 1.0;
    let owned_cache;
    let cache: Option<&TeacherProbCache> = if use_kd {
        match teacher.probs {
            Some(c) => Some(c),
            None => {
                owned_cache =
                    teacher_prob_cache(teacher.params, teacher.cfg, data.train, tcfg.batch_size)?;
                Some(&owned_cache)
            }
        }
    } else {
        None
    };

    let batcher = Batcher::new(data.train, tcfg.batch_size, student_cfg.max_len)?;
    let mut adam: Adam<Phase1Param> = Adam::new(tcfg.beta1, tcfg.beta2, tcfg.eps);
    let mut curve = LossCurve::default();
    let mut step = 0usize;
    let mut final_valid = f64::INFINITY;

    for epoch in 0..tcfg.max_epochs {
        for batch in batcher.epoch_batches(data.train, tcfg.seed, epoch) {
            let mut g = Graph::new();
            let gen_bound = bind_generator(&mut g, gen, true);
            let mut ids = generate(&mut g, gen, &gen_bound, teacher.params)?;
            let mut student_leaf_ids: BTreeMap<WeightKey, TensorId> = BTreeMap::new();
            for (key, tensor) in unselected.iter() {
                let id = g.leaf(tensor.clone().with_grad());
                student_leaf_ids.insert(*key, id);
                ids.insert(*key, id);
            }
            let bound = BoundParams::from_ids(ids);
            let nodes =
                step_loss(&mut g, &bound, &student_cfg, &batch, cache, alpha).map_err(|e| {
                    if is_numeric_breakdown(&e) {
                        TrainError::Diverged {
                            phase: "phase1".into(),
                            epoch,
                            step,
                        }
                    } else {
                        e
                    }
                })?;
            let breakdown = nodes.breakdown(&g, alpha);
            if !breakdown.total.is_finite() {
                return Err(TrainError::Diverged {
                    phase: "phase1".into(),
                    epoch,
                    step,
                });
            }
            g.backward(nodes.total)?;
            adam.begin_step();
            let lr = inverse_sqrt_lr(tcfg.base_lr, tcfg.warmup_steps, adam.step_count());
            for (key, bgp) in gen_bound.iter() {
                let entry = gen.entry_mut(key).expect("bound key exists");
                let pairs = [
                    (GenComponent::InputMap, bgp.input_map),
                    (GenComponent::OutputMap, bgp.output_map),
                    (GenComponent::LayerMap, bgp.layer_map),
                    (GenComponent::Scale, Some(bgp.scale)),
                    (GenComponent::Shift, Some(bgp.shift)),
                ];
                for (component, id) in pairs.into_iter() {
                    let Some(id) = id else { continue };
                    if let Some(grad) = g.grad(id) {
                        let grad = grad.to_vec();
                        let slot = entry
                            .params
                            .component_mut(component)
                            .expect("component present");
                        adam.update(&Phase1Param::Gen(*key, component), slot, &grad, lr);
                    }
                }
            }
            for (key, id) in &student_leaf_ids {
                if let Some(grad) = g.grad(*id) {
                    let grad = grad.to_vec();
                    adam.update(
                        &Phase1Param::Student(*key),
                        unselected.get_mut(key).unwrap(),
                        &grad,
                        lr,
                    );
                }
            }
            curve.points.push(CurvePoint {
                phase: "phase1".into(),
                epoch,
                step,
                kd_term: breakdown.kd_term,
                gt_term: breakdown.gt_term,
                total: breakdown.total,
                valid_loss: None,
            });
            step += 1;
        }
        let student = assemble_student(gen, teacher.params, unselected)?;
        final_valid = validation_loss(&student, &student_cfg, data.valid, tcfg.batch_size)?;
        if let Some(last) = curve.points.last_mut() {
            last.valid_loss = Some(final_valid);
        }
    }
    if tcfg.max_epochs == 0 {
        let student = assemble_student(gen, teacher.params, unselected)?;
        final_valid = validation_loss(&student, &student_cfg, data.valid, tcfg.batch_size)?;
    }
    Ok(TrainOutcome {
        curve,
        final_valid_loss: final_valid,
    })
}

/// Materializes the generated student weights and merges them with the
/// directly trained (unselected) ones into a complete parameter store.
pub fn assemble_student(
    gen: &Generator,
    teacher: &TransformerParams,
    unselected: &TransformerParams,
) -> Result<TransformerParams, TrainError> {
    let mut student = materialize(gen, teacher)?;
    for (key, tensor) in unselected.iter() {
        student.insert(*key, tensor.clone());
    }
    student.validate_against(&gen.student_cfg)?;
    Ok(student)
}

/// Fresh student parameters for the classes the generator does not produce.
pub fn init_unselected(
    student_cfg: &ModelConfig,
    selected: SelectedClasses,
    seed: u64,
) -> Result<TransformerParams, TrainError> {
    let full = crate::model::init_params(student_cfg, seed)?;
    let mut out = TransformerParams::new();
    for (key, tensor) in full.iter() {
        if !selected.contains(key) {
            out.insert(*key, tensor.clone());
        }
    }
    Ok(out)
}

/// How the teacher decodes pseudo-targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PseudoDecode {
    Greedy,
    Beam { width: usize, alpha: f64 },
}

/// Sequence-level distillation data: the teacher decodes each source and the
/// result becomes the pair's target. Deterministic given the teacher.
pub fn build_pseudo_corpus(
    teacher: &TransformerParams,
    teacher_cfg: &ModelConfig,
    sources: &[Vec<u32>],
    decode: PseudoDecode,
) -> Result<Corpus, TrainError> {
    let max_steps = teacher_cfg.max_len - 1;
    let outputs = match decode {
        PseudoDecode::Greedy => greedy_decode(teacher, teacher_cfg, sources, max_steps)?,
        PseudoDecode::Beam { width, alpha } => {
            beam_decode(teacher, teacher_cfg, sources, width, alpha, max_steps)?
        }
    };
    let pairs = sources
        .iter()
        .zip(outputs)
        .map(|(src, mut out)| {
            out.push(EOS);
            (src.clone(), out)
        })
        .collect();
    Ok(Corpus {
        pairs,
        vocab: teacher_cfg.vocab,
        task: TaskKind::File,
    })
}

/// Initializes a student from the teacher's bottom layers, slicing each
/// weight to the student's dimensions: matrices keep their leading block,
/// vectors their leading entries.
pub fn init_baseline(
    teacher: &TransformerParams,
    teacher_cfg: &ModelConfig,
    student_cfg: &ModelConfig,
) -> Result<TransformerParams, TrainError> {
    student_cfg.validate()?;
    if student_cfg.enc_depth > teacher_cfg.enc_depth
        || student_cfg.dec_depth > teacher_cfg.dec_depth
        || student_cfg.width > teacher_cfg.width
        || student_cfg.ffn_hidden > teacher_cfg.ffn_hidden
        || student_cfg.max_len > teacher_cfg.max_len
    {
        return Err(TrainError::Config(
            "student exceeds teacher in some dimension; cannot slice".into(),
        ));
    }
    if student_cfg.vocab != teacher_cfg.vocab {
        return Err(TrainError::Config(
            "teacher and student vocabularies must match".into(),
        ));
    }
    let mut out = TransformerParams::new();
    for key in student_cfg.weight_keys() {
        let src = teacher
            .get(&key)
            .ok_or_else(|| TrainError::Model(ModelError::MissingWeight(key.to_string())))?;
        let want = student_cfg.class_shape(key.class);
        out.insert(key, slice_leading(src, &want)?);
    }
    out.validate_against(student_cfg)?;
    Ok(out)
}

fn slice_leading(src: &Tensor, shape: &[usize]) -> Result<Tensor, TrainError> {
    let s = src.shape();
    match (s.len(), shape.len()) {
        (1, 1) => Ok(Tensor::from_vec(shape, src.data()[..shape[0]].to_vec())?),
        (2, 2) => {
            let (rows, cols) = (shape[0], shape[1]);
            let src_cols = s[1];
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                data.extend_from_slice(&src.data()[r * src_cols..r * src_cols + cols]);
            }
            Ok(Tensor::from_vec(shape, data)?)
        }
        _ => Err(TrainError::Config(format!(
            "cannot slice {:?} to {:?}",
            s, shape
        ))),
    }
}

/// SHA-256 digest of a model checkpoint serialization; used to assert the
/// frozen-teacher contract.
pub fn model_digest(
    cfg: &ModelConfig,
    params: &TransformerParams,
) -> Result<String, TrainError> {
    Ok(digest_model(cfg, params)?)
}
