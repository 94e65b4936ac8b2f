//! Experiment configuration: a TOML file with task, model, and training
//! sections. Flags override file values; every command echoes the fully
//! resolved configuration into its output artifacts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use wd_core::data::{gen_synthetic, load_tsv, Corpus, TaskKind};
use wd_core::distill::{PseudoDecode, TrainConfig};
use wd_core::generator::SelectedClasses;
use wd_core::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Overrides applied to the teacher's own training run.
    #[serde(default)]
    pub teacher_train: OverrideSection,
    /// Overrides applied to generator training.
    #[serde(default)]
    pub phase1: OverrideSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub vocab: usize,
    /// Sequence budget shared by both models and the batcher.
    pub max_len: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_valid_size")]
    pub valid_size: usize,
    #[serde(default = "default_len_min")]
    pub len_min: usize,
    #[serde(default = "default_len_max")]
    pub len_max: usize,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    /// TSV paths, used only with `kind = "file"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub valid_path: Option<PathBuf>,
}

fn default_train_size() -> usize {
    3000
}
fn default_valid_size() -> usize {
    400
}
fn default_len_min() -> usize {
    3
}
fn default_len_max() -> usize {
    8
}
fn default_data_seed() -> u64 {
    1001
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Defaults to 4x width.
    #[serde(default)]
    pub ffn_hidden: Option<usize>,
}

impl ModelSection {
    pub fn to_model_config(&self, vocab: usize, max_len: usize) -> ModelConfig {
        ModelConfig {
            enc_depth: self.enc_depth,
            dec_depth: self.dec_depth,
            width: self.width,
            ffn_hidden: self.ffn_hidden.unwrap_or(4 * self.width),
            heads: self.heads,
            vocab,
            max_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub phase2_warmup_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            alpha: d.alpha,
            base_lr: d.base_lr,
            warmup_steps: d.warmup_steps,
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            phase2_warmup_factor: d.phase2_warmup_factor,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            seed,
            phase2_warmup_factor: self.phase2_warmup_factor,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn apply(&self, o: &OverrideSection) -> TrainSection {
        TrainSection {
            alpha: o.alpha.unwrap_or(self.alpha),
            base_lr: o.base_lr.unwrap_or(self.base_lr),
            warmup_steps: o.warmup_steps.unwrap_or(self.warmup_steps),
            max_epochs: o.max_epochs.unwrap_or(self.max_epochs),
            batch_size: o.batch_size.unwrap_or(self.batch_size),
            phase2_warmup_factor: o
                .phase2_warmup_factor
                .unwrap_or(self.phase2_warmup_factor),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Sparse per-stage override of the shared training section.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideSection {
    pub alpha: Option<f64>,
    pub base_lr: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub phase2_warmup_factor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub selected_classes: SelectedClasses,
    pub pseudo_decode: PseudoDecodeSection,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            out_dir: PathBuf::from("runs/exp"),
            seeds: vec![1, 2, 3],
            selected_classes: SelectedClasses::All,
            pseudo_decode: PseudoDecodeSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoDecodeSection {
    pub kind: String,
    pub beam_width: usize,
    pub lennorm_alpha: f64,
}

impl Default for PseudoDecodeSection {
    fn default() -> Self {
        PseudoDecodeSection {
            kind: "greedy".into(),
            beam_width: 4,
            lennorm_alpha: 1.0,
        }
    }
}

impl PseudoDecodeSection {
    pub fn to_decode(&self) -> Result<PseudoDecode> {
        match self.kind.as_str() {
            "greedy" => Ok(PseudoDecode::Greedy),
            "beam" => Ok(PseudoDecode::Beam {
                width: self.beam_width,
                alpha: self.lennorm_alpha,
            }),
            other => bail!("unknown pseudo_decode kind {other:?}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub repeats: usize,
    pub sample_size: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            repeats: 5,
            sample_size: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKind,
    #[serde(default)]
    pub lrs: Vec<f64>,
    #[serde(default)]
    pub warmups: Vec<usize>,
    #[serde(default)]
    pub depths: Vec<usize>,
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Distillation method run in every cell.
    #[serde(default = "default_sweep_method")]
    pub method: String,
}

fn default_sweep_method() -> String {
    "wd".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    LrWarmup,
    DepthWidth,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            bail!("experiment.seeds must not be empty");
        }
        if self.task.len_min == 0 || self.task.len_min > self.task.len_max {
            bail!(
                "invalid task length range {}..={}",
                self.task.len_min,
                self.task.len_max
            );
        }
        self.teacher_cfg().validate()?;
        self.student_cfg().validate()?;
        self.train
            .to_train_config(self.experiment.seeds[0])
            .validate()?;
        if self.task.kind == TaskKind::File && self.task.path.is_none() {
            bail!("task.kind = \"file\" requires task.path");
        }
        Ok(())
    }

    pub fn teacher_cfg(&self) -> ModelConfig {
        self.teacher
            .to_model_config(self.task.vocab, self.task.max_len)
    }

    pub fn student_cfg(&self) -> ModelConfig {
        self.student
            .to_model_config(self.task.vocab, self.task.max_len)
    }

    pub fn teacher_train_section(&self) -> TrainSection {
        self.train.apply(&self.teacher_train)
    }

    pub fn phase1_section(&self) -> TrainSection {
        self.train.apply(&self.phase1)
    }

    /// Training corpus from the task spec; synthetic tasks are deterministic
    /// in `data_seed`.
    pub fn train_corpus(&self) -> Result<Corpus> {
        match self.task.kind {
            TaskKind::File => {
                let path = self.task.path.as_ref().expect("validated");
                Ok(load_tsv(path, self.task.vocab)?)
            }
            kind => Ok(gen_synthetic(
                kind,
                self.task.train_size,
                (self.task.len_min, self.task.len_max),
                self.task.vocab,
                self.task.data_seed,
            )?),
        }
    }

    pub fn valid_corpus(&self) -> Result<Corpus> {
        match self.task.kind {
            TaskKind::File => {
                let path = self
                    .task
                    .valid_path
                    .as_ref()
                    .or(self.task.path.as_ref())
                    .expect("validated");
                Ok(load_tsv(path, self.task.vocab)?)
            }
            kind => Ok(gen_synthetic(
                kind,
                self.task.valid_size,
                (self.task.len_min, self.task.len_max),
                self.task.vocab,
                // Disjoint stream from the training corpus.
                self.task.data_seed.wrapping_add(1),
            )?),
        }
    }

    /// The resolved config as a JSON value, embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
