//! Checkpoint files: an 8-byte little-endian manifest length, a JSON
//! manifest (config plus an ordered list of `{key, shape}` entries), then the
//! raw tensor payloads as little-endian f64 in manifest order. Entries are
//! written in sorted key order, so save -> load -> save is bit-exact.
//!
//! Generator checkpoints reuse the same container with entries named
//! `gen/<student-key>/<W_I|W_O|W_L|W|B>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::generator::{GenComponent, Generator, GeneratorError, SelectedClasses};
use crate::model::{ModelConfig, ModelError, TransformerParams, WeightKey};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    key: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    student: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected: Option<SelectedClasses>,
    entries: Vec<ManifestEntry>,
}

fn encode(manifest: &Manifest, tensors: &[&Tensor]) -> Result<Vec<u8>, CheckpointError> {
    let manifest_bytes = serde_json::to_vec(manifest)?;
    let payload: usize = tensors.iter().map(|t| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + payload);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<Tensor>), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Format("file shorter than header".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + n {
        return Err(CheckpointError::Format("manifest truncated".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + n])?;
    let mut offset = 8 + n;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * 8;
        if bytes.len() < end {
            return Err(CheckpointError::Format(format!(
                "payload truncated at entry {}",
                entry.key
            )));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(&entry.shape, data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    Ok((manifest, tensors))
}

/// Serializes a model checkpoint to bytes.
pub fn model_bytes(
    cfg: &ModelConfig,
    params: &TransformerParams,
) -> Result<Vec<u8>, CheckpointError> {
    let mut entries = Vec::with_capacity(params.len());
    let mut tensors = Vec::with_capacity(params.len());
    for (key, tensor) in params.iter() {
        entries.push(ManifestEntry {
            key: key.to_string(),
            shape: tensor.shape().to_vec(),
        });
        tensors.push(tensor);
    }
    let manifest = Manifest {
        kind: "model".into(),
        model: Some(cfg.clone()),
        teacher: None,
        student: None,
        selected: None,
        entries,
    };
    encode(&manifest, &tensors)
}

pub fn save_model(
    path: &Path,
    cfg: &ModelConfig,
    params: &TransformerParams,
) -> Result<(), CheckpointError> {
    write_atomic(path, &model_bytes(cfg, params)?)
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, TransformerParams), CheckpointError> {
    let bytes = fs::read(path)?;
    let (manifest, tensors) = decode(&bytes)?;
    if manifest.kind != "model" {
        return Err(CheckpointError::Format(format!(
            "expected model checkpoint, found kind {:?}",
            manifest.kind
        )));
    }
    let cfg = manifest
        .model
        .ok_or_else(|| CheckpointError::Format("model manifest missing config".into()))?;
    let mut params = TransformerParams::new();
    for (entry, tensor) in manifest.entries.iter().zip(tensors) {
        let key: WeightKey = entry
            .key
            .parse()
            .map_err(CheckpointError::Format)?;
        params.insert(key, tensor);
    }
    params.validate_against(&cfg)?;
    Ok((cfg, params))
}

/// Serializes a generator checkpoint to bytes.
pub fn generator_bytes(gen: &Generator) -> Result<Vec<u8>, CheckpointError> {
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for (key, entry) in gen.entries() {
        for (component, tensor) in entry.params.components() {
            entries.push(ManifestEntry {
                key: format!("gen/{key}/{}", component.name()),
                shape: tensor.shape().to_vec(),
            });
            tensors.push(tensor);
        }
    }
    let manifest = Manifest {
        kind: "generator".into(),
        model: None,
        teacher: Some(gen.teacher_cfg.clone()),
        student: Some(gen.student_cfg.clone()),
        selected: Some(gen.selected),
        entries,
    };
    encode(&manifest, &tensors)
}

pub fn save_generator(path: &Path, gen: &Generator) -> Result<(), CheckpointError> {
    write_atomic(path, &generator_bytes(gen)?)
}

/// Rebuilds the generator structure from its configs and overwrites every
/// component with the stored values.
pub fn load_generator(path: &Path) -> Result<Generator, CheckpointError> {
    let bytes = fs::read(path)?;
    let (manifest, tensors) = decode(&bytes)?;
    if manifest.kind != "generator" {
        return Err(CheckpointError::Format(format!(
            "expected generator checkpoint, found kind {:?}",
            manifest.kind
        )));
    }
    let teacher = manifest
        .teacher
        .ok_or_else(|| CheckpointError::Format("generator manifest missing teacher".into()))?;
    let student = manifest
        .student
        .ok_or_else(|| CheckpointError::Format("generator manifest missing student".into()))?;
    let selected = manifest
        .selected
        .ok_or_else(|| CheckpointError::Format("generator manifest missing selected".into()))?;
    let mut gen = Generator::build(&teacher, &student, selected, 0)?;
    for (entry, tensor) in manifest.entries.iter().zip(tensors) {
        let rest = entry
            .key
            .strip_prefix("gen/")
            .ok_or_else(|| CheckpointError::Format(format!("bad entry key {}", entry.key)))?;
        let (key_str, comp_str) = rest
            .rsplit_once('/')
            .ok_or_else(|| CheckpointError::Format(format!("bad entry key {}", entry.key)))?;
        let key: WeightKey = key_str.parse().map_err(CheckpointError::Format)?;
        let component = GenComponent::from_name(comp_str)
            .ok_or_else(|| CheckpointError::Format(format!("bad component {comp_str}")))?;
        let slot = gen
            .entry_mut(&key)
            .and_then(|e| e.params.component_mut(component))
            .ok_or_else(|| {
                CheckpointError::Format(format!("no slot for {key} {}", component.name()))
            })?;
        if slot.shape() != tensor.shape() {
            return Err(CheckpointError::Format(format!(
                "{key} {}: shape {:?} != stored {:?}",
                component.name(),
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
    }
    Ok(gen)
}

/// SHA-256 of a byte buffer, as lowercase hex.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a model's checkpoint serialization, without touching disk.
pub fn digest_model(
    cfg: &ModelConfig,
    params: &TransformerParams,
) -> Result<String, CheckpointError> {
    Ok(digest_bytes(&model_bytes(cfg, params)?))
}

pub fn digest_file(path: &Path) -> Result<String, CheckpointError> {
    Ok(digest_bytes(&fs::read(path)?))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
