//! Configurable encoder-decoder transformer whose every learnable weight is
//! addressable by a [`WeightKey`], so weights can be grouped, generated, and
//! transferred between differently sized models.
//!
//! Layout: pre-norm residual blocks (one layer-norm pair per sub-layer plus a
//! final one per part), learned positional embeddings, untied embedding and
//! output projection. Token ids 0/1/2 are reserved for EOS/BOS/PAD.

mod decode;
mod forward;

pub use decode::{beam_decode, greedy_decode, score_sequence};
pub use forward::{bind_params, forward, BoundParams};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const EOS: u32 = 0;
pub const BOS: u32 = 1;
pub const PAD: u32 = 2;
/// Number of reserved token ids; task alphabets start here.
pub const RESERVED_IDS: u32 = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("missing weight {0}")]
    MissingWeight(String),
    #[error("beam width must be >= 1, got {0}")]
    BeamWidth(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_depth: usize,
    pub dec_depth: usize,
    /// Embedding size d.
    pub width: usize,
    /// FFN hidden size, conventionally 4x width.
    pub ffn_hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Convenience constructor using the 4x FFN convention.
    pub fn new(enc_depth: usize, dec_depth: usize, width: usize, heads: usize, vocab: usize, max_len: usize) -> Self {
        ModelConfig {
            enc_depth,
            dec_depth,
            width,
            ffn_hidden: 4 * width,
            heads,
            vocab,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.enc_depth,
            self.dec_depth,
            self.width,
            self.ffn_hidden,
            self.heads,
            self.vocab,
            self.max_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        if self.width % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab <= RESERVED_IDS as usize {
            return Err(ModelError::Config(format!(
                "vocab {} leaves no room beyond the {} reserved ids",
                self.vocab, RESERVED_IDS
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn depth(&self, part: Part) -> usize {
        match part {
            Part::Encoder => self.enc_depth,
            Part::Decoder => self.dec_depth,
        }
    }

    /// Every weight key implied by this config, in canonical order.
    pub fn weight_keys(&self) -> Vec<WeightKey> {
        let mut keys = Vec::new();
        for part in [Part::Encoder, Part::Decoder] {
            for class in WeightClass::all() {
                if !class.exists_in(part) {
                    continue;
                }
                if class.per_layer() {
                    for layer in 0..self.depth(part) {
                        keys.push(WeightKey::new(part, layer as i32, *class));
                    }
                } else {
                    keys.push(WeightKey::new(part, SHARED_LAYER, *class));
                }
            }
        }
        keys.sort();
        keys
    }

    /// Concrete shape of a weight class under this config.
    pub fn class_shape(&self, class: WeightClass) -> Vec<usize> {
        match class.shape_spec() {
            ClassShape::Matrix { rows, cols } => vec![self.dim(rows), self.dim(cols)],
            ClassShape::Vector { len } => vec![self.dim(len)],
        }
    }

    pub fn dim(&self, kind: DimKind) -> usize {
        match kind {
            DimKind::Width => self.width,
            DimKind::FfnHidden => self.ffn_hidden,
            DimKind::Vocab => self.vocab,
            DimKind::MaxLen => self.max_len,
        }
    }

    /// Closed-form learnable-parameter count:
    ///
    /// * encoder layer: 4d^2 + 4d (attention) + 2df + f + d (FFN) + 4d (norms)
    /// * decoder layer: 8d^2 + 8d + 2df + f + d + 6d
    /// * per part: Vd (embedding) + Md (positions) + 2d (final norm),
    ///   plus dV for the decoder output projection.
    pub fn param_count(&self) -> usize {
        let (d, f, v, m) = (self.width, self.ffn_hidden, self.vocab, self.max_len);
        let enc_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
        let dec_layer = 8 * d * d + 8 * d + 2 * d * f + f + d + 6 * d;
        let part_shared = v * d + m * d + 2 * d;
        self.enc_depth * enc_layer + self.dec_depth * dec_layer + 2 * part_shared + d * v
    }
}

/// Layer index used for weights that exist once per part.
pub const SHARED_LAYER: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    Encoder,
    Decoder,
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Part::Encoder => write!(f, "encoder"),
            Part::Decoder => write!(f, "decoder"),
        }
    }
}

/// A weight matrix's role in the network formulation. Instances of one class
/// at different layers share shape and function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeightClass {
    SelfAttnWq,
    SelfAttnWk,
    SelfAttnWv,
    SelfAttnWo,
    SelfAttnBq,
    SelfAttnBk,
    SelfAttnBv,
    SelfAttnBo,
    CrossAttnWq,
    CrossAttnWk,
    CrossAttnWv,
    CrossAttnWo,
    CrossAttnBq,
    CrossAttnBk,
    CrossAttnBv,
    CrossAttnBo,
    FfnW1,
    FfnB1,
    FfnW2,
    FfnB2,
    LnG1,
    LnB1,
    LnG2,
    LnB2,
    LnG3,
    LnB3,
    FinalNormGain,
    FinalNormBias,
    Embed,
    PosEmbed,
    OutputProj,
}

/// Dimension kinds a weight shape is built from. Vocab and position axes are
/// shared between teacher and student and are never contracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimKind {
    Width,
    FfnHidden,
    Vocab,
    MaxLen,
}

impl DimKind {
    /// Whether the parameter generator may map this axis between sizes.
    pub fn contractible(self) -> bool {
        matches!(self, DimKind::Width | DimKind::FfnHidden)
    }
}

/// Shape template of a weight class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassShape {
    Matrix { rows: DimKind, cols: DimKind },
    Vector { len: DimKind },
}

impl WeightClass {
    pub fn all() -> &'static [WeightClass] {
        use WeightClass::*;
        &[
            SelfAttnWq, SelfAttnWk, SelfAttnWv, SelfAttnWo, SelfAttnBq, SelfAttnBk, SelfAttnBv,
            SelfAttnBo, CrossAttnWq, CrossAttnWk, CrossAttnWv, CrossAttnWo, CrossAttnBq,
            CrossAttnBk, CrossAttnBv, CrossAttnBo, FfnW1, FfnB1, FfnW2, FfnB2, LnG1, LnB1, LnG2,
            LnB2, LnG3, LnB3, FinalNormGain, FinalNormBias, Embed, PosEmbed, OutputProj,
        ]
    }

    /// True for classes instantiated once per hidden layer.
    pub fn per_layer(self) -> bool {
        use WeightClass::*;
        !matches!(self, FinalNormGain | FinalNormBias | Embed | PosEmbed | OutputProj)
    }

    pub fn exists_in(self, part: Part) -> bool {
        use WeightClass::*;
        match self {
            CrossAttnWq | CrossAttnWk | CrossAttnWv | CrossAttnWo | CrossAttnBq | CrossAttnBk
            | CrossAttnBv | CrossAttnBo | LnG3 | LnB3 | OutputProj => part == Part::Decoder,
            _ => true,
        }
    }

    pub fn shape_spec(self) -> ClassShape {
        use ClassShape::*;
        use DimKind::*;
        use WeightClass::*;
        match self {
            SelfAttnWq | SelfAttnWk | SelfAttnWv | SelfAttnWo | CrossAttnWq | CrossAttnWk
            | CrossAttnWv | CrossAttnWo => Matrix { rows: Width, cols: Width },
            FfnW1 => Matrix { rows: Width, cols: FfnHidden },
            FfnW2 => Matrix { rows: FfnHidden, cols: Width },
            Embed => Matrix { rows: Vocab, cols: Width },
            PosEmbed => Matrix { rows: MaxLen, cols: Width },
            OutputProj => Matrix { rows: Width, cols: Vocab },
            SelfAttnBq | SelfAttnBk | SelfAttnBv | SelfAttnBo | CrossAttnBq | CrossAttnBk
            | CrossAttnBv | CrossAttnBo | FfnB2 | LnG1 | LnB1 | LnG2 | LnB2 | LnG3 | LnB3
            | FinalNormGain | FinalNormBias => Vector { len: Width },
            FfnB1 => Vector { len: FfnHidden },
        }
    }

    /// Layer-norm gains initialize to one, everything vector-shaped else to
    /// zero, matrices to Glorot uniform.
    fn init_kind(self) -> InitKind {
        use WeightClass::*;
        match self.shape_spec() {
            ClassShape::Matrix { .. } => InitKind::Glorot,
            ClassShape::Vector { .. } => match self {
                LnG1 | LnG2 | LnG3 | FinalNormGain => InitKind::One,
                _ => InitKind::Zero,
            },
        }
    }

    pub fn name(self) -> &'static str {
        use WeightClass::*;
        match self {
            SelfAttnWq => "self_attn.Wq",
            SelfAttnWk => "self_attn.Wk",
            SelfAttnWv => "self_attn.Wv",
            SelfAttnWo => "self_attn.Wo",
            SelfAttnBq => "self_attn.bq",
            SelfAttnBk => "self_attn.bk",
            SelfAttnBv => "self_attn.bv",
            SelfAttnBo => "self_attn.bo",
            CrossAttnWq => "cross_attn.Wq",
            CrossAttnWk => "cross_attn.Wk",
            CrossAttnWv => "cross_attn.Wv",
            CrossAttnWo => "cross_attn.Wo",
            CrossAttnBq => "cross_attn.bq",
            CrossAttnBk => "cross_attn.bk",
            CrossAttnBv => "cross_attn.bv",
            CrossAttnBo => "cross_attn.bo",
            FfnW1 => "ffn.W1",
            FfnB1 => "ffn.b1",
            FfnW2 => "ffn.W2",
            FfnB2 => "ffn.b2",
            LnG1 => "layernorm.g1",
            LnB1 => "layernorm.b1",
            LnG2 => "layernorm.g2",
            LnB2 => "layernorm.b2",
            LnG3 => "layernorm.g3",
            LnB3 => "layernorm.b3",
            FinalNormGain => "final_norm.g",
            FinalNormBias => "final_norm.b",
            Embed => "embed",
            PosEmbed => "pos_embed",
            OutputProj => "output_proj",
        }
    }

    pub fn from_name(s: &str) -> Option<WeightClass> {
        WeightClass::all().iter().copied().find(|c| c.name() == s)
    }
}

enum InitKind {
    Glorot,
    Zero,
    One,
}

/// Identifies one weight instance: its part, layer (-1 for per-part weights),
/// and class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeightKey {
    pub part: Part,
    pub layer: i32,
    pub class: WeightClass,
}

impl WeightKey {
    pub fn new(part: Part, layer: i32, class: WeightClass) -> Self {
        WeightKey { part, layer, class }
    }

    pub fn shared(part: Part, class: WeightClass) -> Self {
        WeightKey::new(part, SHARED_LAYER, class)
    }
}

impl fmt::Display for WeightKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.part, self.layer, self.class.name())
    }
}

impl FromStr for WeightKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.splitn(3, '.');
        let part = match it.next() {
            Some("encoder") => Part::Encoder,
            Some("decoder") => Part::Decoder,
            other => return Err(format!("bad part in weight key {s:?}: {other:?}")),
        };
        let layer: i32 = it
            .next()
            .ok_or_else(|| format!("missing layer in weight key {s:?}"))?
            .parse()
            .map_err(|e| format!("bad layer in weight key {s:?}: {e}"))?;
        let class = it
            .next()
            .and_then(WeightClass::from_name)
            .ok_or_else(|| format!("bad class in weight key {s:?}"))?;
        Ok(WeightKey { part, layer, class })
    }
}

/// Named store of every weight tensor of one transformer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransformerParams {
    map: BTreeMap<WeightKey, Tensor>,
}

impl TransformerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &WeightKey) -> Option<&Tensor> {
        self.map.get(key)
    }

    pub fn get_mut(&mut self, key: &WeightKey) -> Option<&mut Tensor> {
        self.map.get_mut(key)
    }

    pub fn insert(&mut self, key: WeightKey, tensor: Tensor) {
        self.map.insert(key, tensor);
    }

    pub fn remove(&mut self, key: &WeightKey) -> Option<Tensor> {
        self.map.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&WeightKey, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&WeightKey, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &WeightKey> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Checks the key set and every shape against the config.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = cfg.weight_keys();
        if self.map.len() != expected.len() {
            return Err(ModelError::Config(format!(
                "param store has {} keys, config implies {}",
                self.map.len(),
                expected.len()
            )));
        }
        for key in &expected {
            let t = self
                .map
                .get(key)
                .ok_or_else(|| ModelError::MissingWeight(key.to_string()))?;
            let want = cfg.class_shape(key.class);
            if t.shape() != want.as_slice() {
                return Err(ModelError::Config(format!(
                    "{key}: shape {:?}, expected {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        Ok(())
    }
}

/// Fresh parameters: Glorot-uniform matrices, zero biases, unit layer-norm
/// gains. Deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<TransformerParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = TransformerParams::new();
    for key in cfg.weight_keys() {
        let shape = cfg.class_shape(key.class);
        let tensor = match key.class.init_kind() {
            InitKind::Zero => Tensor::zeros(&shape),
            InitKind::One => Tensor::ones(&shape),
            InitKind::Glorot => glorot_uniform(&shape, &mut rng),
        };
        params.insert(key, tensor);
    }
    Ok(params)
}

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    debug_assert_eq!(shape.len(), 2);
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("finite by construction")
}

/// Padded integer matrix of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

impl IdMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Self {
        assert_eq!(rows * cols, data.len());
        IdMatrix { rows, cols, data }
    }

    /// Packs variable-length rows, padding with PAD to the longest.
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(PAD).take(cols - row.len()));
        }
        IdMatrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}
