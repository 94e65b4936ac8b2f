//! The parameter generator: a learnable map that turns a stacked subset of
//! teacher weight instances into one student weight.
//!
//! A matrix subset stacked as `[I_t, O_t, L']` is contracted along its input
//! axis by `W_I` in `R^{I_t x I_s}`, along its output axis by `W_O` in
//! `R^{O_t x O_s}`, and along its layer axis by `W_L` in `R^{L' x 1}`, in
//! that fixed order. The squeezed result passes through
//! `S = tanh(T) .* scale + shift`, where `scale` and `shift` have the student
//! weight's shape. Each generated student weight owns an independent set of
//! these five tensors. An axis map is only present when it changes the size
//! of its axis (for equal teacher/student shapes only the scale-shift map
//! remains); vocab and position axes are shared and never contracted.
//! Vector-shaped weights (biases, norms) use the output and layer maps only.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    glorot_uniform, ClassShape, ModelConfig, ModelError, Part, TransformerParams, WeightClass,
    WeightKey,
};
use crate::taxonomy::{split, SubsetPlan, TaxonomyError, WeightGroup};
use crate::tensor::{Graph, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("generator config: {0}")]
    Config(String),
    #[error("no generator entry for {0}")]
    MissingEntry(String),
    #[error("teacher weight {0} missing while stacking subset")]
    MissingTeacherWeight(String),
}

/// Which weight classes the generator produces. Everything else trains
/// directly as ordinary student parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectedClasses {
    All,
    None,
    /// Encoder weights except its embedding tables.
    Encoder,
    /// Decoder weights except its embedding tables and output projection.
    Decoder,
    /// Encoder token and positional embeddings.
    EmbedEnc,
    /// Decoder token and positional embeddings.
    EmbedDec,
    /// The output projection.
    Output,
}

impl SelectedClasses {
    pub fn contains(&self, key: &WeightKey) -> bool {
        use WeightClass::{Embed, OutputProj, PosEmbed};
        let is_embed = matches!(key.class, Embed | PosEmbed);
        match self {
            SelectedClasses::All => true,
            SelectedClasses::None => false,
            SelectedClasses::Encoder => key.part == Part::Encoder && !is_embed,
            SelectedClasses::Decoder => {
                key.part == Part::Decoder && !is_embed && key.class != OutputProj
            }
            SelectedClasses::EmbedEnc => key.part == Part::Encoder && is_embed,
            SelectedClasses::EmbedDec => key.part == Part::Decoder && is_embed,
            SelectedClasses::Output => key.class == OutputProj,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectedClasses::All => "all",
            SelectedClasses::None => "none",
            SelectedClasses::Encoder => "encoder",
            SelectedClasses::Decoder => "decoder",
            SelectedClasses::EmbedEnc => "embed_enc",
            SelectedClasses::EmbedDec => "embed_dec",
            SelectedClasses::Output => "output",
        }
    }
}

/// The five named components of one per-weight generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GenComponent {
    InputMap,
    OutputMap,
    LayerMap,
    Scale,
    Shift,
}

impl GenComponent {
    /// Component names used in checkpoint keys.
    pub fn name(self) -> &'static str {
        match self {
            GenComponent::InputMap => "W_I",
            GenComponent::OutputMap => "W_O",
            GenComponent::LayerMap => "W_L",
            GenComponent::Scale => "W",
            GenComponent::Shift => "B",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "W_I" => Some(GenComponent::InputMap),
            "W_O" => Some(GenComponent::OutputMap),
            "W_L" => Some(GenComponent::LayerMap),
            "W" => Some(GenComponent::Scale),
            "B" => Some(GenComponent::Shift),
            _ => None,
        }
    }
}

/// Learnable set for a single generated student weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `[I_t, I_s]`; present only when the input axis changes size.
    pub input_map: Option<Tensor>,
    /// `[O_t, O_s]`; present only when the output axis changes size.
    pub output_map: Option<Tensor>,
    /// `[L', 1]`; present only when the subset holds more than one layer.
    pub layer_map: Option<Tensor>,
    /// Student-shaped elementwise scale, initialized to ones.
    pub scale: Tensor,
    /// Student-shaped elementwise shift, initialized to zeros.
    pub shift: Tensor,
}

impl GeneratorParams {
    pub fn components(&self) -> impl Iterator<Item = (GenComponent, &Tensor)> {
        [
            (GenComponent::InputMap, self.input_map.as_ref()),
            (GenComponent::OutputMap, self.output_map.as_ref()),
            (GenComponent::LayerMap, self.layer_map.as_ref()),
            (GenComponent::Scale, Some(&self.scale)),
            (GenComponent::Shift, Some(&self.shift)),
        ]
        .into_iter()
        .filter_map(|(c, t)| t.map(|t| (c, t)))
    }

    pub fn component_mut(&mut self, c: GenComponent) -> Option<&mut Tensor> {
        match c {
            GenComponent::InputMap => self.input_map.as_mut(),
            GenComponent::OutputMap => self.output_map.as_mut(),
            GenComponent::LayerMap => self.layer_map.as_mut(),
            GenComponent::Scale => Some(&mut self.scale),
            GenComponent::Shift => Some(&mut self.shift),
        }
    }

    pub fn param_count(&self) -> usize {
        self.components().map(|(_, t)| t.numel()).sum()
    }
}

/// One generated student weight: where its teacher subset comes from and the
/// learnable transformation applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenEntry {
    pub plan: SubsetPlan,
    pub params: GeneratorParams,
}

/// The full parameter generator for one teacher/student pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub teacher_cfg: ModelConfig,
    pub student_cfg: ModelConfig,
    pub selected: SelectedClasses,
    entries: BTreeMap<WeightKey, GenEntry>,
}

/// Graph handles for one entry's components.
#[derive(Debug, Clone, Copy)]
pub struct BoundGenParams {
    pub input_map: Option<TensorId>,
    pub output_map: Option<TensorId>,
    pub layer_map: Option<TensorId>,
    pub scale: TensorId,
    pub shift: TensorId,
}

/// Generator components bound into a graph, keyed by student weight.
pub struct BoundGenerator {
    map: BTreeMap<WeightKey, BoundGenParams>,
}

impl BoundGenerator {
    pub fn get(&self, key: &WeightKey) -> Option<&BoundGenParams> {
        self.map.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&WeightKey, &BoundGenParams)> {
        self.map.iter()
    }
}

impl Generator {
    /// Builds a generator for every selected student weight. Axis maps are
    /// Glorot-initialized; scale and shift start at the constants 1 and 0.
    /// Deterministic per seed.
    pub fn build(
        teacher_cfg: &ModelConfig,
        student_cfg: &ModelConfig,
        selected: SelectedClasses,
        seed: u64,
    ) -> Result<Generator, GeneratorError> {
        teacher_cfg.validate()?;
        student_cfg.validate()?;
        if teacher_cfg.vocab != student_cfg.vocab {
            return Err(GeneratorError::Config(format!(
                "teacher vocab {} != student vocab {}; vocabularies are shared",
                teacher_cfg.vocab, student_cfg.vocab
            )));
        }
        if teacher_cfg.max_len != student_cfg.max_len {
            return Err(GeneratorError::Config(format!(
                "teacher max_len {} != student max_len {}; position tables are shared",
                teacher_cfg.max_len, student_cfg.max_len
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        // Per-(part, class) split plans, computed once.
        let mut plan_cache: BTreeMap<(Part, WeightClass), Vec<SubsetPlan>> = BTreeMap::new();

        for key in student_cfg.weight_keys() {
            if !selected.contains(&key) {
                continue;
            }
            let plans = plan_cache
                .entry((key.part, key.class))
                .or_insert_with(|| {
                    let layers: Vec<i32> = if key.class.per_layer() {
                        let depth = match key.part {
                            Part::Encoder => teacher_cfg.enc_depth,
                            Part::Decoder => teacher_cfg.dec_depth,
                        };
                        (0..depth as i32).collect()
                    } else {
                        vec![crate::model::SHARED_LAYER]
                    };
                    let group = WeightGroup {
                        part: key.part,
                        class: key.class,
                        layers,
                    };
                    let student_depth = match key.part {
                        Part::Encoder => student_cfg.enc_depth,
                        Part::Decoder => student_cfg.dec_depth,
                    };
                    split(&group, student_depth).unwrap_or_default()
                });
            if plans.is_empty() {
                let (t, s) = match key.part {
                    Part::Encoder => (teacher_cfg.enc_depth, student_cfg.enc_depth),
                    Part::Decoder => (teacher_cfg.dec_depth, student_cfg.dec_depth),
                };
                return Err(TaxonomyError::NonDivisibleDepths {
                    teacher: t,
                    student: s,
                }
                .into());
            }
            let plan = plans
                .iter()
                .find(|p| p.student_layer == key.layer)
                .expect("plan exists for every student layer")
                .clone();
            let params = init_gen_params(teacher_cfg, student_cfg, &plan, &mut rng)?;
            entries.insert(key, GenEntry { plan, params });
        }

        Ok(Generator {
            teacher_cfg: teacher_cfg.clone(),
            student_cfg: student_cfg.clone(),
            selected,
            entries,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&WeightKey, &GenEntry)> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&WeightKey, &mut GenEntry)> {
        self.entries.iter_mut()
    }

    pub fn entry(&self, key: &WeightKey) -> Option<&GenEntry> {
        self.entries.get(key)
    }

    pub fn entry_mut(&mut self, key: &WeightKey) -> Option<&mut GenEntry> {
        self.entries.get_mut(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.params.param_count()).sum()
    }
}

fn init_gen_params(
    teacher_cfg: &ModelConfig,
    student_cfg: &ModelConfig,
    plan: &SubsetPlan,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratorParams, GeneratorError> {
    let chunk = plan.source_layers.len();
    let layer_map = if chunk > 1 {
        Some(glorot_uniform(&[chunk, 1], rng))
    } else {
        None
    };
    let spec = plan.class.shape_spec();
    match spec {
        ClassShape::Matrix { rows, cols } => {
            let (rt, ct) = (teacher_cfg.dim(rows), teacher_cfg.dim(cols));
            let (rs, cs) = (student_cfg.dim(rows), student_cfg.dim(cols));
            let input_map = axis_map(rt, rs, rows.contractible(), plan, "input", rng)?;
            let output_map = axis_map(ct, cs, cols.contractible(), plan, "output", rng)?;
            Ok(GeneratorParams {
                input_map,
                output_map,
                layer_map,
                scale: Tensor::ones(&[rs, cs]),
                shift: Tensor::zeros(&[rs, cs]),
            })
        }
        ClassShape::Vector { len } => {
            let lt = teacher_cfg.dim(len);
            let ls = student_cfg.dim(len);
            let output_map = axis_map(lt, ls, len.contractible(), plan, "output", rng)?;
            Ok(GeneratorParams {
                input_map: None,
                output_map,
                layer_map,
                scale: Tensor::ones(&[ls]),
                shift: Tensor::zeros(&[ls]),
            })
        }
    }
}

fn axis_map(
    teacher_dim: usize,
    student_dim: usize,
    contractible: bool,
    plan: &SubsetPlan,
    axis: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Tensor>, GeneratorError> {
    if teacher_dim == student_dim {
        return Ok(None);
    }
    if !contractible {
        return Err(GeneratorError::Config(format!(
            "{}: {axis} axis differs ({teacher_dim} vs {student_dim}) but is not contractible",
            plan.student_key()
        )));
    }
    Ok(Some(glorot_uniform(&[teacher_dim, student_dim], rng)))
}

/// Inserts every generator component into the graph.
pub fn bind_generator(g: &mut Graph, gen: &Generator, trainable: bool) -> BoundGenerator {
    let mut map = BTreeMap::new();
    for (key, entry) in gen.entries() {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone().with_grad())
            } else {
                g.constant(t.clone())
            }
        };
        map.insert(
            *key,
            BoundGenParams {
                input_map: entry.params.input_map.as_ref().map(&mut put),
                output_map: entry.params.output_map.as_ref().map(&mut put),
                layer_map: entry.params.layer_map.as_ref().map(&mut put),
                scale: put(&entry.params.scale),
                shift: put(&entry.params.shift),
            },
        );
    }
    BoundGenerator { map }
}

/// Stacks a plan's teacher instances along a trailing layer axis: matrices
/// become `[rows, cols, L']`, vectors `[len, L']`.
pub fn stack_subset(
    teacher: &TransformerParams,
    plan: &SubsetPlan,
) -> Result<Tensor, GeneratorError> {
    let mut sources = Vec::with_capacity(plan.source_layers.len());
    for key in plan.source_keys() {
        sources.push(
            teacher
                .get(&key)
                .ok_or_else(|| GeneratorError::MissingTeacherWeight(key.to_string()))?,
        );
    }
    let chunk = sources.len();
    let base_shape = sources[0].shape().to_vec();
    let numel = sources[0].numel();
    let mut data = vec![0.0; numel * chunk];
    for (l, src) in sources.iter().enumerate() {
        debug_assert_eq!(src.shape(), base_shape.as_slice());
        for (i, &v) in src.data().iter().enumerate() {
            data[i * chunk + l] = v;
        }
    }
    let mut shape = base_shape;
    shape.push(chunk);
    Ok(Tensor::from_vec(&shape, data)?)
}

/// Applies the three axis contractions (input, output, layer, in that fixed
/// order) and the scale-shift map to a stacked matrix subset `[I_t, O_t, L']`,
/// producing the student weight `[I_s, O_s]`. Fully differentiable with
/// respect to the generator components.
pub fn transform_subset(
    g: &mut Graph,
    subset: TensorId,
    gp: &BoundGenParams,
) -> Result<TensorId, GeneratorError> {
    let shape = g.value(subset).shape().to_vec();
    if shape.len() != 3 {
        return Err(GeneratorError::Config(format!(
            "matrix subset must be rank 3, got {shape:?}"
        )));
    }
    let (mut rows, mut cols, chunk) = (shape[0], shape[1], shape[2]);
    check_layer_map(g, gp, chunk)?;

    let mut x = subset;
    if let Some(wi) = gp.input_map {
        let wi_shape = g.value(wi).shape().to_vec();
        if wi_shape[0] != rows {
            return Err(shape_err("input map", &wi_shape, &[rows, cols, chunk]));
        }
        // [I_t, O_t, L'] contracted along axis 0: W_I^T x reshape(T).
        let wt = g.transpose(wi)?;
        let flat = g.reshape(x, &[rows, cols * chunk])?;
        let m = g.matmul(wt, flat)?;
        rows = wi_shape[1];
        x = g.reshape(m, &[rows, cols, chunk])?;
    }
    if let Some(wo) = gp.output_map {
        let wo_shape = g.value(wo).shape().to_vec();
        if wo_shape[0] != cols {
            return Err(shape_err("output map", &wo_shape, &[rows, cols, chunk]));
        }
        // Bring the output axis last, contract it, and restore the layout.
        let p = g.permute(x, &[0, 2, 1])?;
        let flat = g.reshape(p, &[rows * chunk, cols])?;
        let m = g.matmul(flat, wo)?;
        cols = wo_shape[1];
        let back = g.reshape(m, &[rows, chunk, cols])?;
        x = g.permute(back, &[0, 2, 1])?;
    }
    let squeezed = if let Some(wl) = gp.layer_map {
        let flat = g.reshape(x, &[rows * cols, chunk])?;
        let m = g.matmul(flat, wl)?;
        g.reshape(m, &[rows, cols])?
    } else {
        g.reshape(x, &[rows, cols])?
    };
    scale_shift(g, squeezed, gp, &[rows, cols])
}

/// Vector analog of [`transform_subset`] for `[O_t, L']` subsets: output map,
/// layer map, then scale and shift over `[O_s]`.
pub fn transform_vector(
    g: &mut Graph,
    subset: TensorId,
    gp: &BoundGenParams,
) -> Result<TensorId, GeneratorError> {
    let shape = g.value(subset).shape().to_vec();
    if shape.len() != 2 {
        return Err(GeneratorError::Config(format!(
            "vector subset must be rank 2, got {shape:?}"
        )));
    }
    let (mut len, chunk) = (shape[0], shape[1]);
    check_layer_map(g, gp, chunk)?;

    let mut x = subset;
    if let Some(wo) = gp.output_map {
        let wo_shape = g.value(wo).shape().to_vec();
        if wo_shape[0] != len {
            return Err(shape_err("output map", &wo_shape, &[len, chunk]));
        }
        let wt = g.transpose(wo)?;
        x = g.matmul(wt, x)?;
        len = wo_shape[1];
    }
    let squeezed = if let Some(wl) = gp.layer_map {
        let m = g.matmul(x, wl)?;
        g.reshape(m, &[len])?
    } else {
        g.reshape(x, &[len])?
    };
    scale_shift(g, squeezed, gp, &[len])
}

fn check_layer_map(g: &Graph, gp: &BoundGenParams, chunk: usize) -> Result<(), GeneratorError> {
    match gp.layer_map {
        Some(wl) => {
            let s = g.value(wl).shape();
            if s != [chunk, 1] {
                return Err(GeneratorError::Config(format!(
                    "layer map shape {s:?} does not match subset depth {chunk}"
                )));
            }
        }
        None => {
            if chunk != 1 {
                return Err(GeneratorError::Config(format!(
                    "subset has {chunk} layers but no layer map"
                )));
            }
        }
    }
    Ok(())
}

fn scale_shift(
    g: &mut Graph,
    x: TensorId,
    gp: &BoundGenParams,
    expect: &[usize],
) -> Result<TensorId, GeneratorError> {
    let scale_shape = g.value(gp.scale).shape().to_vec();
    if scale_shape != expect {
        return Err(shape_err("scale", &scale_shape, expect));
    }
    let t = g.tanh(x);
    let scaled = g.hadamard(t, gp.scale)?;
    Ok(g.add(scaled, gp.shift)?)
}

fn shape_err(what: &str, got: &[usize], expect: &[usize]) -> GeneratorError {
    GeneratorError::Config(format!(
        "{what} shape {got:?} incompatible with {expect:?}"
    ))
}

/// Emits every selected student weight in-graph from a frozen teacher.
/// Teacher subsets enter as constants, so gradients flow only into the
/// generator components.
pub fn generate(
    g: &mut Graph,
    gen: &Generator,
    bound: &BoundGenerator,
    teacher: &TransformerParams,
) -> Result<BTreeMap<WeightKey, TensorId>, GeneratorError> {
    let mut out = BTreeMap::new();
    for (key, entry) in gen.entries() {
        let gp = bound
            .get(key)
            .ok_or_else(|| GeneratorError::MissingEntry(key.to_string()))?;
        let stacked = stack_subset(teacher, &entry.plan)?;
        let subset = g.constant(stacked);
        let id = match key.class.shape_spec() {
            ClassShape::Matrix { .. } => transform_subset(g, subset, gp)?,
            ClassShape::Vector { .. } => transform_vector(g, subset, gp)?,
        };
        out.insert(*key, id);
    }
    Ok(out)
}

/// Runs the generator outside any training graph and extracts the produced
/// student weights as plain tensors (selected classes only).
pub fn materialize(
    gen: &Generator,
    teacher: &TransformerParams,
) -> Result<TransformerParams, GeneratorError> {
    let mut g = Graph::new();
    let bound = bind_generator(&mut g, gen, false);
    let ids = generate(&mut g, gen, &bound, teacher)?;
    let mut params = TransformerParams::new();
    for (key, id) in ids {
        params.insert(key, g.value(id).clone());
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn teacher_cfg() -> ModelConfig {
        ModelConfig::new(2, 2, 8, 2, 9, 10)
    }

    fn student_cfg() -> ModelConfig {
        ModelConfig::new(2, 1, 4, 2, 9, 10)
    }

    /// Independent naive oracle: the three axis contractions written as
    /// literal nested index sums, then tanh * scale + shift.
    #[allow(clippy::too_many_arguments)]
    fn oracle_matrix(
        subset: &[f64],
        it: usize,
        ot: usize,
        lp: usize,
        wi: Option<(&[f64], usize)>,
        wo: Option<(&[f64], usize)>,
        wl: Option<&[f64]>,
        scale: &[f64],
        shift: &[f64],
    ) -> Vec<f64> {
        let (is_, x1) = match wi {
            Some((w, is_)) => {
                let mut x = vec![0.0; is_ * ot * lp];
                for a in 0..is_ {
                    for j in 0..ot {
                        for k in 0..lp {
                            let mut acc = 0.0;
                            for i in 0..it {
                                acc += subset[(i * ot + j) * lp + k] * w[i * is_ + a];
                            }
                            x[(a * ot + j) * lp + k] = acc;
                        }
                    }
                }
                (is_, x)
            }
            None => (it, subset.to_vec()),
        };
        let (os_, x2) = match wo {
            Some((w, os_)) => {
                let mut x = vec![0.0; is_ * os_ * lp];
                for a in 0..is_ {
                    for b in 0..os_ {
                        for k in 0..lp {
                            let mut acc = 0.0;
                            for j in 0..ot {
                                acc += x1[(a * ot + j) * lp + k] * w[j * os_ + b];
                            }
                            x[(a * os_ + b) * lp + k] = acc;
                        }
                    }
                }
                (os_, x)
            }
            None => (ot, x1),
        };
        let mut x3 = vec![0.0; is_ * os_];
        for a in 0..is_ {
            for b in 0..os_ {
                match wl {
                    Some(w) => {
                        let mut acc = 0.0;
                        for k in 0..lp {
                            acc += x2[(a * os_ + b) * lp + k] * w[k];
                        }
                        x3[a * os_ + b] = acc;
                    }
                    None => x3[a * os_ + b] = x2[a * os_ + b],
                }
            }
        }
        x3.iter()
            .enumerate()
            .map(|(i, v)| v.tanh() * scale[i] + shift[i])
            .collect()
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn build_initializes_scale_to_ones_and_shift_to_zeros() {
        let gen = Generator::build(&teacher_cfg(), &student_cfg(), SelectedClasses::All, 7)
            .unwrap();
        assert!(!gen.is_empty());
        for (_, entry) in gen.entries() {
            assert!(entry.params.scale.data().iter().all(|&v| v == 1.0));
            assert!(entry.params.shift.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn equal_shapes_leave_only_scale_and_shift() {
        let cfg = teacher_cfg();
        let gen = Generator::build(&cfg, &cfg, SelectedClasses::All, 3).unwrap();
        for (key, entry) in gen.entries() {
            assert!(entry.params.input_map.is_none(), "{key}");
            assert!(entry.params.output_map.is_none(), "{key}");
            assert!(entry.params.layer_map.is_none(), "{key}");
        }
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = Generator::build(&teacher_cfg(), &student_cfg(), SelectedClasses::All, 7)
            .unwrap();
        let b = Generator::build(&teacher_cfg(), &student_cfg(), SelectedClasses::All, 7)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transform_walks_the_expected_shapes() {
        // 512 x 2048 stacked three deep contracts to a 256 x 1024 student
        // weight through 256/1024-column axis maps.
        let (it, ot, lp, is_, os_) = (512, 2048, 3, 256, 1024);
        let mut g = Graph::new();
        let subset = g.constant(Tensor::zeros(&[it, ot, lp]));
        let gp = BoundGenParams {
            input_map: Some(g.constant(Tensor::full(&[it, is_], 0.01))),
            output_map: Some(g.constant(Tensor::full(&[ot, os_], 0.01))),
            layer_map: Some(g.constant(Tensor::full(&[lp, 1], 0.5))),
            scale: g.constant(Tensor::ones(&[is_, os_])),
            shift: g.constant(Tensor::zeros(&[is_, os_])),
        };
        let out = transform_subset(&mut g, subset, &gp).unwrap();
        assert_eq!(g.value(out).shape(), &[is_, os_]);
    }

    #[test]
    fn zero_subset_with_unit_scale_gives_zero_weight() {
        let (it, ot, lp, is_, os_) = (6, 8, 2, 3, 4);
        let mut g = Graph::new();
        let subset = g.constant(Tensor::zeros(&[it, ot, lp]));
        let gp = BoundGenParams {
            input_map: Some(g.constant(Tensor::from_vec(&[it, is_], rand_vec(it * is_, 1)).unwrap())),
            output_map: Some(g.constant(Tensor::from_vec(&[ot, os_], rand_vec(ot * os_, 2)).unwrap())),
            layer_map: Some(g.constant(Tensor::from_vec(&[lp, 1], rand_vec(lp, 3)).unwrap())),
            scale: g.constant(Tensor::ones(&[is_, os_])),
            shift: g.constant(Tensor::zeros(&[is_, os_])),
        };
        let out = transform_subset(&mut g, subset, &gp).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matrix_transform_matches_naive_oracle() {
        let (it, ot, lp, is_, os_) = (8, 16, 3, 4, 8);
        let subset = rand_vec(it * ot * lp, 11);
        let wi = rand_vec(it * is_, 12);
        let wo = rand_vec(ot * os_, 13);
        let wl = rand_vec(lp, 14);
        let scale = rand_vec(is_ * os_, 15);
        let shift = rand_vec(is_ * os_, 16);

        let mut g = Graph::new();
        let sid = g.constant(Tensor::from_vec(&[it, ot, lp], subset.clone()).unwrap());
        let gp = BoundGenParams {
            input_map: Some(g.constant(Tensor::from_vec(&[it, is_], wi.clone()).unwrap())),
            output_map: Some(g.constant(Tensor::from_vec(&[ot, os_], wo.clone()).unwrap())),
            layer_map: Some(g.constant(Tensor::from_vec(&[lp, 1], wl.clone()).unwrap())),
            scale: g.constant(Tensor::from_vec(&[is_, os_], scale.clone()).unwrap()),
            shift: g.constant(Tensor::from_vec(&[is_, os_], shift.clone()).unwrap()),
        };
        let out = transform_subset(&mut g, sid, &gp).unwrap();
        let expect = oracle_matrix(
            &subset,
            it,
            ot,
            lp,
            Some((&wi, is_)),
            Some((&wo, os_)),
            Some(&wl),
            &scale,
            &shift,
        );
        let got = g.value(out).data();
        let max_diff = got
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn sequential_contractions_equal_fused_three_index_sum() {
        let (it, ot, lp, is_, os_) = (5, 7, 2, 3, 4);
        let subset = rand_vec(it * ot * lp, 21);
        let wi = rand_vec(it * is_, 22);
        let wo = rand_vec(ot * os_, 23);
        let wl = rand_vec(lp, 24);

        // Fused: S'_{ab} = sum_{i,j,k} T_{ijk} WI_{ia} WO_{jb} WL_{k}.
        let mut fused = vec![0.0; is_ * os_];
        for a in 0..is_ {
            for b in 0..os_ {
                let mut acc = 0.0;
                for i in 0..it {
                    for j in 0..ot {
                        for k in 0..lp {
                            acc += subset[(i * ot + j) * lp + k]
                                * wi[i * is_ + a]
                                * wo[j * os_ + b]
                                * wl[k];
                        }
                    }
                }
                fused[a * os_ + b] = acc;
            }
        }

        let mut g = Graph::new();
        let sid = g.constant(Tensor::from_vec(&[it, ot, lp], subset.clone()).unwrap());
        let gp = BoundGenParams {
            input_map: Some(g.constant(Tensor::from_vec(&[it, is_], wi).unwrap())),
            output_map: Some(g.constant(Tensor::from_vec(&[ot, os_], wo).unwrap())),
            layer_map: Some(g.constant(Tensor::from_vec(&[lp, 1], wl).unwrap())),
            // Identity scale-shift exposes the raw contraction through atanh.
            scale: g.constant(Tensor::ones(&[is_, os_])),
            shift: g.constant(Tensor::zeros(&[is_, os_])),
        };
        let out = transform_subset(&mut g, sid, &gp).unwrap();
        let got = g.value(out).data();
        for (i, (&gv, &fv)) in got.iter().zip(&fused).enumerate() {
            assert!((gv - fv.tanh()).abs() <= 1e-12, "index {i}");
        }
    }

    #[test]
    fn vector_transform_matches_naive_oracle() {
        let (ot, lp, os_) = (6, 2, 3);
        let subset = rand_vec(ot * lp, 31);
        let wo = rand_vec(ot * os_, 32);
        let wl = rand_vec(lp, 33);
        let scale = rand_vec(os_, 34);
        let shift = rand_vec(os_, 35);

        let mut expect = vec![0.0; os_];
        for b in 0..os_ {
            let mut acc = 0.0;
            for j in 0..ot {
                for k in 0..lp {
                    acc += subset[j * lp + k] * wo[j * os_ + b] * wl[k];
                }
            }
            expect[b] = acc.tanh() * scale[b] + shift[b];
        }

        let mut g = Graph::new();
        let sid = g.constant(Tensor::from_vec(&[ot, lp], subset).unwrap());
        let gp = BoundGenParams {
            input_map: None,
            output_map: Some(g.constant(Tensor::from_vec(&[ot, os_], wo).unwrap())),
            layer_map: Some(g.constant(Tensor::from_vec(&[lp, 1], wl).unwrap())),
            scale: g.constant(Tensor::from_vec(&[os_], scale).unwrap()),
            shift: g.constant(Tensor::from_vec(&[os_], shift).unwrap()),
        };
        let out = transform_vector(&mut g, sid, &gp).unwrap();
        let got = g.value(out).data();
        for (i, (&gv, &ev)) in got.iter().zip(&expect).enumerate() {
            assert!((gv - ev).abs() <= 1e-12, "index {i}");
        }
    }

    #[test]
    fn zero_bias_subset_generates_zero_bias() {
        let (ot, lp, os_) = (6, 2, 3);
        let mut g = Graph::new();
        let sid = g.constant(Tensor::zeros(&[ot, lp]));
        let gp = BoundGenParams {
            input_map: None,
            output_map: Some(g.constant(Tensor::from_vec(&[ot, os_], rand_vec(ot * os_, 1)).unwrap())),
            layer_map: Some(g.constant(Tensor::from_vec(&[lp, 1], rand_vec(lp, 2)).unwrap())),
            scale: g.constant(Tensor::ones(&[os_])),
            shift: g.constant(Tensor::zeros(&[os_])),
        };
        let out = transform_vector(&mut g, sid, &gp).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_width_vector_uses_layer_map_only() {
        // Same width, two teacher layers per student layer: only the layer
        // map and the scale-shift map should exist.
        let t = ModelConfig::new(2, 2, 8, 2, 9, 10);
        let s = ModelConfig::new(1, 1, 8, 2, 9, 10);
        let gen = Generator::build(&t, &s, SelectedClasses::All, 5).unwrap();
        let key = WeightKey::new(Part::Encoder, 0, WeightClass::FfnB1);
        let entry = gen.entry(&key).unwrap();
        assert!(entry.params.output_map.is_none());
        assert!(entry.params.layer_map.is_some());
    }

    #[test]
    fn scaling_subset_to_zero_yields_shift_exactly() {
        let (it, ot, lp, is_, os_) = (4, 6, 2, 2, 3);
        let shift = rand_vec(is_ * os_, 44);
        let mut g = Graph::new();
        let sid = g.constant(Tensor::zeros(&[it, ot, lp]));
        let gp = BoundGenParams {
            input_map: Some(g.constant(Tensor::from_vec(&[it, is_], rand_vec(it * is_, 41)).unwrap())),
            output_map: Some(g.constant(Tensor::from_vec(&[ot, os_], rand_vec(ot * os_, 42)).unwrap())),
            layer_map: Some(g.constant(Tensor::from_vec(&[lp, 1], rand_vec(lp, 43)).unwrap())),
            scale: g.constant(Tensor::from_vec(&[is_, os_], rand_vec(is_ * os_, 45)).unwrap()),
            shift: g.constant(Tensor::from_vec(&[is_, os_], shift.clone()).unwrap()),
        };
        let out = transform_subset(&mut g, sid, &gp).unwrap();
        assert_eq!(g.value(out).data(), shift.as_slice());
    }

    #[test]
    fn generate_covers_the_full_student_key_set() {
        let (t_cfg, s_cfg) = (teacher_cfg(), student_cfg());
        let teacher = init_params(&t_cfg, 1).unwrap();
        let gen = Generator::build(&t_cfg, &s_cfg, SelectedClasses::All, 2).unwrap();
        let student = materialize(&gen, &teacher).unwrap();
        let expected = s_cfg.weight_keys();
        assert_eq!(student.len(), expected.len());
        for key in &expected {
            let got = student.get(key).unwrap();
            assert_eq!(got.shape(), s_cfg.class_shape(key.class).as_slice(), "{key}");
        }
    }

    #[test]
    fn encoder_only_selection_excludes_decoder_keys() {
        let (t_cfg, s_cfg) = (teacher_cfg(), student_cfg());
        let teacher = init_params(&t_cfg, 1).unwrap();
        let gen = Generator::build(&t_cfg, &s_cfg, SelectedClasses::Encoder, 2).unwrap();
        let student = materialize(&gen, &teacher).unwrap();
        assert!(student.keys().all(|k| k.part == Part::Encoder));
        assert!(!student
            .keys()
            .any(|k| matches!(k.class, WeightClass::Embed | WeightClass::PosEmbed)));
    }

    #[test]
    fn teacher_receives_no_gradients_through_generation() {
        let (t_cfg, s_cfg) = (teacher_cfg(), student_cfg());
        let teacher = init_params(&t_cfg, 1).unwrap();
        let gen = Generator::build(&t_cfg, &s_cfg, SelectedClasses::All, 2).unwrap();
        let key = WeightKey::new(Part::Encoder, 0, WeightClass::FfnW1);
        let entry = gen.entry(&key).unwrap();

        let mut g = Graph::new();
        let bound = bind_generator(&mut g, &gen, true);
        let subset = g.constant(stack_subset(&teacher, &entry.plan).unwrap());
        let out = transform_subset(&mut g, subset, bound.get(&key).unwrap()).unwrap();
        let s = g.sum_all(out);
        g.backward(s).unwrap();

        assert!(g.grad(bound.get(&key).unwrap().scale).is_some());
        assert!(g.grad(subset).is_none(), "frozen teacher grew a gradient");
    }

    #[test]
    fn generator_gradients_pass_finite_difference_check() {
        let (it, ot, lp, is_, os_) = (4, 6, 2, 2, 3);
        let subset = rand_vec(it * ot * lp, 51);
        let sizes = [it * is_, ot * os_, lp, is_ * os_, is_ * os_];
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut flat = rand_vec(total, 52);

        // Scalar loss over all five components packed into one buffer.
        let eval = |flat: &[f64], g: &mut Graph, trainable: bool| {
            let slice = |c: usize| flat[offsets[c]..offsets[c] + sizes[c]].to_vec();
            let mut put = |shape: &[usize], data: Vec<f64>| {
                let t = Tensor::from_vec(shape, data).unwrap();
                if trainable {
                    g.leaf(t.with_grad())
                } else {
                    g.constant(t)
                }
            };
            let gp = BoundGenParams {
                input_map: Some(put(&[it, is_], slice(0))),
                output_map: Some(put(&[ot, os_], slice(1))),
                layer_map: Some(put(&[lp, 1], slice(2))),
                scale: put(&[is_, os_], slice(3)),
                shift: put(&[is_, os_], slice(4)),
            };
            let sid = g.constant(Tensor::from_vec(&[it, ot, lp], subset.clone()).unwrap());
            let out = transform_subset(g, sid, &gp).unwrap();
            let t = g.tanh(out);
            let s = g.sum_all(t);
            (s, gp)
        };

        let mut g = Graph::new();
        let (loss, gp) = eval(&flat, &mut g, true);
        g.backward(loss).unwrap();
        let mut analytic = Vec::with_capacity(total);
        analytic.extend_from_slice(g.grad(gp.input_map.unwrap()).unwrap());
        analytic.extend_from_slice(g.grad(gp.output_map.unwrap()).unwrap());
        analytic.extend_from_slice(g.grad(gp.layer_map.unwrap()).unwrap());
        analytic.extend_from_slice(g.grad(gp.scale).unwrap());
        analytic.extend_from_slice(g.grad(gp.shift).unwrap());

        let h = 1e-6;
        for i in 0..total {
            let orig = flat[i];
            flat[i] = orig + h;
            let mut gh = Graph::new();
            let (lh, _) = eval(&flat, &mut gh, false);
            flat[i] = orig - h;
            let mut gl = Graph::new();
            let (ll, _) = eval(&flat, &mut gl, false);
            flat[i] = orig;
            let fd = (gh.item(lh) - gl.item(ll)) / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd) / denom).abs() < 1e-4,
                "component index {i}: analytic {a}, fd {fd}"
            );
        }
    }
}
