//! Weight grouping: all instances of one weight class across layers form a
//! group, and each group is split into as many contiguous subsets of adjacent
//! layers as the student has layers. Per-part weights (embeddings, output
//! projection, final norms) form size-one groups that bypass splitting.

use thiserror::Error;

use crate::model::{Part, TransformerParams, WeightClass, WeightKey, SHARED_LAYER};

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("teacher depth {teacher} not divisible by student depth {student}")]
    NonDivisibleDepths { teacher: usize, student: usize },
    #[error("group for {part:?}/{class:?} is empty")]
    EmptyGroup { part: Part, class: WeightClass },
}

/// All instances of one weight class within one part, ordered by layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightGroup {
    pub part: Part,
    pub class: WeightClass,
    /// Layer indices of the instances, ascending; `[-1]` for per-part weights.
    pub layers: Vec<i32>,
}

impl WeightGroup {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = WeightKey> + '_ {
        self.layers
            .iter()
            .map(move |&l| WeightKey::new(self.part, l, self.class))
    }
}

/// Which teacher layers feed one student weight instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetPlan {
    pub part: Part,
    pub class: WeightClass,
    /// Student layer receiving this subset; `-1` for per-part weights.
    pub student_layer: i32,
    /// Contiguous teacher layer indices, ascending.
    pub source_layers: Vec<i32>,
}

impl SubsetPlan {
    pub fn student_key(&self) -> WeightKey {
        WeightKey::new(self.part, self.student_layer, self.class)
    }

    pub fn source_keys(&self) -> impl Iterator<Item = WeightKey> + '_ {
        self.source_layers
            .iter()
            .map(move |&l| WeightKey::new(self.part, l, self.class))
    }
}

/// Groups a complete parameter store by weight class within one part. One
/// group per per-layer class holding every layer's instance, plus a size-one
/// group for each per-part weight.
pub fn group(params: &TransformerParams, part: Part) -> Vec<WeightGroup> {
    let mut groups = Vec::new();
    for class in WeightClass::all() {
        let mut layers: Vec<i32> = params
            .keys()
            .filter(|k| k.part == part && k.class == *class)
            .map(|k| k.layer)
            .collect();
        if layers.is_empty() {
            continue;
        }
        layers.sort_unstable();
        groups.push(WeightGroup {
            part,
            class: *class,
            layers,
        });
    }
    groups
}

/// Splits a group of `L_t` instances into `student_depth` contiguous subsets
/// of `L_t / student_depth` adjacent layers each. Size-one groups are their
/// own single subset. Fails fast when the depths do not divide.
pub fn split(group: &WeightGroup, student_depth: usize) -> Result<Vec<SubsetPlan>, TaxonomyError> {
    if group.is_empty() {
        return Err(TaxonomyError::EmptyGroup {
            part: group.part,
            class: group.class,
        });
    }
    if group.layers == [SHARED_LAYER] {
        return Ok(vec![SubsetPlan {
            part: group.part,
            class: group.class,
            student_layer: SHARED_LAYER,
            source_layers: vec![SHARED_LAYER],
        }]);
    }
    let teacher_depth = group.len();
    if student_depth == 0 || teacher_depth % student_depth != 0 {
        return Err(TaxonomyError::NonDivisibleDepths {
            teacher: teacher_depth,
            student: student_depth,
        });
    }
    let chunk = teacher_depth / student_depth;
    Ok((0..student_depth)
        .map(|i| SubsetPlan {
            part: group.part,
            class: group.class,
            student_layer: i as i32,
            source_layers: group.layers[i * chunk..(i + 1) * chunk].to_vec(),
        })
        .collect())
}
