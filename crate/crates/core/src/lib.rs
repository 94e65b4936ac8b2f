//! Weight distillation for toy sequence-to-sequence transformers.
//!
//! A teacher encoder-decoder transformer's weights are grouped by weight
//! class, split into per-student-layer subsets, and transformed into the
//! weights of a smaller student by a learnable parameter generator (axis
//! contractions followed by a scale-and-shift map). Training happens in two
//! phases: first the generator is trained so that the student it emits has a
//! low task loss, then the emitted student is fine-tuned directly. Classic
//! knowledge-distillation and slice-initialization baselines share the same
//! machinery for comparison.
//!
//! Everything is f64, single-threaded, and deterministic for fixed seeds.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod taxonomy;
pub mod tensor;

pub use tensor::{Graph, Tensor, TensorError, TensorId};
