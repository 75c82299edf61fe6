//! Transformer velocity field over frame-aligned pitch, note and voicing inputs.

pub mod checkpoint;
pub mod linalg;
pub mod model;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdamState, Checkpoint, TrainingMeta};
pub use linalg::Real;
pub use model::{backward, forward, forward_with_cache, Cache, DropFlags, NetInput};
pub use params::{param_count, parameter_shapes, Layout, ModelConfig, Parameters, TensorSpec};
