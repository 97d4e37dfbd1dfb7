//! Multimodal classical-poetry classifier: a dialect-aware audio encoder,
//! visual and text heads, late fusion, training and evaluation.

pub mod audio;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod io;
pub mod model;
pub mod numerics;
pub mod train;

pub use audio::{AssembledSequence, AudioEncoder, AudioFeatureTable, EncodedAudio};
pub use error::{Error, Result};
pub use fusion::{DialectFusion, ScaleMode};
pub use model::{AblationFlags, Features, Model, ModelConfig, ModelInput, TaskKind};
pub use numerics::{Adam, AdamConfig, Graph, ParamId, ParamStore, Rng, Tensor, Var};
