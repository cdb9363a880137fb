//! Dual-token vision transformer built from first principles.
//!
//! Local detail comes from a convolutional encoder, global context from
//! attention over a small downsampled grid, and a 2-D grid of global tokens
//! carries position-aware context from block to block and stage to stage.

pub mod analysis;
pub mod block;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use block::{dual_token_block, standalone_block, BlockActivations, DualTokenBlock, GlobalTokens};
pub use config::{BlockConfig, DsKind, GlobalMode, LocalKind, MlpKind, ModelConfig, StageConfig, PRESETS};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradReport};
pub use layers::{Ctx, ParamStore};
pub use model::Model;
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
