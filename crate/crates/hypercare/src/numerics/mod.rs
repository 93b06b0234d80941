//! Dense double-precision tensor primitives with exact reverse-mode
//! gradients of a scalar loss, plus a finite-difference verifier and a
//! round-tripping parameter checkpoint format.

mod checkpoint;
mod fdcheck;
mod store;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use fdcheck::finite_diff_check;
pub use store::ParamStore;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {}x{} vs {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward requires a scalar loss, got {0}x{1}")]
    NotScalarLoss(usize, usize),
    #[error("loss function is not deterministic: {0} vs {1} at the same parameters")]
    NonDeterministicLoss(f64, f64),
    #[error("unknown parameter key {0:?}")]
    UnknownParam(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}
