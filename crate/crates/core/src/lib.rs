//! Strong-lens classification with self-attention encoders.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: n-dimensional arrays with tape-based reverse-mode autodiff.
//! * [`transformer`]: sinusoidal positional encoding, multi-head attention and
//!   post-norm encoder layers.
//! * [`detector`]: CNN backbone + encoder + dense head models, checkpoints.
//! * [`training`]: binary cross-entropy, ADAM, staged schedules, augmentation.
//! * [`metrics`]: accuracy, ROC/AUROC, TPR at a false-positive budget, weighted f1.
//! * [`lenssim`]: Sérsic galaxies and SIS-lensed arcs rendered into multi-band stamps.

pub mod detector;
pub mod error;
pub mod lenssim;
pub mod metrics;
pub mod par;
pub mod params;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use par::Parallelism;
pub use tensor::{Scalar, Tape, Tensor, Var};
