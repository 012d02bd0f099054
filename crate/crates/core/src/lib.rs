//! Covariate balancing through the dual-SVM / self-attention correspondence.
//!
//! The crate is organized bottom-up:
//!
//! * [`data`]: datasets, file formats, standardization and padding.
//! * [`datagen`]: synthetic generators with ground-truth effects.
//! * [`kernel`]: the exponential Gram matrix and attention readouts.
//! * [`oracle`]: exact balancing QP and dual SVM solvers.
//! * [`model`]: key map, value network and weight extraction.
//! * [`training`]: losses, analytic gradients and training loops.
//! * [`inference`]: ATE and ITE estimation.
//! * [`baselines`]: naive, IPW, self-normalized IPW and mean prediction.
//! * [`harness`]: experiment orchestration and reports.

pub mod baselines;
pub mod data;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod inference;
pub mod kernel;
pub mod model;
pub mod oracle;
pub mod training;

pub use error::{CinaError, Result};
