//! Prototype-based domain adaptation on feature vectors.
//!
//! Cosine-softmax prototype losses, mutual regularization between a linear
//! head and the prototype classifiers, cosine-weighted prototype updates and
//! mean-teacher self-training, plus the distribution diagnostics used to
//! inspect them.

pub mod adapt;
pub mod cli;
pub mod error;
pub mod losses;
pub mod mathcore;
pub mod metrics;
pub mod prototypes;
pub mod rng;
pub mod synthbench;

pub use error::{PacfError, Result};
