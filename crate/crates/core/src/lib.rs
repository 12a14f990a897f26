//! Covariance-aware conversion of grouped-query attention layers into
//! multi-head latent attention at equal KV-cache width.
//!
//! The pipeline, module by module:
//!
//! - [`calibration`]: uncentered input covariance `C` and its shrunk square root.
//! - [`scheduler`]: whitened spectra and water-filling rank allocation.
//! - [`factorizer`]: whitened truncated SVD, unwhitening into MLA down/up
//!   factors, and the KV-parity group replication.
//! - [`attention`]: GQA and MLA reference forward passes, logit drift, KV
//!   cache accounting.
//! - [`metrics`]: cross-entropy, distillation KL and the combined objective.
//!
//! [`linalg`] supplies the dense matrix type and deterministic
//! decompositions underneath all of it.

pub mod attention;
pub mod calibration;
pub mod error;
pub mod factorizer;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod scheduler;

pub use error::{CareError, Result};
pub use linalg::Matrix;
