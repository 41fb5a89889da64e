//! Cross-modal alignment and fusion through entropy-regularized optimal transport.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: dense `f64` matrices, stable reductions, seeded RNG and a
//!   central-difference gradient oracle.
//! * [`sinkhorn`]: cosine similarity, the log-domain Sinkhorn-Knopp solver with
//!   uniform marginals, and a brute-force permutation oracle for small squares.
//! * [`losses`]: the transport-plan contrastive loss, token cross-entropy and
//!   their weighted sum, each with analytic gradients.
//! * [`fusion`]: transport-plan attention, a parameter-free scaled dot-product
//!   baseline, and token-wise concatenation with a linear projection.
//! * [`model`]: a small audio/visual encoder + prefix-conditioned decoder with
//!   hand-written backpropagation, AdamW and a warmup/cosine schedule.
//! * [`harness`]: synthetic paired data, training/evaluation loops, the FMAT
//!   tensor format, checkpoints, configs and the gradient-check suite.

pub mod error;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sinkhorn;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState};
