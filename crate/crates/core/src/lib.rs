//! Cross-modality universal adversarial perturbations against a
//! metric-learning retrieval model.
//!
//! The crate bundles everything needed to study the attack end to end at
//! desk scale:
//!
//! - [`synthdata`]: a seeded visible/infrared person dataset and the
//!   grayscale transform,
//! - [`embedder`]: a small hand-differentiated embedding network and its
//!   triplet training,
//! - [`centroids`]: identity centroids per modality,
//! - [`attack`]: the momentum-chained universal attack, a stepwise universal
//!   baseline and per-image FGSM / PGD / MI-FGSM,
//! - [`eval`]: CMC and mAP with a brute-force cross-check,
//! - [`theorycheck`]: joint vs sequential optimization on convex quadratics,
//! - [`experiment`]: config-driven pipeline stages used by the CLI.

pub mod attack;
pub mod blob;
pub mod centroids;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod theorycheck;

pub use error::{Error, Result};
