//! Simulation, recurrence prediction and parameter optimization for catheter
//! ablation planning.
//!
//! The pipeline has three stages sharing one frozen feature extractor:
//!
//! 1. [`generator`]: pre-ablation view plus procedural parameter maps to a
//!    simulated post-ablation view and scar map, fused by cross-attention.
//! 2. [`recurrence`]: six-view embeddings averaged into a patient vector and
//!    classified into a recurrence logit.
//! 3. [`optimize`]: masked gradient descent on the parameter maps to lower the
//!    predicted risk.
//!
//! [`synth`] provides a procedural cohort with a known tissue response so all
//! three stages can be checked against ground truth.

pub mod error;
pub mod evaluate;
pub mod generator;
pub mod hash;
pub mod io;
pub mod metrics;
pub mod morphology;
pub mod nn;
pub mod optimize;
pub mod recurrence;
pub mod study;
pub mod synth;

pub use error::{Result, SofaError};
pub use study::{
    denormalize_params, normalize_params, validate_study, ParamChannel, ParamMaps, ParamRanges,
    PostTarget, RgbImage, ScarMask, Study, ValidationReport, ViewId, ViewSample,
};
