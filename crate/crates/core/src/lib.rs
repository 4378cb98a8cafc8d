//! Accent-invariant prompt tuning for a frozen CTC speech recognizer.
//!
//! The pipeline pretrains a small transformer CTC backbone on synthetic
//! first-language speech features, fits an accent module on top of a frozen
//! tap layer, then trains an input-dependent prompt generator that is
//! prepended to the backbone's embedded input. The prompt is optimized to
//! keep CTC loss low while driving the mutual information between accent
//! features of the prompted and unprompted input towards zero.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the pipeline itself runs everything in [`Real`].

pub mod accent;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod mine;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod scalar;
pub mod synthcorpus;
pub mod tape;
pub mod tensor;
pub mod trainer;

/// Scalar type the shipped pipeline runs in.
pub type Real = f64;
/// Matrix of [`Real`].
pub type RealMat = tensor::Mat<Real>;
