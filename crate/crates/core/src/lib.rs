//! A self-contained laboratory for studying adversarial robustness of
//! binary real-vs-fake image detectors at desk scale.
//!
//! The crate provides:
//!
//! - [`nn`]: a fixed-architecture differentiable detector with exact
//!   analytic gradients with respect to inputs and parameters;
//! - [`data`]: a synthetic dataset generator whose "fake" class carries a
//!   tunable periodic artifact, plus binary dataset and PGM/PPM I/O;
//! - [`attacks`]: FGSM, PGD, Carlini-Wagner (L2) and a random-search
//!   black-box attack;
//! - [`info`]: predictive entropy, KL divergence, cross-entropy based
//!   mutual-information estimators and exact enumeration oracles over
//!   small discrete joints;
//! - [`denoise`]: the randomized blur/crop/flip preprocessing pipeline;
//! - [`trim`]: the TRIM test-time defense (entropy gate + KL gate) with
//!   quantile-based threshold calibration;
//! - [`train`]: standard, PGD-AT and TRADES training loops with per-step
//!   mutual-information tracing.
//!
//! All numeric code is generic over the [`Scalar`] floating-point type;
//! the shipped pipelines and file formats use `f64` (see the type aliases
//! at the crate root).

pub mod attacks;
pub mod data;
pub mod denoise;
pub mod error;
pub mod format;
pub mod info;
pub mod label;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod trim;

pub use error::{Error, Result};
pub use label::Label;
pub use rng::Rng;
pub use scalar::Scalar;

/// Scalar type used by the shipped pipelines and all file formats.
pub type Real = f64;

/// Image tensor at the default precision.
pub type Image = tensor::ImageTensor<Real>;

/// Detector model at the default precision.
pub type Detector = nn::DetectorModel<Real>;

/// Softmax output at the default precision.
pub type Probs = nn::SoftmaxOutput<Real>;
