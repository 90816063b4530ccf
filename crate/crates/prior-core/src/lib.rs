//! Core library for reference-weighted language model pre-training at desk
//! scale.
//!
//! The pipeline: generate a synthetic image-caption corpus with known
//! image-related tokens ([`synth`]), train a text-only reference model and
//! score every caption token with its reference probability ([`scoring`]),
//! train a prefix-conditioned model under either the plain or the reweighted
//! objective ([`trainer`]), then analyze importance-score diagnostics
//! ([`analysis`]) and fit power-law scaling curves to the run logs
//! ([`scaling`]).

pub mod analysis;
pub mod error;
pub mod loss;
pub mod model;
pub mod rng;
pub mod scaling;
pub mod scoring;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use loss::{
    importance_weights, is_loss, is_weight_ratio, normalize_weights, ntp_loss, prior_loss,
    raw_importance, self_normalize, ImportanceWeights, IsWeights, ReferenceProbs, TokenNlls,
    EPSILON,
};
pub use rng::DetRng;
