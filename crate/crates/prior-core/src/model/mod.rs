//! Conditional sequence models sharing one prediction interface: an exact
//! count-based n-gram (used as a testing oracle and a cheap reference) and a
//! micro decoder-only transformer with hand-written analytic gradients.
//!
//! "Image" conditioning is a reserved prefix-token range: the image is given
//! to the model as `prefix_len` attribute tokens ahead of the BOS-prefixed
//! caption. The reference (text-only) role is the same model with
//! `prefix_len = 0`.

mod checkpoint;
mod config;
mod gradcheck;
mod ngram;
mod transformer;

pub use checkpoint::CheckpointBundle;
pub use config::ModelConfig;
pub use gradcheck::{grad_check, GradientReport};
pub use ngram::{ngram_fit, ngram_prob, NGramModel};
pub use transformer::{
    forward_backward, forward_backward_with_ctx, forward_job, forward_nll, greedy_decode,
    transformer_init, BackwardCtx, ForwardResult, LossTarget, ParamSpec, Parameters, SequenceJob,
};
