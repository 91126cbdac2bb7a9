//! Numerical laboratory for preference fine-tuning objectives on a didactic
//! token bandit: exact categorical arithmetic, a tabular softmax policy with
//! analytic gradients, the standard contrastive / policy-gradient /
//! weighted-likelihood losses behind one unified trainer, and numerical
//! verifiers for the forward-vs-reverse-KL learning-dynamics results the
//! bandit illustrates.
//!
//! Everything is deterministic given a seed, gradients are analytic (no
//! autodiff), and expectations over the bandit are computed exactly from
//! policy slices wherever the factored structure allows it.

pub mod algorithms;
pub mod bandit;
pub mod dist;
pub mod error;
pub mod policy;
pub mod reward_model;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
