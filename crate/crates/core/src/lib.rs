//! Multimodal agentic policy optimization on a synthetic visual-search task.
//!
//! The crate holds the NeedleGrid environment, the tool-call wire protocol,
//! a linear-softmax agent, the semantic verifier, reward shaping, the
//! clipped policy-gradient optimizer and Monte-Carlo checks of the
//! variance and convergence results.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod env;
pub mod optim;
pub(crate) mod par;
pub mod policy;
pub mod protocol;
pub mod rewards;
pub mod seed;
pub mod theorylab;
pub mod verifier;
