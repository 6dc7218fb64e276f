//! Domain generalization through domain-conditioned, low-rank weight generation.
//!
//! Every weight-bearing layer owns a parameter tensor with one trailing slice
//! per source domain plus a shared slice. A domain descriptor `z` contracts
//! that trailing mode to produce concrete weights; the bias-only descriptor
//! yields the domain-agnostic network used on unseen domains. Parameter
//! tensors can be Tucker-factorized so the domains share a low-rank basis.

pub mod error;
pub mod tensor;
pub mod tucker;
pub mod domain;
pub mod dataset;
pub mod network;
pub mod shift;
pub mod experiment;
pub mod cli;

pub use error::{Error, Result};
