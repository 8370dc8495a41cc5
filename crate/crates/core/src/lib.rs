//! Sparse-gradient routing for mixture-of-experts layers.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` tensors.
//! - [`routing`]: router logits, the TopK indicator, the thresholded
//!   `MaskedSoftmax` distribution and seeded categorical sampling.
//! - [`estimators`]: the GShard gating-gradient proxy and the
//!   SparseMixer-v2 / v2* straight-through estimators, including the
//!   sequential TopK extension and inference paths.
//! - [`model`]: SwiGLU experts, the pre-LN MoE block, a small stacked model
//!   and its checkpoint format.
//! - [`balance`]: local and global load-balance loss.
//! - [`oracle`]: exact enumeration, closed-form estimator evaluation and
//!   finite-difference gradients.
//! - [`gradcheck`]: a named suite of checks built on the oracle.
//! - [`trainer`]: synthetic specialization tasks and deterministic training.
//! - [`analysis`]: routing distributions and cosine-similarity matrices.
//! - [`config`]: the JSON run configuration consumed by the CLI.

pub mod analysis;
pub mod autodiff;
pub mod balance;
pub mod config;
pub mod error;
pub mod estimators;
pub mod gradcheck;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod routing;
pub mod trainer;

pub use error::{Error, Result};

// Compiles the guide's code listings as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/balance.md")]
    mod balance {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
