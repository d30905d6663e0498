//! Core library for a loop-scaled CTR ranking model.
//!
//! Everything in this crate is deterministic and allocation-only (`no_std`
//! compatible with `alloc`): tensor kernels with exact shape contracts, a
//! reverse-mode gradient tape, hyper-connected residuals, sparse top-k
//! mixture-of-experts, the sandwich (entry / weight-shared loop / exit)
//! model with its prefix attention mask and KV-cached serving path,
//! synthetic dataset generation, ranking metrics, and an analytic
//! FLOPs/parameter cost model.
//!
//! File formats, the CLI and the training/eval drivers live in the
//! companion `loopctr` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod attn;
pub mod error;
pub mod gradcheck;
pub mod hcr;
pub mod moe;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::CoreError;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Crate-wide result type.
pub type Result<T> = core::result::Result<T, CoreError>;
