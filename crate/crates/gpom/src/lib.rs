//! Learnable population-based black-box optimizer.
//!
//! A differential-evolution-style optimizer whose mutation strategy matrix
//! and crossover rates are produced by small attention/feed-forward modules,
//! trained end-to-end by gradient descent on shifted analytic functions and
//! deployed gradient-free. The crate bundles:
//!
//! - [`autodiff`]: a minimal reverse-mode engine over dense 2-D tensors;
//! - [`bench`]: the shifted benchmark family TF1-TF8 with subgradients;
//! - [`model`]: the optimizer itself (one step and T-step rollouts);
//! - [`baselines`]: DE/rand/1/bin, a (mu,lambda)-ES and the DE strategy zoo;
//! - [`train`]: the meta-training loop (per-generation losses + Adam);
//! - [`checkpoint`]: versioned JSON parameter files with exact round-trips.

pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{GpomError, Result};
pub use tensor::Tensor;
