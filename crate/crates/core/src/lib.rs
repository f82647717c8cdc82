//! Big cooperative learning on Gaussian mixtures.
//!
//! One parameter set is trained to match a target mixture simultaneously
//! through many views of it: the joint distribution, marginals and
//! conditionals of arbitrary coordinate subsets, and all of these again in
//! rotated or noised domains. The crate provides the closed-form mixture
//! algebra, divergence estimators and pathwise gradients, task construction,
//! the phase-scheduled SGD trainer, and 2-D loss-surface sweeps.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod density;
pub mod divergence;
pub mod error;
pub mod gmm;
pub mod numeric;
pub mod pipeline;
pub mod surfaces;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use gmm::{Gmm, IndexSet};
