//! Latent factor generator recommender.
//!
//! A feed-forward generator maps a user's (masked) rating row and demographic
//! features to user latent factors and a user bias. Combined with an item
//! factor matrix initialised from a truncated SVD of the training ratings, it
//! reconstructs the user's full rating row in a single forward pass, so new
//! users are served without re-factorization or retraining.
//!
//! Modules:
//! - [`dataset`]: MovieLens parsing, demographic encoding, rating matrices, fold plans.
//! - [`matrix`]: dense linear algebra and randomized truncated SVD.
//! - [`baselines`]: FunkSVD and BiasSVD trained by SGD.
//! - [`nnkernel`]: linear / leaky-ReLU / batch-norm / tanh network with Adam.
//! - [`lfg`]: the generator model, its training loop, inference and persistence.
//! - [`eval`]: RMSE, the two cross-validated experiments and report output.

pub mod baselines;
pub mod dataset;
pub mod eval;
pub mod lfg;
pub mod matrix;
pub mod nnkernel;
pub mod persist;

pub use dataset::{Dataset, DatasetKind, RatingMatrix};
pub use matrix::DenseMatrix;

/// Lowest rating on the MovieLens scale.
pub const RATING_MIN: f64 = 1.0;
/// Highest rating on the MovieLens scale.
pub const RATING_MAX: f64 = 5.0;

/// Clamps a raw score onto the rating scale.
#[inline]
pub fn clamp_rating(score: f64) -> f64 {
    score.clamp(RATING_MIN, RATING_MAX)
}
