//! Binary classification with leverage-optimized random Fourier features.
//!
//! The pipeline has two halves. First, `M` frequencies are drawn either from
//! the Gaussian kernel's Fourier measure (conventional features) or from the
//! same measure reweighted by the data-dependent leverage score (optimized
//! features, see [`leverage`]). Second, the coefficients of
//! `f(x) = sum_m a_{2m} cos(-2 pi v_m.x) + a_{2m+1} sin(-2 pi v_m.x)` are fit by
//! projected SGD with suffix averaging on a ridge-regularized square loss
//! (see [`sgd`]). [`experiments`] builds synthetic low-noise tasks with a
//! known Bayes classifier and measures how the excess error falls with the
//! number of examples and of features.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod kernel;
pub mod leverage;
pub mod points;
pub mod rng;
pub mod sgd;
pub mod store;

pub use error::{Error, Result};
pub use kernel::{FeatureMode, FeatureSet, GaussianKernel, RealFeatureParams};
pub use leverage::SpectralModel;
pub use points::Points;
pub use store::{CountTree, GridSpec};
