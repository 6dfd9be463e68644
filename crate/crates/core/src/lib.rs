//! Nonparametric mixture modeling for real-valued, first-order Markov time
//! series.
//!
//! The transition density is a truncated Dirichlet-process mixture of Gaussian
//! autoregressions with state-dependent weights, fitted by a Gibbs/Metropolis
//! sampler with a slice-sampling step for the stick-breaking variables. On top
//! of the fitted draws the crate provides transition-density grids with
//! credible bands, forecast densities, conditional-expectation curves,
//! multi-step forecasts, and one-step-ahead posterior predictive ordinates for
//! model comparison.
//!
//! Two comparison models ship alongside the general mixture: a restricted
//! mixture whose kernel guarantees a stationary marginal, and a two-regime
//! Gaussian threshold autoregression.

pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod prior;
pub mod sampler;
pub mod simulate;
pub mod stats;
pub mod variants;

pub use error::{Error, Result};
pub use model::{
    choose_truncation, stick_break, ComponentParams, Hyperparams, MixtureState, StickVector,
    TransitionModel,
};
pub use prior::{default_priors, DataProxy};
pub use sampler::{GeneralSampler, HyperpriorConfig, SamplerSettings};
