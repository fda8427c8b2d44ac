//! finfilt: filtering methods for three problems in mathematical finance.
//!
//! - A discrete-time projection filter on polynomial exponential manifolds
//!   for stochastic-volatility estimation, with a grid-based exact Bayes
//!   filter as correctness oracle ([`expfam`], [`svm_filter`],
//!   [`exact_oracle`]).
//! - A state-space treatment of multi-factor Cox-Ingersoll-Ross term
//!   structures: moment-matched Kalman prediction/correction,
//!   quasi-maximum-likelihood estimation, and an augmented-state extended
//!   Kalman filter ([`cir_model`], [`cir_kalman`]).
//! - Risk-minimizing hedging of a claim under regime-switching volatility,
//!   with full- and partial-observation strategies ([`hedging`]).

pub mod cir_model;
pub mod density;
pub mod error;
pub mod exact_oracle;
pub mod expfam;
pub mod quad;
pub mod svm_filter;

pub use cir_model::{CirFactor, CirParams, FactorState, YieldObservation};
pub use density::{Density, FnDensity, Gaussian, GaussianMixture};
pub use error::{Error, Result};
pub use exact_oracle::GridDensity;
pub use expfam::{ExpFamilyDensity, HankelMatrix, MomentVector};
pub use svm_filter::{ProjFilterState, RecoveryMode, SvmParams, SvmPath};
