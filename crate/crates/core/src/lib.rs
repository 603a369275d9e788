//! Hybrid-ensemble latent-space data assimilation on a Lorenz-96 testbed.
//!
//! The crate provides:
//!
//! - a Lorenz-96 forecast model with a fixed-step RK4 integrator and
//!   reverse-mode gradients ([`dynamics`]);
//! - a minimal tape-based differentiation engine with Adam and L-BFGS
//!   ([`autodiff`]);
//! - autoencoder and observation-to-latent networks with their training
//!   procedures ([`latent`]);
//! - synthetic observation generation, quality control, and verification
//!   splits ([`observations`]);
//! - climatological, ensemble and hybrid covariance estimation
//!   ([`covariance`]);
//! - the latent-space BLUE update with uncertainty propagation plus four
//!   variational baselines ([`assimilation`]);
//! - a cycling experiment harness with metrics, tuning and reporting
//!   ([`harness`]).

pub mod assimilation;
pub mod autodiff;
pub mod covariance;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod latent;
pub mod observations;

pub use assimilation::{AnalysisResult, MethodKind};
pub use autodiff::Tensor;
pub use covariance::{DiagonalCovariance, EnsembleSet, FullCovariance, HybridWeights};
pub use dynamics::{ModelConfig, StateVector, Trajectory};
pub use error::{Error, Result};
pub use latent::{AutoencoderModel, LatentVector, O2LModel, QualityMask};
pub use observations::{ObservationNetwork, ObservationSet};
