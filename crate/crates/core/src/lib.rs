//! Latent Markov models for longitudinal categorical data.
//!
//! Observed categorical responses are treated as noisy measurements of an
//! unobserved first-order Markov chain over `k` latent states. The crate
//! covers the estimation machinery end to end:
//!
//! * scaled forward-backward recursions and exact posterior computations
//!   ([`recursions`]);
//! * EM estimation with closed-form and Fisher-scoring M-steps under
//!   constrained measurement and latent parameterizations, with multi-start
//!   orchestration ([`em`]);
//! * covariates in the measurement model or the latent model, including a
//!   bivariate marginal parameterization ([`covariates`]);
//! * a multilevel layer with a discrete cluster-level random effect
//!   ([`multilevel`]);
//! * observed-information standard errors, local identifiability, AIC/BIC
//!   and likelihood-ratio tests with chi-bar-squared nulls ([`inference`]);
//! * global and local path prediction ([`decode`]).
//!
//! ```
//! use lamark::data::{simulate_panel, SimulateOptions};
//! use lamark::em::{fit, FitOptions};
//! use lamark::params::{ModelParams, ModelSpec};
//! use ndarray::{array, Array3};
//!
//! // a 2-state chain observed through a noisy binary response
//! let phi = Array3::from_shape_vec(
//!     (4, 2, 2),
//!     vec![
//!         0.9, 0.1, 0.2, 0.8, 0.9, 0.1, 0.2, 0.8,
//!         0.9, 0.1, 0.2, 0.8, 0.9, 0.1, 0.2, 0.8,
//!     ],
//! )
//! .unwrap();
//! let truth = ModelParams::from_probs(
//!     array![0.5, 0.5],
//!     vec![array![[0.85, 0.15], [0.1, 0.9]]; 3],
//!     vec![phi],
//! );
//! let mut spec = ModelSpec::basic(2);
//! spec.measurement = lamark::params::MeasurementSpec::TimeInvariant;
//! spec.transition = lamark::params::TransitionSpec::Homogeneous;
//!
//! let sim = simulate_panel(&SimulateOptions {
//!     spec: &spec,
//!     params: &truth,
//!     n: 300,
//!     seed: 7,
//!     covariates: None,
//!     cluster_sizes: None,
//! })
//! .unwrap();
//! let fitted = fit(&sim.data, &spec, &FitOptions { starts: 2, ..Default::default() }).unwrap();
//! assert!(fitted.converged);
//! ```

pub mod coords;
pub mod covariates;
pub mod data;
pub mod decode;
pub mod em;
pub mod error;
pub mod inference;
pub mod links;
pub mod multilevel;
pub mod params;
pub mod recursions;
pub mod scoring;

pub use error::{LmError, Result};
