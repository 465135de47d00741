//! Fixed-effects GMM for panel data models with individual-specific
//! (nonadditive) coefficient vectors.
//!
//! The library estimates a common parameter θ jointly with one coefficient
//! vector α_i per individual from moment conditions E[g(z_it; θ, α_i)] = 0,
//! applying GMM separately to each individual's time series. It provides:
//!
//! * one-step and two-step estimators with per-individual weighting
//!   ([`gmm`]);
//! * analytic estimators of the O(1/T) incidental-parameter bias of the
//!   profile score and the BC/IBC/SBC corrections ([`bias`]);
//! * bias-corrected plug-in functionals of the data and of the individual
//!   effects, with standard errors ([`functionals`]);
//! * closed-form estimators and corrections for the linear correlated
//!   random-coefficient IV model, plus pooled fixed-coefficient baselines
//!   ([`linear_rc`]);
//! * a calibrated rational-addiction Monte Carlo harness ([`montecarlo`]).
//!
//! Per-individual work (inner solves, bias blocks, replications) is
//! data-parallel via rayon when the default `parallel` feature is enabled;
//! disabling it yields a fully sequential build with identical results.

pub mod bias;
pub mod error;
pub mod functionals;
pub mod gmm;
pub mod linear_rc;
pub mod model;
pub mod montecarlo;
pub mod panel;
pub mod par;
pub mod weighting;

pub use error::{Error, Result};
