//! A numerical laboratory for almost-everywhere stochastic flows of SDEs
//! with irregular (possibly degenerate) coefficients.
//!
//! The crate simulates large common-noise particle ensembles of
//! `dX = b(X) dt + sigma(X) dW`, tracks the pathwise Jacobian density along
//! the flow, measures the Lebesgue-compression constant of the time-t maps,
//! runs the log-distance stability functional comparing flows across
//! regularization levels, solves the associated stochastic transport
//! equation by inverse characteristics, and estimates invariant measures by
//! time-averaged occupation measures.
//!
//! Modules mirror the pipeline:
//!
//! - [`coeff`]: coefficient fields, smoothing, structural condition checks
//! - [`noise`]: Brownian bundles with deterministic seeding, shift, reversal
//! - [`flow`]: ensemble integration, inverse flows, flow-property checks
//! - [`density`]: Jacobian density tracking and compression estimates
//! - [`maximal`]: local maximal functions and the associated inequalities
//! - [`stability`]: log-functional stability and Cauchy diagnostics
//! - [`transport`]: transport solutions by characteristics and weak forms
//! - [`invariant`]: occupation-measure construction of invariant measures
//! - [`harness`]: experiment configs, pipelines and artifact output

pub mod coeff;
pub mod density;
pub mod flow;
pub mod grid;
pub mod harness;
pub mod invariant;
pub mod maximal;
pub mod noise;
pub mod rng;
pub mod stability;
pub mod transport;
pub mod util;
