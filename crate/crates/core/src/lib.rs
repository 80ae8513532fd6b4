//! Failure probability functions (FPFs) for reliability-based design
//! optimization.
//!
//! Design variables are treated as uniformly distributed auxiliary random
//! variables, so the FPF `P(F | φ)` is proportional to the density of the
//! design component of failure samples. This crate estimates that density
//! iteratively: a pilot simulation populates the whole design space, Bayesian
//! sequential partitioning builds piecewise-constant estimates, and
//! low-density regions are repopulated with a region-restricted Markov chain
//! sampler until the density threshold drops below the smallest failure
//! probability of interest. The composite estimate is smoothed by kernel
//! regression on log-density and used as a deterministic constraint in the
//! design optimization.
//!
//! Module map:
//!
//! * [`stochastic`] design space, random-variable definitions, augmented sampling
//! * [`region`] axis-aligned boxes and box-union regions
//! * [`reliability`] direct Monte Carlo, subset simulation, modified Metropolis–Hastings
//! * [`bsp`] Bayesian sequential partitioning density estimation
//! * [`fpf`] the iterative region chain, composite density and scaling to the FPF
//! * [`smooth`] support points and the log-density regression surface
//! * [`optimize`] multistart penalized simplex search on the decoupled problem
//! * [`benchmarks`] cantilever box beam, analytic toy model, grid Monte Carlo oracle
//! * [`config`], [`artifacts`], [`cli`] run configuration, persistence and the command-line driver

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod benchmarks;
pub mod bsp;
pub mod cli;
pub mod config;
pub mod error;
pub mod fpf;
pub mod optimize;
pub mod region;
pub mod reliability;
pub mod rng;
pub mod smooth;
pub mod special;
pub mod stochastic;

pub use error::{Error, Result};
