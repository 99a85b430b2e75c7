//! Numerical laboratory for a single-server queueing model with
//! time-varying Poisson input and its mean-field limit.
//!
//! The crate is organized around one experimental pipeline:
//!
//! * [`dist`] - service-time distributions, their hazard rates, residual
//!   means, and renewal densities, with membership checks for the class of
//!   distributions the rest of the laboratory assumes.
//! * [`rods`] - an exact combinatorial model of busy periods as rods packed
//!   on a line, with closed-form and brute-force hit counts used to
//!   cross-check each other.
//! * [`queue`] - the single server itself: path simulation, a master
//!   equation for the law of the configuration, stationary states, and
//!   monotone couplings between input flows.
//! * [`kernel`] - estimation of the self-averaging departure kernel and the
//!   empirical checks that departures of a busy server average the input
//!   rate over one busy period.
//! * [`nmp`] - the self-consistent (non-linear Markov) process: fixed-point
//!   rates, conservation checks, and relaxation diagnostics.
//! * [`meanfield`] - a closed network of many servers with uniform routing,
//!   used to test that a tagged server forgets the network once the network
//!   is large.
//! * [`relax`] - the abstract smoothing iteration behind relaxation: kernel
//!   families, renewal-equation solutions, walkers, and the counterexamples
//!   that delimit when relaxation can fail.
//!
//! Everything stochastic flows through [`streams`], so runs are reproducible
//! for a fixed seed regardless of thread count.

pub mod dist;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod meanfield;
pub mod nmp;
pub mod relax;
pub mod queue;
pub mod rods;
pub mod stats;
pub mod streams;

pub use error::PhLabError;
