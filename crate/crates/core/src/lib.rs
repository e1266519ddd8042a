//! Regression Monte Carlo solvers for multidimensional superquadratic BSDEs and
//! path-dependent FBSDEs.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`], [`rng`], [`paths`]: time grids, reproducible Gaussian streams and path
//!   ensembles, plus Euler forward simulation.
//! * [`problem`], [`catalog`], [`audit`]: problem descriptions, the built-in problem
//!   catalog and empirical checks of declared constants.
//! * [`planner`]: admissible interval lengths, partition sizes and level bounds.
//! * [`regression`], [`bsde`]: conditional-expectation regression and the backward
//!   Picard scheme on a sub-interval.
//! * [`fbsde`]: short-horizon coupled forward-backward systems.
//! * [`global`]: level-by-level gluing on the whole horizon, the superquadratic route,
//!   the exponential transform for diagonally quadratic drivers and the perturbation
//!   route.
//! * [`girsanov`]: stochastic exponentials, BMO estimates and the Markovian
//!   FBSDE-from-BSDE construction.
//! * [`reflection`]: Skorokhod maps on polyhedral domains and reflected SDEs.

pub mod audit;
pub mod bsde;
pub mod catalog;
pub mod error;
pub mod fbsde;
pub mod girsanov;
pub mod global;
pub mod grid;
pub mod paths;
pub mod planner;
pub mod problem;
pub mod reduce;
pub mod reflection;
pub mod regression;
pub mod rng;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use paths::{PathBundle, PathView};
