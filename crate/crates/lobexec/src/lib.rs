//! Optimal execution scheduling against a resilient limit order book whose
//! depth profile switches with a Markovian market regime.
//!
//! A trader must buy a fixed inventory by a deadline. Purchases eat into the
//! book and displace the quote; the displacement (tracked through the volume
//! effect `Y`) decays through resilience, diffuses, and widens on adverse
//! jumps. The instantaneous shape of the book — and hence the cost of pushing
//! into it — depends on the current regime. The value function solves a
//! quasi-variational inequality coupling a linear parabolic operator across
//! regimes with a diagonal gradient constraint; this crate discretizes it with
//! an implicit-diffusion / explicit-jump scheme plus a lattice obstacle step,
//! classifies buy/wait regions, extracts free boundaries, and cross-checks
//! everything against an independent dynamic-programming solver and Monte
//! Carlo execution of the induced policy.

pub mod boundary;
pub mod cli;
pub mod error;
pub mod grid;
pub mod model;
pub mod oracle;
pub mod shapes;
pub mod simulate;
pub mod solver;

pub use error::{Error, Result};
