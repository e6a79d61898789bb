//! Monte Carlo wave-function simulation of open quantum systems.
//!
//! Trajectories of a pure state evolve under an effective non-Hermitian
//! generator and undergo random quantum jumps; averaging many of them
//! reproduces expectation values of the Lindblad master equation. Batches of
//! trajectories can be spread over worker processes with [`cluster`].

pub mod linalg;
pub mod operators;
pub mod rng;
pub mod ode;
pub mod trajectory;
pub mod cluster;
pub mod problems;
pub mod output;
pub mod run;
