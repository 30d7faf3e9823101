//! Optimal sampling of a Wiener process for remote estimation over an
//! unreliable channel.
//!
//! A source samples a Wiener process and ships the samples through a
//! channel that loses each packet independently and delays the rest by
//! an i.i.d. random time. The estimator holds the last delivered value.
//! This crate computes the sampling policies that minimize the long-run
//! average squared estimation error:
//!
//! - [`solver::solve_mse_opt`]: the signal-aware optimum. A two-layer
//!   solve: value iteration over tabulated stage functions in the inner
//!   loop, bisection on the objective value in the outer loop.
//! - [`solver::reliable_closed_form`]: the reliable-channel special case
//!   with its scalar closed form, used as an independent oracle.
//! - [`solver::solve_age_opt`]: the best signal-agnostic (age-threshold)
//!   policy from a scalar renewal equation.
//! - [`sim`]: a discrete-time Monte Carlo simulator of the whole loop
//!   for validating solver outputs and comparing policies.

pub mod channel;
pub mod quad;
pub mod sim;
pub mod solver;
pub mod stagecost;
pub mod valueiter;

pub use channel::{ChannelModel, DelayKind, DelayModel};
pub use sim::{Policy, SimConfig, SimResult};
pub use solver::{AgeResult, SolverConfig, SolverResult};
