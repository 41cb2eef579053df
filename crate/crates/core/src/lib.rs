//! Gibbs canonical ensembles over discrete energy and time spectra: weights
//! and partition functions, operator-level checks, maximum-entropy rate
//! solving, Monte Carlo decay simulation and a batch command-line front end.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod decay_sim;
pub mod ensemble;
pub mod maxent;
pub mod operator_algebra;
pub mod spectra;
mod sum;
