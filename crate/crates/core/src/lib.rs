//! Approximate Bayesian computation with summary statistics learned by
//! two-stage kernel distribution regression.
//!
//! A simulated dataset is treated as a bag of i.i.d. points. Bags are embedded
//! into a random Fourier feature space, either through their mean embedding
//! (the *full* variant) or through a conditional embedding operator between a
//! split of each point into an auxiliary part `z` and an important part `x`
//! (the *conditional* variant). Kernel ridge regression from those
//! representations onto the generating parameters yields a summary statistic
//! `s(y)` that approximates the posterior mean, which then drives a
//! soft-threshold rejection ABC sampler.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`kernels`] | Gaussian/linear kernels, median heuristic, random Fourier features |
//! | [`embeddings`] | sample bags, mean embeddings, MMD estimators, conditional operators |
//! | [`distreg`] | outer Gram matrices, ridge solve, model fitting, cross-validation |
//! | [`abc`] | particle simulation, soft-threshold weights, posterior summaries |
//! | [`baselines`] | K2-ABC and semi-automatic ABC |
//! | [`simulators`] | toy hierarchical Gaussian, blowfly and Lotka-Volterra models |
//! | [`harness`] | experiment configuration, multi-run protocol, aggregation |

pub mod abc;
pub mod baselines;
pub mod distreg;
pub mod embeddings;
mod error;
pub mod harness;
pub mod kernels;
pub mod seed;
pub mod simulators;

pub use error::{Error, Result};
