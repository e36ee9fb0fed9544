//! Estimation of information measures (KL divergence, mutual information,
//! entropy) for high-dimensional discrete distributions.
//!
//! The approach perturbs clean samples through an absorbing continuous-time
//! Markov chain that independently masks each token of a sequence, and
//! expresses the divergence between two initial distributions as a time
//! integral of a Bregman-type functional of marginal probability ratios
//! ("scores"). Scores come either from an exact small-state-space engine
//! ([`exact`]) or from a trained network ([`score`]); the Monte-Carlo
//! estimators in [`estimators`] consume both through a common interface.
//!
//! Validation workloads live in [`synth`] (ground-truth-controlled joint
//! distributions) and [`ising`] (2-D lattice spin systems with a closed-form
//! entropy reference).

pub mod ctmc;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod exact;
pub mod ising;
pub mod quad;
pub mod rng;
pub mod score;
pub mod selftest;
pub mod synth;

pub use error::{Error, Result};
