//! General Bayesian L² calibration of inexact mathematical models.
//!
//! The pipeline: smooth field data with kernel ridge regression
//! ([`smoother`]), minimize the L² distance between the smoother and the
//! model ([`calibration`]), compute sandwich matrices for the estimator
//! ([`asymptotics`]), rescale the loss so the generalized posterior has
//! frequentist-calibrated spread ([`scaling`]), and sample or approximate that
//! posterior ([`posterior`]). [`simharness`] replicates the whole pipeline
//! for coverage studies.

pub mod asymptotics;
pub mod calibration;
pub mod error;
pub mod models;
pub mod numerics;
pub mod posterior;
pub mod scaling;
pub mod simharness;
pub mod smoother;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/smoothing.md")]
    mod smoothing {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/sandwich.md")]
    mod sandwich {}
    #[doc = include_str!("../../../book/src/scaling.md")]
    mod scaling {}
    #[doc = include_str!("../../../book/src/posterior.md")]
    mod posterior {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
