//! Pool-based active learning with Bernoulli-masked Bayesian MLPs.
//!
//! The crate provides the classifier ([`bayes_mlp`]), acquisition scores
//! ([`scoring`]) including the dot-product goal-driven score, brute-force
//! references for validating them ([`exact_oracle`]), a synthetic
//! two-modality task ([`datasets`]), the query loop ([`al_loop`]) and the
//! study runners behind the command-line tool ([`studies`]).

pub mod al_loop;
pub mod bayes_mlp;
pub mod datasets;
pub mod error;
pub mod exact_oracle;
pub mod scoring;
pub mod seed;
pub mod studies;

pub use error::{Error, Result};
