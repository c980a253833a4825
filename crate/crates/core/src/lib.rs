//! Pair-proposal strategies for surfacing unobserved confounders, together
//! with the simulation models and numerical checks used to study them.

pub mod dataset;
pub mod dominance;
pub mod effect;
pub mod elicitation;
pub mod error;
pub mod experiments;
pub mod gaussmath;
pub mod matching;
pub mod propensity;
pub mod rng;
pub mod scm;
pub mod stats;

pub use dataset::Dataset;
pub use error::{Error, Result};
