//! Task arithmetic with iterative difference-vector perturbation.
//!
//! Weights are [`paramspace::Checkpoint`]s made of named blocks. A difference
//! vector `δ = θ - θ_pre` is scaled block by block with learnable
//! coefficients ([`scaling`]) and the merge is refined over several outer
//! iterations ([`dvbasi`]). [`refnet`] supplies small MLPs and synthetic
//! tasks to run it on.

pub mod dvbasi;
pub mod error;
pub mod matrix;
pub mod objectives;
pub mod paramspace;
pub mod refnet;
pub mod scaling;
pub mod vectors;

pub use error::{Error, Result};
