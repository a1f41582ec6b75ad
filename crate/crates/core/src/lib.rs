//! Self-consuming generative loops on a Gaussian low-rank surrogate.
//!
//! The crate models class-conditional data as noisy low-rank Gaussians,
//! trains analytic-score diffusion generators on them, and feeds samples back
//! into training. It provides the overlap measure OLE for class entanglement,
//! Monte Carlo checks of the OLE and confidence bounds, a linear probe used for
//! latent space filtering, and the loop harness comparing curation strategies.

pub mod bounds;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod ole;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod subspace;

pub use error::{Error, Result};
