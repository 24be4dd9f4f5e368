//! Likelihood-free Bayesian inversion with a joint generative network and
//! ABC by Subset Simulation over its latent space, plus the linear
//! straight-ray tomography problem and its exact Gaussian posterior used to
//! validate it.

pub mod diagnostics;
pub mod error;
pub mod gp;
pub mod io;
pub mod jgnn;
pub mod linalg;
pub mod neural;
pub mod pipeline;
pub mod posterior;
pub mod rng;
pub mod sinkhorn;
pub mod subsim;
pub mod tomography;

pub use error::{Error, Result};
