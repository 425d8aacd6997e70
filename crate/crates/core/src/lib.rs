//! Joint perception-and-control library: a convolutional variational
//! autoencoder feeding a sparse liquid-time-constant control circuit, trained
//! end to end on steering prediction, plus latent-perturbation attribution
//! tooling and a deterministic synthetic scene generator for end-to-end
//! verification.

pub mod alp;
pub mod checkpoint;
pub mod error;
pub mod figures;
pub mod float;
pub mod gradcheck;
pub mod model;
pub mod ncp;
pub mod report;
pub mod scenegen;
pub mod trainer;
pub mod util;
pub mod vae;

pub use error::{Error, Result};
pub use float::Real;
