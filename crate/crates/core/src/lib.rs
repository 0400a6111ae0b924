//! Optimization of external damper positions and gains in vibrational
//! systems, accelerated by reduced bases of the controllability space.

pub mod bench;
pub mod error;
pub mod gramian;
pub mod indicator;
pub mod irka;
pub mod kernels;
pub mod model;
pub mod optimize;
pub mod oracle;
pub mod par;
pub mod subspace;

pub use error::{Error, Result};
