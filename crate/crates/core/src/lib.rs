//! Pseudo-anomaly curation and a domain-aligned, memory-regularized video
//! anomaly detector trained with multiple-instance learning.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod curate;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
