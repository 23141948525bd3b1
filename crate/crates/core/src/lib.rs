//! Adaptive early exiting for split inference over a noisy wireless channel.

pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod policy;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
