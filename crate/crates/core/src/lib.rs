//! Multi-object tracking with part / object / union appearance tokens and
//! global softmax association.

pub mod assignment;
pub mod association;
pub mod checkpoint;
pub mod config;
pub mod csc_attention;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod mot;
pub mod tracker;
pub mod training;
pub mod nn;

pub use error::{Error, Result};
