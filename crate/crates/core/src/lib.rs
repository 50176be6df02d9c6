//! Roadmap-guided data collection and return-conditioned transformer
//! policies for 2D robot navigation.

pub mod collect;
pub mod ct;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod rng;
pub mod robot;
pub mod world;

pub use error::{Error, Result};
