//! Learning-based social robot navigation from demonstrations.
//!
//! The crate covers the full pipeline: episode recording and storage
//! ([`episodes`]), supervised-sample extraction ([`sampling`]), point-cloud
//! voxelization ([`voxelizer`]), the policy networks ([`network`]) built on
//! a reverse-mode tape ([`autodiff`]), behavior-cloning training and
//! evaluation ([`trainer`]), classical planner baselines ([`baselines`]),
//! and a synthetic scenario generator ([`synthgen`]).
//!
//! Everything is double precision and deterministic: a fixed seed fixes
//! initialization, batch order, and data generation bit-for-bit.

pub mod autodiff;
pub mod baselines;
pub mod episodes;
mod error;
pub mod network;
pub mod sampling;
pub mod synthgen;
pub mod trainer;
pub mod voxelizer;

pub use error::{Error, Result};
