//! Anchor-based 3D lane detection with LSTM temporal fusion, a multi-task
//! loss suite with verified gradients, and a lane-matching evaluation, all
//! exercised on seeded synthetic driving scenes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diff;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
