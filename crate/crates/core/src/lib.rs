//! Simulator for stage-failure recovery in pipeline-parallel training.
//!
//! A residual MLP is split into stages and trained with microbatched pipelining.
//! Seeded failure traces wipe stages, and a [`recovery::Recoverer`] restores them
//! with one of several strategies. [`cost`] turns iteration counts into modeled
//! wall-clock time, and [`harness`] runs and compares whole experiments.

pub mod cost;
pub mod data;
pub mod error;
pub mod failure;
pub mod harness;
pub mod model;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod recovery;
pub mod rng;

pub use error::{Error, Result};
