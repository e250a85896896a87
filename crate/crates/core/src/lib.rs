//! Reliability-aware LiDAR–camera fusion in bird's-eye view.

pub mod attention;
pub mod autodiff;
pub mod bev;
pub mod commands;
pub mod config;
pub mod corruption;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod reliability;
pub mod rng;
pub mod scene;
pub mod selftest;
pub mod stfa;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
