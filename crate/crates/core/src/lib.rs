//! Local occupancy-enhanced 6-DoF grasp pose estimation from single-view
//! point clouds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grasp;
pub mod io;
pub mod model;
pub mod nn;
pub mod occupancy;
pub mod pointcloud;
pub mod rng;
pub mod scene;
pub mod study;
pub mod train;
pub mod triplane;

pub use error::{Error, Result};
