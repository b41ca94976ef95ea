//! Synthetic SDF desk scenes, depth rendering, ground-truth occupancy and
//! the antipodal grasp oracle.

pub mod camera;
pub mod generator;
pub mod grid;
pub mod oracle;
pub mod sdf;

pub use camera::{depth_to_pointcloud, merge_views, render_depth, Camera, DepthImage};
pub use generator::{camera_ring, generate_scene, observe, select_views, SceneGenConfig, ViewConfig};
pub use grid::{ground_truth_occupancy, ground_truth_occupancy_in_frame, OccupancyGrid};
pub use oracle::{evaluate_grasp, grasp_oracle, grasp_oracle_with, label_cell, label_cells, CellLabel, GraspOutcome};
pub use sdf::{desk_bounds, scene_sdf, Aabb, PrimitiveKind, SdfPrimitive, SdfScene};
