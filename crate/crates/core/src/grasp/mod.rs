//! Grasp poses, candidate directions, suppression and collision filtering.

pub mod pose;

pub use pose::{
    cell_index, cell_of, coarse_directions, collision_filter, fibonacci_directions, pose_collides, pose_nms,
    poses_to_csv, GraspPose, GripperSpec, Slab, N_CELLS, N_DEPTHS, N_ROTATIONS,
};
