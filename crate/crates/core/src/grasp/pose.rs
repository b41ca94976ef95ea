use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{RotationMatrix, Vec3};
use crate::pointcloud::{voxel_key, VoxelKey};

pub const N_ROTATIONS: usize = 12;
pub const N_DEPTHS: usize = 4;
pub const N_CELLS: usize = N_ROTATIONS * N_DEPTHS;
pub const ROTATION_STEP_DEG: f64 = 15.0;
pub const DEPTH_STEP: f64 = 0.01;

/// Flat index of a (rotation, depth) cell; rotation-major.
pub fn cell_index(rot_idx: usize, depth_idx: usize) -> usize {
    rot_idx * N_DEPTHS + depth_idx
}

pub fn cell_of(flat: usize) -> (usize, usize) {
    (flat / N_DEPTHS, flat % N_DEPTHS)
}

/// Two-finger parallel gripper geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperSpec {
    /// Half the maximum opening; widths live in `(0, 2 * radius]`.
    pub radius: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub finger_thickness: f64,
    pub palm_depth: f64,
}

impl Default for GripperSpec {
    fn default() -> Self {
        Self { radius: 0.05, d_min: -0.01, d_max: 0.04, finger_thickness: 0.01, palm_depth: 0.02 }
    }
}

impl GripperSpec {
    pub fn finger_length(&self) -> f64 {
        self.d_max - self.d_min
    }

    pub fn max_width(&self) -> f64 {
        2.0 * self.radius
    }

    /// Finger and palm boxes in the gripper frame `(t, u, s)`: `t` along the
    /// closing axis, `s` along the approach axis, origin at the grasp centre.
    pub fn slabs(&self, width: f64) -> [Slab; 3] {
        let t = self.finger_thickness;
        let hw = width / 2.0;
        let finger_s = (-self.d_max - self.d_min) / 2.0;
        let finger_half = [t / 2.0, t / 2.0, self.finger_length() / 2.0];
        [
            Slab { center: Vec3::new(hw + t / 2.0, 0.0, finger_s), half: finger_half },
            Slab { center: Vec3::new(-hw - t / 2.0, 0.0, finger_s), half: finger_half },
            Slab {
                center: Vec3::new(0.0, 0.0, -self.d_max - self.palm_depth / 2.0),
                half: [hw + t, t / 2.0, self.palm_depth / 2.0],
            },
        ]
    }

    /// Whether a gripper-frame point lies in the space swept by the closing
    /// fingers (where grasped material is expected).
    pub fn in_closing_volume(&self, local: &Vec3, width: f64, voxel: f64) -> bool {
        local.x.abs() < width / 2.0
            && local.y.abs() <= (self.finger_thickness + voxel) / 2.0
            && local.z >= -self.d_max
            && local.z <= -self.d_min
    }
}

/// Axis-aligned box in the gripper frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slab {
    pub center: Vec3,
    pub half: [f64; 3],
}

impl Slab {
    pub fn half_diagonal(&self) -> f64 {
        (self.half[0].powi(2) + self.half[1].powi(2) + self.half[2].powi(2)).sqrt()
    }

    /// Lattice covering the box, faces included, with spacing at most `step`.
    pub fn samples(&self, step: f64) -> Vec<Vec3> {
        let n: Vec<usize> = self.half.iter().map(|h| ((2.0 * h / step).ceil() as usize).max(1)).collect();
        let mut out = Vec::with_capacity((n[0] + 1) * (n[1] + 1) * (n[2] + 1));
        for i in 0..=n[0] {
            for j in 0..=n[1] {
                for k in 0..=n[2] {
                    let f = |idx: usize, cnt: usize, h: f64| -h + 2.0 * h * idx as f64 / cnt as f64;
                    out.push(
                        self.center
                            + Vec3::new(f(i, n[0], self.half[0]), f(j, n[1], self.half[1]), f(k, n[2], self.half[2])),
                    );
                }
            }
        }
        out
    }
}

/// A decoded 6-DoF grasp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspPose {
    /// Grasp point on the observed surface.
    pub point: Vec3,
    /// Maps +z onto the approach direction.
    pub rotation: RotationMatrix,
    pub rot_idx: usize,
    pub depth_idx: usize,
    pub width: f64,
    pub score: f64,
}

impl GraspPose {
    pub fn angle(&self) -> f64 {
        (self.rot_idx as f64 * ROTATION_STEP_DEG).to_radians()
    }

    pub fn depth(&self) -> f64 {
        (self.depth_idx + 1) as f64 * DEPTH_STEP
    }

    /// Approach direction composed with the in-plane rotation.
    pub fn full_rotation(&self) -> RotationMatrix {
        self.rotation.compose(&RotationMatrix::about_z(self.angle()))
    }

    pub fn approach(&self) -> Vec3 {
        self.rotation.column(2)
    }

    pub fn closing_axis(&self) -> Vec3 {
        self.full_rotation().column(0)
    }

    /// Point midway between the fingertips' closing faces.
    pub fn center(&self) -> Vec3 {
        self.point + self.approach() * self.depth()
    }

    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.center() + self.full_rotation().apply(local)
    }

    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        self.full_rotation().apply_inverse(&(world - self.center()))
    }

    pub fn validate(&self, gripper: &GripperSpec) -> Result<()> {
        let finite = self.point.iter().all(|v| v.is_finite())
            && self.rotation.0.iter().all(|v| v.is_finite())
            && self.width.is_finite();
        if !finite {
            return Err(Error::NonFinite("grasp pose".into()));
        }
        if self.rot_idx >= N_ROTATIONS || self.depth_idx >= N_DEPTHS {
            return Err(Error::InvalidArgument(format!("cell ({}, {})", self.rot_idx, self.depth_idx)));
        }
        if !(self.width > 0.0 && self.width <= gripper.max_width() + 1e-12) {
            return Err(Error::InvalidArgument(format!("width {} outside (0, {}]", self.width, gripper.max_width())));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression: visit poses by descending score (ties keep
/// input order) and drop any whose grasp point is closer than `radius` to an
/// already kept one. At most `top` poses survive.
pub fn pose_nms(poses: &[GraspPose], radius: f64, top: usize) -> Vec<GraspPose> {
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| poses[b].score.total_cmp(&poses[a].score));
    let mut kept: Vec<GraspPose> = Vec::new();
    for i in order {
        if kept.len() >= top {
            break;
        }
        let p = &poses[i];
        if kept.iter().all(|k| (k.point - p.point).norm() >= radius) {
            kept.push(*p);
        }
    }
    kept
}

/// Body sample points of a pose in world coordinates, excluding those that
/// fall in the closing volume.
fn body_samples(pose: &GraspPose, gripper: &GripperSpec, step: f64) -> Vec<Vec3> {
    gripper.slabs(pose.width).iter().flat_map(|s| s.samples(step)).map(|l| pose.to_world(&l)).collect()
}

/// Whether the gripper body of `pose` overlaps an occupied voxel whose centre
/// lies outside the closing volume. Body samples are spaced `voxel / 2`.
pub fn pose_collides(pose: &GraspPose, occupied: &HashSet<VoxelKey>, gripper: &GripperSpec, voxel: f64) -> bool {
    body_samples(pose, gripper, voxel / 2.0).iter().any(|p| {
        let key = voxel_key(p, voxel);
        if !occupied.contains(&key) {
            return false;
        }
        let c = Vec3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * voxel;
        !gripper.in_closing_volume(&pose.to_local(&c), pose.width, voxel)
    })
}

/// Drops poses whose body collides with the predicted occupied voxels.
pub fn collision_filter(
    poses: &[GraspPose],
    occupied: &HashSet<VoxelKey>,
    gripper: &GripperSpec,
    voxel: f64,
) -> Vec<GraspPose> {
    if occupied.is_empty() {
        return poses.to_vec();
    }
    poses.iter().filter(|p| !pose_collides(p, occupied, gripper, voxel)).copied().collect()
}

pub const POSE_CSV_HEADER: &str = "px,py,pz,qs,qx,qy,qz,rot_idx,depth_idx,width,score";

/// One CSV row per pose; the quaternion encodes the full rotation.
pub fn poses_to_csv(poses: &[GraspPose]) -> String {
    let mut out = String::from(POSE_CSV_HEADER);
    out.push('\n');
    for p in poses {
        let q = p.full_rotation().to_quaternion();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            p.point.x, p.point.y, p.point.z, q.s, q.vx, q.vy, q.vz, p.rot_idx, p.depth_idx, p.width, p.score
        );
    }
    out
}

/// `n` near-uniform unit directions on a Fibonacci spiral.
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// The 26 normalized directions of the `{-1, 0, 1}³ \ {0}` lattice.
pub fn coarse_directions() -> Vec<Vec3> {
    let mut out = Vec::with_capacity(26);
    for x in -1..=1 {
        for y in -1..=1 {
            for z in -1..=1 {
                if (x, y, z) != (0, 0, 0) {
                    out.push(Vec3::new(x as f64, y as f64, z as f64).normalize());
                }
            }
        }
    }
    out
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn pose() -> impl Strategy<Value = GraspPose> {
        (prop::array::uniform3(-0.1f64..0.1), 0u32..5, 0.01f64..0.1).prop_map(|(p, s, width)| GraspPose {
            point: Vec3::new(p[0], p[1], p[2]),
            rotation: RotationMatrix::identity(),
            rot_idx: 0,
            depth_idx: 0,
            width,
            score: s as f64 / 4.0,
        })
    }

    proptest! {
        #[test]
        fn nms_keeps_separated_best_first(poses in prop::collection::vec(pose(), 0..40), radius in 0.0f64..0.08, top in 1usize..20) {
            let kept = pose_nms(&poses, radius, top);
            prop_assert!(kept.len() <= top);
            prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(poses.contains(a));
                for b in &kept[i + 1..] {
                    prop_assert!((a.point - b.point).norm() >= radius);
                }
            }
            if kept.len() < top {
                for p in &poses {
                    prop_assert!(kept.contains(p) || kept.iter().any(|k| (k.point - p.point).norm() < radius));
                }
            }
        }

        #[test]
        fn collision_filter_only_removes(poses in prop::collection::vec(pose(), 0..10), keys in prop::collection::vec(prop::array::uniform3(-12i64..12), 0..40)) {
            let occupied: HashSet<VoxelKey> = keys.into_iter().collect();
            let g = GripperSpec::default();
            let kept = collision_filter(&poses, &occupied, &g, 0.01);
            let mut it = poses.iter();
            for k in &kept {
                prop_assert!(it.any(|p| p == k));
                prop_assert!(!pose_collides(k, &occupied, &g, 0.01));
            }
            prop_assert_eq!(collision_filter(&poses, &HashSet::new(), &g, 0.01), poses);
        }
    }
}
