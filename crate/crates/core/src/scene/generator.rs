use nalgebra::Matrix3;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{RotationMatrix, Vec3};
use crate::pointcloud::{farthest_point_sample, PointCloud};
use crate::rng::{self, streams};

use super::camera::{depth_to_pointcloud, merge_views, render_depth, Camera};
use super::sdf::{PrimitiveKind, SdfPrimitive, SdfScene};

/// Knobs of the cluttered-desk generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGenConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object centres are drawn from `[-xy_extent, xy_extent]²`.
    pub xy_extent: f64,
    /// Minimum surface-to-surface gap between objects.
    pub clearance: f64,
    pub max_attempts: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self { min_objects: 3, max_objects: 8, xy_extent: 0.14, clearance: 0.005, max_attempts: 400 }
    }
}

/// Camera ring used for observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    pub ring_size: usize,
    pub distance: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub target: Vec3,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            ring_size: 12,
            distance: 0.55,
            elevation_deg: 50.0,
            fov_deg: 42.0,
            width: 96,
            height: 72,
            target: Vec3::new(0.0, 0.0, 0.03),
        }
    }
}

fn random_kind(r: &mut rng::Rng) -> PrimitiveKind {
    match r.random_range(0..4) {
        0 => PrimitiveKind::Sphere { radius: r.random_range(0.02..0.04) },
        1 => PrimitiveKind::Box {
            half: [r.random_range(0.015..0.04), r.random_range(0.015..0.04), r.random_range(0.015..0.04)],
        },
        2 => PrimitiveKind::Cylinder { radius: r.random_range(0.015..0.035), half_height: r.random_range(0.02..0.06) },
        _ => PrimitiveKind::Capsule { radius: r.random_range(0.012..0.03), half_length: r.random_range(0.015..0.04) },
    }
}

/// Height of the lowest point of `kind` under rotation `rot`, relative to
/// its centre.
fn support_below(kind: &PrimitiveKind, rot: &RotationMatrix) -> f64 {
    let m = &rot.0;
    match *kind {
        PrimitiveKind::Sphere { radius } => radius,
        PrimitiveKind::Box { half } => (0..3).map(|i| m[(2, i)].abs() * half[i]).sum(),
        PrimitiveKind::Cylinder { radius, half_height } => {
            let az = m[(2, 2)].abs().min(1.0);
            az * half_height + radius * (1.0 - az * az).sqrt()
        }
        PrimitiveKind::Capsule { radius, half_length } => m[(2, 2)].abs() * half_length + radius,
    }
}

fn random_orientation(kind: &PrimitiveKind, r: &mut rng::Rng) -> RotationMatrix {
    let yaw = RotationMatrix::about_z(r.random_range(0.0..std::f64::consts::TAU));
    let lying = !matches!(kind, PrimitiveKind::Sphere { .. }) && r.random_bool(0.5);
    if lying {
        let tip = RotationMatrix(Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
        yaw.compose(&tip)
    } else {
        yaw
    }
}

/// Smallest value of `other`'s SDF over a lattice of interior points of
/// `prim`, a conservative-in-practice proxy for the surface gap.
fn lattice_gap(prim: &SdfPrimitive, others: &[SdfPrimitive], step: f64) -> f64 {
    let rad = prim.bounding_radius();
    let n = (2.0 * rad / step).ceil() as i64;
    let mut gap = f64::INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let p = prim.translation + Vec3::new(i as f64, j as f64, k as f64) * step - Vec3::repeat(rad);
                if prim.sdf(&p) > 0.0 {
                    continue;
                }
                for o in others {
                    gap = gap.min(o.sdf(&p));
                }
            }
        }
    }
    gap
}

/// A cluttered desk: 3 to 8 primitives resting on the table at `z = 0`,
/// placed by rejection sampling so neighbouring surfaces keep the configured
/// clearance.
pub fn generate_scene(seed: u64, cfg: &SceneGenConfig) -> Result<SdfScene> {
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::InvalidArgument("object count range".into()));
    }
    let mut r = rng::stream(seed, streams::SCENE);
    let target = r.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SdfPrimitive> = Vec::with_capacity(target);
    let mut attempts = 0;
    while objects.len() < target && attempts < cfg.max_attempts {
        attempts += 1;
        let kind = random_kind(&mut r);
        let rot = random_orientation(&kind, &mut r);
        let (x, y) = (r.random_range(-cfg.xy_extent..cfg.xy_extent), r.random_range(-cfg.xy_extent..cfg.xy_extent));
        let t = Vec3::new(x, y, support_below(&kind, &rot));
        let prim = SdfPrimitive::new(kind, rot.to_quaternion(), t)?;
        let near: Vec<SdfPrimitive> = objects
            .iter()
            .filter(|o| {
                (o.translation - prim.translation).norm() < o.bounding_radius() + prim.bounding_radius() + cfg.clearance
            })
            .copied()
            .collect();
        if near.is_empty() || lattice_gap(&prim, &near, 0.003) >= cfg.clearance {
            objects.push(prim);
        }
    }
    if objects.len() < cfg.min_objects {
        return Err(Error::InvalidArgument(format!("could only place {} objects", objects.len())));
    }
    Ok(SdfScene::desk(objects, seed))
}

/// Cameras evenly spaced on a ring around the desk; the azimuth offset is
/// drawn from the scene seed.
pub fn camera_ring(seed: u64, cfg: &ViewConfig) -> Result<Vec<Camera>> {
    let mut r = rng::stream(seed, streams::SAMPLE);
    let offset: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let el = cfg.elevation_deg.to_radians();
    (0..cfg.ring_size)
        .map(|i| {
            let az = offset + std::f64::consts::TAU * i as f64 / cfg.ring_size as f64;
            let eye = cfg.target + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * cfg.distance;
            Camera::look_at(eye, cfg.target, cfg.fov_deg, (cfg.width, cfg.height))
        })
        .collect()
}

/// Indices of `n` cameras chosen by farthest point sampling over their
/// positions, starting from camera 0.
pub fn select_views(cams: &[Camera], n: usize) -> Result<Vec<usize>> {
    let positions: Vec<Vec3> = cams.iter().map(|c| c.position).collect();
    farthest_point_sample(&positions, n)
}

/// Renders each camera and merges the views into one world-frame cloud.
pub fn observe(scene: &SdfScene, cams: &[Camera]) -> Result<PointCloud> {
    let clouds: Vec<PointCloud> = cams.iter().map(|c| depth_to_pointcloud(&render_depth(scene, c), c)).collect();
    merge_views(&clouds, cams)
}
