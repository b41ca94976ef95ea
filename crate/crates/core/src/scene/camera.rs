use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{RotationMatrix, Vec3};
use crate::pointcloud::PointCloud;

use super::sdf::SdfScene;

/// Pinhole camera. Camera frame: x right, y down, z forward. `rotation` maps
/// camera-frame vectors to world frame; `position` is the optical centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub rotation: RotationMatrix,
    pub position: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

pub const SURFACE_EPS: f64 = 1e-5;
pub const MAX_STEPS: usize = 256;

impl Camera {
    pub fn new(
        rotation: RotationMatrix,
        position: Vec3,
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        (width, height): (usize, usize),
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width < 8 || height < 8 {
            return Err(Error::InvalidArgument("camera needs fx, fy > 0 and at least 8x8 pixels".into()));
        }
        Ok(Self { rotation, position, fx, fy, cx, cy, width, height })
    }

    /// Camera at `eye` looking at `target` with world +z as up.
    pub fn look_at(eye: Vec3, target: Vec3, fov_y_deg: f64, (width, height): (usize, usize)) -> Result<Self> {
        let z = (target - eye).normalize();
        let mut x = z.cross(&Vec3::z());
        if x.norm() < 1e-9 {
            x = Vec3::x();
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let f = (height as f64 / 2.0) / (fov_y_deg.to_radians() / 2.0).tan();
        Self::new(
            RotationMatrix(Matrix3::from_columns(&[x, y, z])),
            eye,
            (f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            (width, height),
        )
    }

    /// Camera-frame point seen at pixel `(u, v)` with depth `d` along z.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vec3 {
        Vec3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }

    /// `(u, v, depth)` of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z)
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.position
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply_inverse(&(p - self.position))
    }
}

/// Per-pixel depth in metres along the optical axis; 0 marks a miss.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

fn trace(scene: &SdfScene, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let (t0, t1) = scene.bounds.ray_range(origin, dir)?;
    let mut t = t0;
    for _ in 0..MAX_STEPS {
        if t > t1 {
            return None;
        }
        let d = scene.sdf(&(origin + dir * t));
        if d.abs() < SURFACE_EPS {
            return Some(t);
        }
        t += d;
    }
    None
}

/// Sphere-traces every pixel to the first surface inside the scene bounds.
pub fn render_depth(scene: &SdfScene, cam: &Camera) -> DepthImage {
    let data: Vec<f64> = (0..cam.height)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..cam.width).map(move |u| {
                let ray_cam = cam.unproject(u as f64, v as f64, 1.0);
                let dir_cam = ray_cam.normalize();
                let dir = cam.rotation.apply(&dir_cam);
                match trace(scene, &cam.position, &dir) {
                    Some(t) => t * dir_cam.z,
                    None => 0.0,
                }
            })
        })
        .collect();
    DepthImage { width: cam.width, height: cam.height, data }
}

/// One camera-frame point per nonzero pixel, row-major pixel order.
pub fn depth_to_pointcloud(depth: &DepthImage, cam: &Camera) -> PointCloud {
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v);
            if d > 0.0 {
                points.push(cam.unproject(u as f64, v as f64, d));
            }
        }
    }
    PointCloud::new(points)
}

/// Transforms each camera-frame cloud into the world frame and concatenates.
pub fn merge_views(clouds: &[PointCloud], poses: &[Camera]) -> Result<PointCloud> {
    if clouds.len() != poses.len() {
        return Err(Error::LengthMismatch(clouds.len(), poses.len()));
    }
    let mut points = Vec::with_capacity(clouds.iter().map(|c| c.len()).sum());
    for (c, cam) in clouds.iter().zip(poses) {
        points.extend(c.points.iter().map(|p| cam.to_world(p)));
    }
    Ok(PointCloud::new(points))
}
