use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix, Quaternion, RotationMatrix, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveKind {
    Sphere {
        radius: f64,
    },
    Box {
        half: [f64; 3],
    },
    /// Axis along local z.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Segment along local z from `-half_length` to `half_length`.
    Capsule {
        radius: f64,
        half_length: f64,
    },
}

impl PrimitiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::Sphere { .. } => "sphere",
            PrimitiveKind::Box { .. } => "box",
            PrimitiveKind::Cylinder { .. } => "cylinder",
            PrimitiveKind::Capsule { .. } => "capsule",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            PrimitiveKind::Sphere { radius } => vec![radius],
            PrimitiveKind::Box { half } => half.to_vec(),
            PrimitiveKind::Cylinder { radius, half_height } => vec![radius, half_height],
            PrimitiveKind::Capsule { radius, half_length } => vec![radius, half_length],
        }
    }

    pub fn from_parts(name: &str, p: &[f64]) -> Result<Self> {
        let want = match name {
            "sphere" => 1,
            "box" => 3,
            "cylinder" | "capsule" => 2,
            other => return Err(Error::format("scene", format!("unknown primitive `{other}`"))),
        };
        if p.len() != want {
            return Err(Error::format("scene", format!("{name} takes {want} parameters, got {}", p.len())));
        }
        let kind = match name {
            "sphere" => PrimitiveKind::Sphere { radius: p[0] },
            "box" => PrimitiveKind::Box { half: [p[0], p[1], p[2]] },
            "cylinder" => PrimitiveKind::Cylinder { radius: p[0], half_height: p[1] },
            _ => PrimitiveKind::Capsule { radius: p[0], half_length: p[1] },
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params().iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{} parameters must be positive", self.name())))
        }
    }

    fn local_sdf(&self, p: &Vec3) -> f64 {
        match *self {
            PrimitiveKind::Sphere { radius } => p.norm() - radius,
            PrimitiveKind::Box { half } => {
                let q = Vec3::new(p.x.abs() - half[0], p.y.abs() - half[1], p.z.abs() - half[2]);
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            PrimitiveKind::Cylinder { radius, half_height } => {
                let dx = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                dx.max(dz).min(0.0) + (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt()
            }
            PrimitiveKind::Capsule { radius, half_length } => {
                let z = p.z - p.z.clamp(-half_length, half_length);
                (p.x * p.x + p.y * p.y + z * z).sqrt() - radius
            }
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match *self {
            PrimitiveKind::Sphere { radius } => radius,
            PrimitiveKind::Box { half } => (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt(),
            PrimitiveKind::Cylinder { radius, half_height } => (radius * radius + half_height * half_height).sqrt(),
            PrimitiveKind::Capsule { radius, half_length } => half_length + radius,
        }
    }
}

/// A primitive placed in the world by `x_world = R x_local + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfPrimitive {
    pub kind: PrimitiveKind,
    pub rotation: RotationMatrix,
    pub quaternion: Quaternion,
    pub translation: Vec3,
}

impl SdfPrimitive {
    pub fn new(kind: PrimitiveKind, quaternion: Quaternion, translation: Vec3) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, rotation: quat_to_matrix(&quaternion)?, quaternion, translation })
    }

    pub fn at(kind: PrimitiveKind, translation: Vec3) -> Result<Self> {
        Self::new(kind, Quaternion::IDENTITY, translation)
    }

    pub fn sdf(&self, x: &Vec3) -> f64 {
        self.kind.local_sdf(&self.rotation.apply_inverse(&(x - self.translation)))
    }

    pub fn bounding_radius(&self) -> f64 {
        self.kind.bounding_radius()
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Parametric range `[t0, t1]` of the ray inside the box, if any.
    pub fn ray_range(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// Objects resting on a table half-space `z <= table_height`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfScene {
    pub objects: Vec<SdfPrimitive>,
    pub table_height: f64,
    pub bounds: Aabb,
    pub rng_seed: u64,
}

impl SdfScene {
    pub fn new(objects: Vec<SdfPrimitive>, table_height: f64, bounds: Aabb, rng_seed: u64) -> Self {
        Self { objects, table_height, bounds, rng_seed }
    }

    /// The desk-scale workspace: a 0.6 m cube over a table at `z = 0`.
    pub fn desk(objects: Vec<SdfPrimitive>, rng_seed: u64) -> Self {
        Self::new(objects, 0.0, desk_bounds(), rng_seed)
    }

    pub fn sdf(&self, x: &Vec3) -> f64 {
        let mut d = x.z - self.table_height;
        for o in &self.objects {
            d = d.min(o.sdf(x));
        }
        d
    }

    /// Outward normal by central differences with step `h`.
    pub fn gradient(&self, x: &Vec3, h: f64) -> Vec3 {
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            g[a] = (self.sdf(&(x + e)) - self.sdf(&(x - e))) / (2.0 * h);
        }
        g
    }
}

pub fn desk_bounds() -> Aabb {
    Aabb::new(Vec3::new(-0.3, -0.3, -0.05), Vec3::new(0.3, 0.3, 0.55))
}

/// Signed distance of the scene at `x`: the minimum over all objects and
/// the table half-space.
pub fn scene_sdf(scene: &SdfScene, x: &Vec3) -> f64 {
    scene.sdf(x)
}
