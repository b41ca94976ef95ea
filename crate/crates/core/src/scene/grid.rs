use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{RotationMatrix, Vec3};

use super::sdf::SdfScene;

pub const MAX_GRID_VOXELS: u64 = 100_000_000;

/// Dense occupancy bits over a regular grid, x fastest. Voxel `i` has its
/// centre at `origin + (i + 0.5) * voxel_size` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    bits: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        let n = dims.iter().map(|&d| d as u64).product::<u64>();
        if n > MAX_GRID_VOXELS {
            return Err(Error::GridTooLarge(n));
        }
        if dims.contains(&0) || !(voxel_size > 0.0) {
            return Err(Error::InvalidArgument("grid dims and voxel size must be positive".into()));
        }
        Ok(Self { origin, voxel_size, dims, bits: vec![0; (n as usize).div_ceil(8)] })
    }

    pub fn from_bits(origin: Vec3, voxel_size: f64, dims: [usize; 3], bits: Vec<u8>) -> Result<Self> {
        let g = Self::empty(origin, voxel_size, dims)?;
        if bits.len() != g.bits.len() {
            return Err(Error::LengthMismatch(bits.len(), g.bits.len()));
        }
        Ok(Self { bits, ..g })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn flat(&self, i: [usize; 3]) -> usize {
        i[0] + self.dims[0] * (i[1] + self.dims[1] * i[2])
    }

    pub fn unflat(&self, f: usize) -> [usize; 3] {
        [f % self.dims[0], (f / self.dims[0]) % self.dims[1], f / (self.dims[0] * self.dims[1])]
    }

    pub fn get_flat(&self, f: usize) -> bool {
        self.bits[f / 8] >> (f % 8) & 1 == 1
    }

    pub fn get(&self, i: [usize; 3]) -> bool {
        self.get_flat(self.flat(i))
    }

    pub fn set(&mut self, i: [usize; 3], v: bool) {
        let f = self.flat(i);
        if v {
            self.bits[f / 8] |= 1 << (f % 8);
        } else {
            self.bits[f / 8] &= !(1 << (f % 8));
        }
    }

    pub fn center(&self, i: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin.x + (i[0] as f64 + 0.5) * self.voxel_size,
            self.origin.y + (i[1] as f64 + 0.5) * self.voxel_size,
            self.origin.z + (i[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Index of the voxel containing `p`, if inside the grid.
    pub fn locate(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.voxel_count()).filter(|&f| self.get_flat(f)).map(|f| self.unflat(f))
    }
}

/// Grid over the scene bounds, aligned so voxel boundaries fall on integer
/// multiples of `voxel_size`. A voxel is occupied iff the scene SDF at its
/// centre is `<= 0`.
pub fn ground_truth_occupancy(scene: &SdfScene, voxel_size: f64) -> Result<OccupancyGrid> {
    ground_truth_occupancy_in_frame(
        scene,
        &RotationMatrix::identity(),
        &Vec3::zeros(),
        (scene.bounds.min, scene.bounds.max),
        voxel_size,
    )
}

/// Ground truth on a grid living in another rigid frame (for example a
/// camera frame) where `x_world = rotation * x + origin`. The grid covers
/// `lo..hi` in that frame with voxel boundaries on multiples of `voxel_size`.
pub fn ground_truth_occupancy_in_frame(
    scene: &SdfScene,
    rotation: &RotationMatrix,
    origin: &Vec3,
    (lo, hi): (Vec3, Vec3),
    voxel_size: f64,
) -> Result<OccupancyGrid> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size {voxel_size}")));
    }
    let mut grid_origin = Vec3::zeros();
    let mut dims = [0usize; 3];
    let mut total: u64 = 1;
    for a in 0..3 {
        let first = (lo[a] / voxel_size + 1e-9).floor();
        let last = (hi[a] / voxel_size - 1e-9).ceil();
        grid_origin[a] = first * voxel_size;
        let n = (last - first).max(1.0);
        total = total.saturating_mul(n as u64);
        if total > MAX_GRID_VOXELS {
            return Err(Error::GridTooLarge(total));
        }
        dims[a] = n as usize;
    }
    let mut grid = OccupancyGrid::empty(grid_origin, voxel_size, dims)?;
    let (nx, ny) = (dims[0], dims[1]);
    let slices: Vec<Vec<bool>> = (0..dims[2])
        .into_par_iter()
        .map(|z| {
            let mut s = Vec::with_capacity(nx * ny);
            for y in 0..ny {
                for x in 0..nx {
                    let c = grid.center([x, y, z]);
                    s.push(scene.sdf(&(rotation.apply(&c) + origin)) <= 0.0);
                }
            }
            s
        })
        .collect();
    for (z, s) in slices.iter().enumerate() {
        for y in 0..ny {
            for x in 0..nx {
                if s[y * nx + x] {
                    grid.set([x, y, z], true);
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::sdf::{Aabb, PrimitiveKind, SdfPrimitive};

    #[test]
    fn sphere_count_matches_enumeration() {
        let c = Vec3::new(0.013, -0.021, 0.1);
        let s = SdfScene::new(
            vec![SdfPrimitive::at(PrimitiveKind::Sphere { radius: 0.05 }, c).unwrap()],
            -1.0,
            Aabb::new(Vec3::new(-0.1, -0.1, 0.0), Vec3::new(0.1, 0.1, 0.2)),
            0,
        );
        let g = ground_truth_occupancy(&s, 0.01).unwrap();
        assert_eq!(g.dims, [20, 20, 20]);
        let mut brute = 0;
        for i in 0..20 {
            for j in 0..20 {
                for k in 0..20 {
                    let p = Vec3::new(
                        -0.1 + (i as f64 + 0.5) * 0.01,
                        -0.1 + (j as f64 + 0.5) * 0.01,
                        (k as f64 + 0.5) * 0.01,
                    );
                    if (p - c).norm() <= 0.05 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(g.occupied_count(), brute);
    }

    #[test]
    fn empty_above_table() {
        let s = SdfScene::new(vec![], 0.0, Aabb::new(Vec3::new(-0.1, -0.1, 0.05), Vec3::new(0.1, 0.1, 0.2)), 0);
        assert_eq!(ground_truth_occupancy(&s, 0.01).unwrap().occupied_count(), 0);
    }

    #[test]
    fn object_order_does_not_matter() {
        let a = SdfPrimitive::at(PrimitiveKind::Box { half: [0.03, 0.02, 0.02] }, Vec3::new(0.02, 0.0, 0.02)).unwrap();
        let b = SdfPrimitive::at(PrimitiveKind::Sphere { radius: 0.03 }, Vec3::new(-0.03, 0.01, 0.03)).unwrap();
        let s1 = SdfScene::desk(vec![a, b], 0);
        let s2 = SdfScene::desk(vec![b, a], 0);
        assert_eq!(
            ground_truth_occupancy(&s1, 0.01).unwrap().occupied_count(),
            ground_truth_occupancy(&s2, 0.01).unwrap().occupied_count()
        );
    }

    #[test]
    fn too_large_is_rejected() {
        let s = SdfScene::desk(vec![], 0);
        assert!(matches!(ground_truth_occupancy(&s, 0.0001), Err(Error::GridTooLarge(_))));
    }

    #[test]
    fn centers_and_locate_agree() {
        let g = OccupancyGrid::empty(Vec3::new(-0.3, -0.3, -0.05), 0.01, [60, 60, 60]).unwrap();
        for i in [[0, 0, 0], [5, 17, 42], [59, 59, 59]] {
            assert_eq!(g.locate(&g.center(i)), Some(i));
            assert_eq!(g.unflat(g.flat(i)), i);
        }
        assert_eq!(g.locate(&Vec3::new(0.31, 0.0, 0.0)), None);
    }
}
