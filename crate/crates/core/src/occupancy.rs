//! Local occupancy regions around grasp candidates and their queries.

use std::collections::HashMap;

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{RotationMatrix, Vec3};
use crate::nn::{sigmoid, LearnableMap, NodeId, Tape, Tensor};
use crate::pointcloud::{Affine, VoxelKey};
use crate::rng;
use crate::scene::OccupancyGrid;

/// Cylinder reachable by the gripper around a grasp point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspRegionSpec {
    pub r: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub v: f64,
}

impl Default for GraspRegionSpec {
    fn default() -> Self {
        Self { r: 0.05, d_min: -0.01, d_max: 0.04, v: 0.01 }
    }
}

impl GraspRegionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r > 0.0 && self.d_min < self.d_max && self.v > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("region spec {self:?}")))
        }
    }

    /// Whether `x` lies in the cylinder of the candidate `(p, rot)`.
    pub fn contains(&self, p: &Vec3, rot: &RotationMatrix, x: &Vec3) -> bool {
        let l = rot.apply_inverse(&(x - p));
        (l.x * l.x + l.y * l.y).sqrt() <= self.r && l.z >= self.d_min && l.z <= self.d_max
    }

    /// Farthest a cylinder point can be from its grasp point.
    pub fn reach(&self) -> f64 {
        (self.r * self.r + self.d_min.abs().max(self.d_max.abs()).powi(2)).sqrt()
    }

    pub fn center_of(&self, key: &VoxelKey) -> Vec3 {
        Vec3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * self.v
    }
}

/// A grasp point with its approach rotation (+z along the approach).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub point: Vec3,
    pub rotation: RotationMatrix,
}

/// Deduplicated voxels of the union of candidate cylinders.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOccupancyRegion {
    pub spec: GraspRegionSpec,
    pub voxels: Vec<VoxelKey>,
    pub centers: Vec<Vec3>,
    /// Index of the candidate whose grasp point is nearest to each centre.
    pub owner: Vec<usize>,
}

impl LocalOccupancyRegion {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

fn cylinder_voxels(c: &Candidate, spec: &GraspRegionSpec) -> Vec<VoxelKey> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for sx in [-spec.r, spec.r] {
        for sy in [-spec.r, spec.r] {
            for sz in [spec.d_min, spec.d_max] {
                let w = c.point + c.rotation.apply(&Vec3::new(sx, sy, sz));
                lo = lo.inf(&w);
                hi = hi.sup(&w);
            }
        }
    }
    let first = lo.map(|x| (x / spec.v - 0.5).floor() as i64);
    let last = hi.map(|x| (x / spec.v - 0.5).ceil() as i64);
    let mut out = Vec::new();
    for k in first.z..=last.z {
        for j in first.y..=last.y {
            for i in first.x..=last.x {
                let key = [i, j, k];
                if spec.contains(&c.point, &c.rotation, &spec.center_of(&key)) {
                    out.push(key);
                }
            }
        }
    }
    out
}

/// Index of the nearest point of `points` to `q`; ties keep the lower index.
pub fn nearest_index(points: &[Vec3], q: &Vec3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Voxels (on the grid with centres at `(index + 0.5) * v`) whose centres
/// fall inside any candidate's cylinder, in first-seen order.
pub fn build_region(candidates: &[Candidate], spec: &GraspRegionSpec, budget: usize) -> Result<LocalOccupancyRegion> {
    spec.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no grasp candidates".into()));
    }
    let per: Vec<Vec<VoxelKey>> = candidates.par_iter().map(|c| cylinder_voxels(c, spec)).collect();
    let mut seen: HashMap<VoxelKey, ()> = HashMap::new();
    let mut voxels = Vec::new();
    for list in per {
        for key in list {
            if seen.insert(key, ()).is_none() {
                voxels.push(key);
                if voxels.len() > budget {
                    return Err(Error::RegionBudgetExceeded(budget));
                }
            }
        }
    }
    let centers: Vec<Vec3> = voxels.iter().map(|k| spec.center_of(k)).collect();
    let points: Vec<Vec3> = candidates.iter().map(|c| c.point).collect();
    let owner = centers.par_iter().map(|c| nearest_index(&points, c)).collect();
    Ok(LocalOccupancyRegion { spec: *spec, voxels, centers, owner })
}

/// For each candidate, the region rows inside its own cylinder.
pub fn region_members(region: &LocalOccupancyRegion, candidates: &[Candidate]) -> Vec<Vec<usize>> {
    let index: HashMap<VoxelKey, usize> = region.voxels.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    candidates
        .par_iter()
        .map(|c| cylinder_voxels(c, &region.spec).iter().filter_map(|k| index.get(k).copied()).collect())
        .collect()
}

/// Voxel keys inside one candidate's cylinder.
pub fn candidate_voxels(candidate: &Candidate, spec: &GraspRegionSpec) -> Vec<VoxelKey> {
    cylinder_voxels(candidate, spec)
}

/// Ground-truth bit of every region voxel.
pub fn crop_ground_truth(region: &LocalOccupancyRegion, gt: &OccupancyGrid) -> Result<Vec<bool>> {
    let v = region.spec.v;
    // Grids read back from OCC1 carry f32 origins and voxel sizes.
    if (gt.voxel_size - v).abs() > 1e-6 * v {
        return Err(Error::MisalignedGrids(format!("voxel {} vs {}", gt.voxel_size, v)));
    }
    let mut shift = [0i64; 3];
    for (a, s) in shift.iter_mut().enumerate() {
        let o = gt.origin[a] / v;
        if (o - o.round()).abs() > 1e-3 {
            return Err(Error::MisalignedGrids(format!("origin {:?} is off the grid", gt.origin)));
        }
        *s = o.round() as i64;
    }
    region
        .voxels
        .iter()
        .map(|k| {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let i = k[a] - shift[a];
                if i < 0 || i >= gt.dims[a] as i64 {
                    return Err(Error::MisalignedGrids(format!("voxel {k:?} outside ground-truth grid")));
                }
                idx[a] = i as usize;
            }
            Ok(gt.get(idx))
        })
        .collect()
}

/// Uniform subset of `min(n, m)` distinct indices out of `m`.
pub fn sample_training_voxels(m: usize, n: usize, seed: u64) -> Vec<usize> {
    if m <= n {
        return (0..m).collect();
    }
    let mut r = rng::seeded(seed);
    index::sample(&mut r, m, n).into_vec()
}

pub const DEFAULT_TRAINING_VOXELS: usize = 15_000;

/// Records `f_L = f_p′ ⊕ ε_PE(p_q, p′, p_q − p′)` for queries whose nearest
/// candidate is `nearest[q]`. Positions are in the normalized frame given by
/// `affine`; `cand_emb` holds one embedding row per candidate.
#[allow(clippy::too_many_arguments)]
pub fn local_context_on(
    tape: &mut Tape,
    queries: &[Vec3],
    cand_points: &[Vec3],
    nearest: &[usize],
    cand_emb: NodeId,
    affine: &Affine,
    pe: &LearnableMap,
    pe_offset: usize,
) -> Result<NodeId> {
    if queries.len() != nearest.len() {
        return Err(Error::LengthMismatch(queries.len(), nearest.len()));
    }
    let mut data = Vec::with_capacity(queries.len() * 9);
    for (q, &n) in queries.iter().zip(nearest) {
        let qn = affine.apply(q);
        let pn = affine.apply(&cand_points[n]);
        let d = qn - pn;
        data.extend_from_slice(&[qn.x, qn.y, qn.z, pn.x, pn.y, pn.z, d.x, d.y, d.z]);
    }
    let x = tape.input(Tensor::from_rows(queries.len(), 9, data)?);
    let pos = pe.forward_on(tape, x, pe_offset)?;
    let f = tape.gather_rows(cand_emb, nearest)?;
    tape.concat_cols(&[f, pos])
}

/// Value-level local context with nearest-candidate lookup.
pub fn local_context(
    queries: &[Vec3],
    cand_points: &[Vec3],
    cand_emb: &Tensor,
    affine: &Affine,
    pe: &LearnableMap,
) -> Result<(Tensor, Vec<usize>)> {
    if cand_points.is_empty() || cand_emb.rows() != cand_points.len() {
        return Err(Error::LengthMismatch(cand_emb.rows(), cand_points.len()));
    }
    let nearest: Vec<usize> = queries.iter().map(|q| nearest_index(cand_points, q)).collect();
    let mut tape = Tape::new();
    let e = tape.input(cand_emb.clone());
    let out = local_context_on(&mut tape, queries, cand_points, &nearest, e, affine, pe, 0)?;
    Ok((tape.value(out).clone(), nearest))
}

/// Per-voxel occupancy probabilities with the strict `> 0.5` occupied set.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyPrediction {
    pub probabilities: Vec<f64>,
}

impl OccupancyPrediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self { probabilities: logits.iter().map(|&l| sigmoid(l)).collect() }
    }

    pub fn occupied(&self) -> Vec<bool> {
        self.probabilities.iter().map(|&p| p > 0.5).collect()
    }
}

/// Materializes a sparse set of region voxels into their bounding grid.
pub fn region_to_grid(region: &LocalOccupancyRegion, occupied: &[bool]) -> Result<OccupancyGrid> {
    if occupied.len() != region.len() {
        return Err(Error::LengthMismatch(occupied.len(), region.len()));
    }
    if region.is_empty() {
        return OccupancyGrid::empty(Vec3::zeros(), region.spec.v, [1, 1, 1]);
    }
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for k in &region.voxels {
        for a in 0..3 {
            lo[a] = lo[a].min(k[a]);
            hi[a] = hi[a].max(k[a]);
        }
    }
    let dims = [(hi[0] - lo[0] + 1) as usize, (hi[1] - lo[1] + 1) as usize, (hi[2] - lo[2] + 1) as usize];
    let origin = Vec3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) * region.spec.v;
    let mut grid = OccupancyGrid::empty(origin, region.spec.v, dims)?;
    for (k, &o) in region.voxels.iter().zip(occupied) {
        if o {
            grid.set([(k[0] - lo[0]) as usize, (k[1] - lo[1]) as usize, (k[2] - lo[2]) as usize], true);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::frame_from_direction;
    use crate::nn::MapKind;
    use crate::scene::{ground_truth_occupancy, PrimitiveKind, SdfPrimitive, SdfScene};
    use rand::Rng;

    fn brute_count(c: &Candidate, spec: &GraspRegionSpec) -> usize {
        let mut n = 0;
        for i in -20i64..20 {
            for j in -20i64..20 {
                for k in -20i64..20 {
                    if spec.contains(&c.point, &c.rotation, &spec.center_of(&[i, j, k])) {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn default_spec_constants() {
        let s = GraspRegionSpec::default();
        assert_eq!((s.r, s.d_min, s.d_max, s.v), (0.05, -0.01, 0.04, 0.01));
    }

    #[test]
    fn single_candidate_matches_grid_scan() {
        let spec = GraspRegionSpec::default();
        let c = Candidate { point: Vec3::zeros(), rotation: RotationMatrix::identity() };
        let reg = build_region(&[c], &spec, 1 << 20).unwrap();
        assert_eq!(reg.len(), brute_count(&c, &spec));
        let twice = build_region(&[c, c], &spec, 1 << 20).unwrap();
        assert_eq!(twice.voxels, reg.voxels);
    }

    #[test]
    fn random_regions_match_union_oracle() {
        let spec = GraspRegionSpec::default();
        let mut r = crate::rng::seeded(3);
        for _ in 0..20 {
            let cands: Vec<Candidate> = (0..3)
                .map(|_| Candidate {
                    point: Vec3::new(
                        r.random_range(-0.05..0.05),
                        r.random_range(-0.05..0.05),
                        r.random_range(-0.05..0.05),
                    ),
                    rotation: frame_from_direction(&Vec3::new(
                        r.random_range(-1.0..1.0),
                        r.random_range(-1.0..1.0),
                        r.random_range(-1.0..1.0),
                    )),
                })
                .collect();
            let reg = build_region(&cands, &spec, 1 << 20).unwrap();
            let mut got: Vec<VoxelKey> = reg.voxels.clone();
            got.sort();
            let mut expect = Vec::new();
            for i in -20i64..20 {
                for j in -20i64..20 {
                    for k in -20i64..20 {
                        let c = spec.center_of(&[i, j, k]);
                        if cands.iter().any(|cd| spec.contains(&cd.point, &cd.rotation, &c)) {
                            expect.push([i, j, k]);
                        }
                    }
                }
            }
            expect.sort();
            assert_eq!(got, expect);
            let pts: Vec<Vec3> = cands.iter().map(|c| c.point).collect();
            for (c, &o) in reg.centers.iter().zip(&reg.owner) {
                let d = (pts[o] - c).norm();
                assert!(pts.iter().all(|p| (p - c).norm() >= d));
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let c = Candidate { point: Vec3::zeros(), rotation: RotationMatrix::identity() };
        assert!(matches!(build_region(&[c], &GraspRegionSpec::default(), 10), Err(Error::RegionBudgetExceeded(10))));
    }

    #[test]
    fn nearest_candidate_examples() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(nearest_index(&pts, &Vec3::new(0.0, 0.0, 0.0)), 0);
        assert_eq!(nearest_index(&pts, &Vec3::new(0.8, 0.0, 0.0)), 1);
        assert_eq!(nearest_index(&pts, &Vec3::new(0.5, 0.0, 0.0)), 0);
        let mut r = crate::rng::seeded(1);
        let cands: Vec<Vec3> = (0..10).map(|_| Vec3::new(r.random(), r.random(), r.random())).collect();
        for _ in 0..50 {
            let q = Vec3::new(r.random(), r.random(), r.random());
            let mut best = (f64::INFINITY, 0);
            for (i, c) in cands.iter().enumerate() {
                let d = (c - q).norm();
                if d < best.0 {
                    best = (d, i);
                }
            }
            assert_eq!(nearest_index(&cands, &q), best.1);
        }
    }

    #[test]
    fn local_context_at_candidate_has_zero_offset() {
        let pts = vec![Vec3::new(0.1, 0.0, 0.5), Vec3::new(0.2, 0.1, 0.6)];
        let aff = Affine::from_bounds(Vec3::zeros(), Vec3::repeat(1.0));
        let emb = Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Identity-like PE: one linear layer copying its input.
        let mut pe = LearnableMap::zeros(MapKind::Mlp { widths: vec![9, 9] });
        for i in 0..9 {
            pe.params[i * 9 + i] = 1.0;
        }
        let (f, near) = local_context(&[pts[1]], &pts, &emb, &aff, &pe).unwrap();
        assert_eq!(near, vec![1]);
        assert_eq!(&f.row(0)[..2], &[3.0, 4.0]);
        assert_eq!(&f.row(0)[8..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn crop_examples() {
        let scene = SdfScene::desk(
            vec![SdfPrimitive::at(PrimitiveKind::Sphere { radius: 0.04 }, Vec3::new(0.0, 0.0, 0.1)).unwrap()],
            0,
        );
        let gt = ground_truth_occupancy(&scene, 0.01).unwrap();
        let spec = GraspRegionSpec::default();
        let inside = Candidate { point: Vec3::new(0.0, 0.0, 0.09), rotation: RotationMatrix::identity() };
        let reg = build_region(&[inside], &spec, 1 << 20).unwrap();
        let bits = crop_ground_truth(&reg, &gt).unwrap();
        assert_eq!(bits.len(), reg.len());
        for (c, b) in reg.centers.iter().zip(&bits) {
            assert_eq!(*b, scene.sdf(c) <= 0.0);
        }
        let free = Candidate { point: Vec3::new(0.2, 0.2, 0.3), rotation: RotationMatrix::identity() };
        let reg = build_region(&[free], &spec, 1 << 20).unwrap();
        assert!(crop_ground_truth(&reg, &gt).unwrap().iter().all(|b| !b));
        let shifted = OccupancyGrid::empty(gt.origin + Vec3::repeat(0.003), 0.01, gt.dims).unwrap();
        assert!(matches!(crop_ground_truth(&reg, &shifted), Err(Error::MisalignedGrids(_))));
    }

    #[test]
    fn training_voxel_sampling() {
        assert_eq!(sample_training_voxels(100, 15_000, 1), (0..100).collect::<Vec<_>>());
        let s = sample_training_voxels(30_000, 15_000, 2);
        assert_eq!(s.len(), 15_000);
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 15_000);
        assert_eq!(s, sample_training_voxels(30_000, 15_000, 2));
    }

    #[test]
    fn sampled_class_ratio_tracks_population() {
        let m = 100_000;
        let labels: Vec<bool> = (0..m).map(|i| (crate::rng::mix64(i as u64) % 10) < 3).collect();
        let pop = labels.iter().filter(|b| **b).count() as f64 / m as f64;
        let mut mean = 0.0;
        for seed in 0..20 {
            let s = sample_training_voxels(m, 15_000, seed);
            mean += s.iter().filter(|&&i| labels[i]).count() as f64 / s.len() as f64 / 20.0;
        }
        assert!((mean - pop).abs() < 0.03);
    }

    #[test]
    fn region_grid_round_trip() {
        let spec = GraspRegionSpec::default();
        let c =
            Candidate { point: Vec3::new(0.03, -0.02, 0.4), rotation: frame_from_direction(&Vec3::new(1.0, 2.0, 3.0)) };
        let reg = build_region(&[c], &spec, 1 << 20).unwrap();
        let occ: Vec<bool> = (0..reg.len()).map(|i| i % 3 == 0).collect();
        let g = region_to_grid(&reg, &occ).unwrap();
        assert_eq!(g.occupied_count(), occ.iter().filter(|b| **b).count());
        assert_eq!(crop_ground_truth(&reg, &g).unwrap(), occ);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::geometry::frame_from_direction;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn candidate() -> impl Strategy<Value = Candidate> {
        (prop::array::uniform3(-0.2f64..0.2), prop::array::uniform3(-1.0f64..1.0))
            .prop_filter("direction", |(_, d)| d.iter().map(|x| x * x).sum::<f64>() > 1e-2)
            .prop_map(|(p, d)| Candidate {
                point: Vec3::new(p[0], p[1], p[2]),
                rotation: frame_from_direction(&Vec3::new(d[0], d[1], d[2])),
            })
    }

    proptest! {
        #[test]
        fn region_voxels_are_unique_and_covered(cands in prop::collection::vec(candidate(), 1..6)) {
            let spec = GraspRegionSpec::default();
            let r = build_region(&cands, &spec, 1 << 20).unwrap();
            let unique: HashSet<_> = r.voxels.iter().collect();
            prop_assert_eq!(unique.len(), r.len());
            for (k, c) in r.voxels.iter().zip(&r.centers) {
                prop_assert!((spec.center_of(k) - c).norm() < 1e-12);
                prop_assert!(cands.iter().any(|cd| spec.contains(&cd.point, &cd.rotation, c)));
            }
            let members = region_members(&r, &cands);
            for (cd, rows) in cands.iter().zip(&members) {
                prop_assert!(rows.iter().all(|&i| spec.contains(&cd.point, &cd.rotation, &r.centers[i])));
            }
            prop_assert!(r.owner.iter().all(|&o| o < cands.len()));
        }

        #[test]
        fn budget_is_enforced(cands in prop::collection::vec(candidate(), 1..4), budget in 1usize..200) {
            let spec = GraspRegionSpec::default();
            let full = build_region(&cands, &spec, 1 << 20).unwrap().len();
            let res = build_region(&cands, &spec, budget);
            prop_assert_eq!(res.is_ok(), full <= budget);
        }
    }
}
