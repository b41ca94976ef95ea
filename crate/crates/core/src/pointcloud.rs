//! Point-cloud containers, seeded sampling, normalization, noise and voxel
//! hashing.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Axis-aligned bounds `(min, max)`; `None` when empty.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounds_of(&self.points)
    }
}

pub fn bounds_of(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = points.first()?;
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Some((lo, hi))
}

/// Per-point features aligned 1:1 with a cloud, row-major `N x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEmbeddings {
    pub channels: usize,
    pub features: Vec<f64>,
}

impl PointEmbeddings {
    pub fn new(channels: usize, features: Vec<f64>) -> Result<Self> {
        if channels == 0 || !features.len().is_multiple_of(channels) {
            return Err(Error::shape(format!("multiple of {channels}"), features.len().to_string()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point embeddings".into()));
        }
        Ok(Self { channels, features })
    }

    pub fn rows(&self) -> usize {
        self.features.len() / self.channels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }
}

/// Exactly `n` points: uniform without replacement when the cloud has at
/// least `n` points, with replacement otherwise.
pub fn sample_fixed(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    Ok(PointCloud::new(sample_fixed_indices(cloud.len(), n, seed)?.into_iter().map(|i| cloud.points[i]).collect()))
}

pub fn sample_fixed_indices(count: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::EmptyCloud);
    }
    let mut r = rng::seeded(seed);
    if count >= n {
        Ok(index::sample(&mut r, count, n).into_vec())
    } else {
        Ok((0..n).map(|_| r.random_range(0..count)).collect())
    }
}

/// Greedy farthest-point sampling starting at index 0. Ties go to the lower
/// index.
pub fn farthest_point_sample(items: &[Vec3], k: usize) -> Result<Vec<usize>> {
    if k > items.len() {
        return Err(Error::InvalidArgument(format!("cannot pick {k} of {} points", items.len())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(k);
    let mut dist = vec![f64::INFINITY; items.len()];
    let mut current = 0;
    for _ in 0..k {
        chosen.push(current);
        dist[current] = -1.0;
        let c = items[current];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, p) in items.iter().enumerate() {
            if dist[i] < 0.0 {
                continue;
            }
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(chosen)
}

/// Per-axis affine map `x -> (x - min) * scale`. Axes with zero extent map
/// to 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub min: Vec3,
    pub extent: Vec3,
    degenerate: [bool; 3],
}

impl Affine {
    pub fn from_bounds(min: Vec3, max: Vec3) -> Self {
        let mut extent = max - min;
        let mut degenerate = [false; 3];
        for a in 0..3 {
            if !(extent[a] > 0.0) {
                degenerate[a] = true;
                extent[a] = 1.0;
            }
        }
        Self { min, extent, degenerate }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let mut out = Vec3::zeros();
        for a in 0..3 {
            out[a] = if self.degenerate[a] { 0.5 } else { (p[a] - self.min[a]) / self.extent[a] };
        }
        out
    }

    pub fn invert(&self, q: &Vec3) -> Vec3 {
        let mut out = Vec3::zeros();
        for a in 0..3 {
            out[a] = if self.degenerate[a] { self.min[a] } else { q[a] * self.extent[a] + self.min[a] };
        }
        out
    }

    /// Normalized-space extent of one metre along each axis.
    pub fn scale(&self) -> Vec3 {
        Vec3::new(1.0 / self.extent.x, 1.0 / self.extent.y, 1.0 / self.extent.z)
    }
}

/// Maps each axis of the cloud onto `[0, 1]`.
pub fn normalize_unit_cube(cloud: &PointCloud) -> (PointCloud, Affine) {
    normalize_padded(cloud, 0.0)
}

/// Like [`normalize_unit_cube`] but the bounds are first grown by `pad`
/// metres on every side, so points within `pad` of the cloud still land in
/// `[0, 1]³`.
pub fn normalize_padded(cloud: &PointCloud, pad: f64) -> (PointCloud, Affine) {
    let (lo, hi) = cloud.bounds().unwrap_or((Vec3::zeros(), Vec3::zeros()));
    let pad = Vec3::repeat(pad.max(0.0));
    let affine = Affine::from_bounds(lo - pad, hi + pad);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let q = affine.apply(p);
            Vec3::new(q.x.clamp(0.0, 1.0), q.y.clamp(0.0, 1.0), q.z.clamp(0.0, 1.0))
        })
        .collect();
    (PointCloud::new(points), affine)
}

/// Adds i.i.d. `N(0, sigma²)` per-axis offsets to a random subset of
/// `floor(fraction * N)` points. Returns the perturbed cloud and the sorted
/// indices that were touched.
pub fn add_gaussian_noise_indexed(
    cloud: &PointCloud,
    sigma: f64,
    fraction: f64,
    seed: u64,
) -> Result<(PointCloud, Vec<usize>)> {
    if !(sigma >= 0.0) || !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} / fraction {fraction}")));
    }
    let n = cloud.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut out = cloud.clone();
    if sigma == 0.0 || count == 0 {
        return Ok((out, Vec::new()));
    }
    let mut r = rng::seeded(seed);
    let mut picked = index::sample(&mut r, n, count).into_vec();
    picked.sort_unstable();
    for &i in &picked {
        for a in 0..3 {
            let z: f64 = StandardNormal.sample(&mut r);
            out.points[i][a] += sigma * z;
        }
    }
    Ok((out, picked))
}

pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, fraction: f64, seed: u64) -> Result<PointCloud> {
    add_gaussian_noise_indexed(cloud, sigma, fraction, seed).map(|(c, _)| c)
}

pub type VoxelKey = [i64; 3];

pub fn voxel_key(p: &Vec3, size: f64) -> VoxelKey {
    [(p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64]
}

/// For every point, the centroid of all points sharing its voxel. Output is
/// aligned with the input.
pub fn voxel_centroids(points: &[Vec3], size: f64) -> Vec<Vec3> {
    let mut acc: HashMap<VoxelKey, (Vec3, usize)> = HashMap::new();
    let keys: Vec<VoxelKey> = points.iter().map(|p| voxel_key(p, size)).collect();
    for (p, k) in points.iter().zip(&keys) {
        let e = acc.entry(*k).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    keys.iter()
        .map(|k| {
            let (s, c) = acc[k];
            s / c as f64
        })
        .collect()
}

/// One point per occupied voxel, the centroid of its points, in order of
/// first occurrence.
pub fn voxel_downsample(cloud: &PointCloud, size: f64) -> Result<PointCloud> {
    if !(size > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size {size}")));
    }
    let mut slot: HashMap<VoxelKey, usize> = HashMap::new();
    let mut sums: Vec<(Vec3, usize)> = Vec::new();
    for p in &cloud.points {
        let k = voxel_key(p, size);
        let i = *slot.entry(k).or_insert_with(|| {
            sums.push((Vec3::zeros(), 0));
            sums.len() - 1
        });
        sums[i].0 += p;
        sums[i].1 += 1;
    }
    Ok(PointCloud::new(sums.into_iter().map(|(s, c)| s / c as f64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = rng::seeded(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(0.0..0.2)))
                .collect(),
        )
    }

    fn sorted_keys(c: &PointCloud) -> Vec<[u64; 3]> {
        let mut v: Vec<[u64; 3]> = c.points.iter().map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]).collect();
        v.sort();
        v
    }

    #[test]
    fn sample_fixed_full_is_permutation() {
        let c = cloud(5, 1);
        let s = sample_fixed(&c, 5, 9).unwrap();
        assert_eq!(sorted_keys(&c), sorted_keys(&s));
        let big = cloud(20_000, 2);
        let s = sample_fixed(&big, 20_000, 3).unwrap();
        assert_eq!(sorted_keys(&big), sorted_keys(&s));
    }

    #[test]
    fn sample_fixed_is_deterministic_and_upsamples() {
        let c = cloud(100, 4);
        assert_eq!(sample_fixed(&c, 50, 7).unwrap(), sample_fixed(&c, 50, 7).unwrap());
        assert_ne!(sample_fixed(&c, 50, 7).unwrap(), sample_fixed(&c, 50, 8).unwrap());
        assert_eq!(sample_fixed(&c, 300, 7).unwrap().len(), 300);
        assert!(matches!(sample_fixed(&PointCloud::new(vec![]), 3, 0), Err(Error::EmptyCloud)));
    }

    #[test]
    fn fps_on_a_line() {
        let pts: Vec<Vec3> = [0.0, 1.0, 2.0, 10.0].iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect();
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample(&pts, 1).unwrap(), vec![0]);
        let mut all = farthest_point_sample(&pts, 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&pts, 5).is_err());
    }

    #[test]
    fn fps_matches_bruteforce_greedy() {
        // Independent greedy: recompute min distance to the chosen set from
        // scratch each round.
        let c = cloud(60, 12);
        let got = farthest_point_sample(&c.points, 12).unwrap();
        let mut chosen = vec![0usize];
        while chosen.len() < 12 {
            let mut best = (0usize, -1.0f64);
            for i in 0..c.len() {
                if chosen.contains(&i) {
                    continue;
                }
                let d =
                    chosen.iter().map(|&j| (c.points[i] - c.points[j]).norm_squared()).fold(f64::INFINITY, f64::min);
                if d > best.1 {
                    best = (i, d);
                }
            }
            chosen.push(best.0);
        }
        assert_eq!(got, chosen);
    }

    #[test]
    fn normalize_examples() {
        let c = PointCloud::new(vec![Vec3::zeros(), Vec3::new(2.0, 4.0, 8.0)]);
        let (n, a) = normalize_unit_cube(&c);
        assert_eq!(n.points, vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)]);
        for (p, q) in c.points.iter().zip(&n.points) {
            assert!((a.invert(q) - p).norm() < 1e-9);
        }
        let unit = PointCloud::new(vec![Vec3::zeros(), Vec3::new(0.5, 1.0, 0.2), Vec3::new(1.0, 0.0, 1.0)]);
        assert_eq!(normalize_unit_cube(&unit).0, unit);
    }

    #[test]
    fn degenerate_axis_maps_to_half() {
        let c = PointCloud::new(vec![Vec3::new(0.0, 1.0, 3.0), Vec3::new(1.0, 1.0, 5.0)]);
        let (n, a) = normalize_unit_cube(&c);
        assert!(n.points.iter().all(|p| p.y == 0.5));
        assert!((a.invert(&n.points[1]) - c.points[1]).norm() < 1e-12);
    }

    #[test]
    fn normalize_round_trip_random() {
        let c = cloud(500, 21);
        let (n, a) = normalize_unit_cube(&c);
        for (p, q) in c.points.iter().zip(&n.points) {
            assert!(q.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((a.invert(q) - p).norm() < 1e-9);
        }
        let (n, a) = normalize_padded(&c, 0.05);
        for (p, q) in c.points.iter().zip(&n.points) {
            assert!(q.iter().all(|v| *v > 0.0 && *v < 1.0));
            assert!((a.invert(q) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn noise_identity_cases() {
        let c = cloud(1000, 5);
        assert_eq!(add_gaussian_noise(&c, 0.0, 0.3, 1).unwrap(), c);
        assert_eq!(add_gaussian_noise(&c, 0.02, 0.0, 1).unwrap(), c);
        assert!(add_gaussian_noise(&c, -1.0, 0.3, 1).is_err());
    }

    #[test]
    fn noise_count_and_magnitude() {
        // Oracle: Monte-Carlo mean of |N(0, σ²I₃)| with an independent stream.
        let c = cloud(10_000, 6);
        let sigma = 0.02;
        let (noisy, idx) = add_gaussian_noise_indexed(&c, sigma, 0.3, 77).unwrap();
        let moved: Vec<usize> = (0..c.len()).filter(|&i| noisy.points[i] != c.points[i]).collect();
        assert_eq!(moved.len(), 3000);
        assert_eq!(moved, idx);
        let mean_norm: f64 = moved.iter().map(|&i| (noisy.points[i] - c.points[i]).norm()).sum::<f64>() / 3000.0;
        let mut r = rng::seeded(1234);
        let trials = 200_000;
        let mc: f64 = (0..trials)
            .map(|_| {
                let v: [f64; 3] =
                    [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
                sigma * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean_norm - mc).abs() / mc < 0.05, "{mean_norm} vs {mc}");
    }

    #[test]
    fn voxel_downsample_examples() {
        let c = PointCloud::new(vec![Vec3::new(0.001, 0.001, 0.001), Vec3::new(0.003, 0.004, 0.002)]);
        let d = voxel_downsample(&c, 0.005).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.points[0] - Vec3::new(0.002, 0.0025, 0.0015)).norm() < 1e-15);

        let spread = PointCloud::new((0..10).map(|i| Vec3::repeat(0.011 * i as f64)).collect());
        assert_eq!(voxel_downsample(&spread, 0.005).unwrap().len(), 10);

        let c = cloud(3000, 8);
        let distinct: HashSet<VoxelKey> = c.points.iter().map(|p| voxel_key(p, 0.02)).collect();
        let d = voxel_downsample(&c, 0.02).unwrap();
        assert_eq!(d.len(), distinct.len());
        assert!(voxel_downsample(&c, 0.0).is_err());
    }

    #[test]
    fn voxel_downsample_idempotent() {
        let c = cloud(3000, 10);
        let once = voxel_downsample(&c, 0.03).unwrap();
        let twice = voxel_downsample(&once, 0.03).unwrap();
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.points.iter().zip(&twice.points) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn point(half: f64) -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-half..half).prop_map(|a| Vec3::new(a[0], a[1], a[2]))
    }

    proptest! {
        #[test]
        fn affine_round_trips(points in prop::collection::vec(point(2.0), 2..40)) {
            let (lo, hi) = bounds_of(&points).unwrap();
            let a = Affine::from_bounds(lo, hi);
            for p in &points {
                let n = a.apply(p);
                prop_assert!(n.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
                prop_assert!((a.invert(&n) - p).norm() < 1e-9);
            }
        }

        #[test]
        fn voxel_keys_contain_their_points(p in point(5.0), size in 0.001f64..0.5) {
            let k = voxel_key(&p, size);
            for a in 0..3 {
                let lo = k[a] as f64 * size;
                prop_assert!(p[a] >= lo - 1e-12 && p[a] < lo + size + 1e-12);
            }
        }

        #[test]
        fn noise_touches_exactly_the_reported_points(
            points in prop::collection::vec(point(1.0), 1..60),
            fraction in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let cloud = PointCloud::new(points);
            let (noisy, idx) = add_gaussian_noise_indexed(&cloud, 0.01, fraction, seed).unwrap();
            prop_assert_eq!(idx.len(), (fraction * cloud.len() as f64).floor() as usize);
            for (i, (a, b)) in cloud.points.iter().zip(&noisy.points).enumerate() {
                prop_assert_eq!(a != b, idx.binary_search(&i).is_ok());
            }
        }

        #[test]
        fn fixed_samples_are_distinct_when_possible(count in 1usize..200, n in 1usize..300, seed in any::<u64>()) {
            let idx = sample_fixed_indices(count, n, seed).unwrap();
            prop_assert_eq!(idx.len(), n);
            prop_assert!(idx.iter().all(|&i| i < count));
            if n <= count {
                let set: std::collections::HashSet<_> = idx.iter().collect();
                prop_assert_eq!(set.len(), n);
            }
        }
    }
}
