//! Multi-group tri-plane aggregation and global-context queries.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::geometry::{RotationMatrix, Vec3};
use crate::nn::{BilinearTaps, LearnableMap, NodeId, Tape, Tensor};
use crate::pointcloud::{voxel_centroids, Affine, PointCloud, PointEmbeddings};

/// Voxel size of the neighbourhood centroid fed to the point encoder.
pub const NEIGHBOURHOOD_VOXEL: f64 = 0.005;
/// Normalized queries may overshoot `[0, 1]` by this much before erroring.
pub const QUERY_MARGIN: f64 = 0.05;
const NORMALIZED_EPS: f64 = 1e-9;

/// Work counters for the projection and query kernels.
#[derive(Debug, Default)]
pub struct OpCounters {
    pub point_bins: AtomicU64,
    pub bilinear_reads: AtomicU64,
    pub fuser_calls: AtomicU64,
}

impl OpCounters {
    /// `(point_bins, bilinear_reads, fuser_calls)`.
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.point_bins.load(Ordering::Relaxed),
            self.bilinear_reads.load(Ordering::Relaxed),
            self.fuser_calls.load(Ordering::Relaxed),
        )
    }

    fn add(c: &AtomicU64, n: usize) {
        c.fetch_add(n as u64, Ordering::Relaxed);
    }
}

/// Per-point MLP over normalized coordinates and the normalized centroid of
/// the point's 5 mm voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoder {
    pub map: LearnableMap,
}

impl PointEncoder {
    pub const INPUT_WIDTH: usize = 6;

    pub fn new(c_p: usize, seed: u64) -> Self {
        Self { map: LearnableMap::mlp(&[Self::INPUT_WIDTH, c_p, c_p], seed) }
    }

    pub fn channels(&self) -> usize {
        self.map.kind.output_width()
    }

    /// `[N, 6]` encoder input for a cloud normalized by `affine`.
    pub fn input_features(normalized: &PointCloud, affine: &Affine) -> Result<Tensor> {
        for p in &normalized.points {
            if p.iter().any(|v| !(*v >= -NORMALIZED_EPS && *v <= 1.0 + NORMALIZED_EPS)) {
                return Err(Error::OutsideDomain([p.x, p.y, p.z]));
            }
        }
        let metric: Vec<Vec3> = normalized.points.iter().map(|p| affine.invert(p)).collect();
        let centroids = voxel_centroids(&metric, NEIGHBOURHOOD_VOXEL);
        let mut data = Vec::with_capacity(metric.len() * 6);
        for (p, c) in normalized.points.iter().zip(&centroids) {
            let cn = affine.apply(c);
            data.extend_from_slice(&[p.x, p.y, p.z, cn.x, cn.y, cn.z]);
        }
        Tensor::from_rows(normalized.len(), 6, data)
    }
}

/// Per-point embeddings of a cloud already normalized to `[0, 1]³`.
pub fn encode_points(enc: &PointEncoder, normalized: &PointCloud, affine: &Affine) -> Result<PointEmbeddings> {
    let x = PointEncoder::input_features(normalized, affine)?;
    let out = enc.map.forward(&x)?;
    PointEmbeddings::new(enc.channels(), out.data)
}

/// A `C x H x W` feature plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PlaneGrid {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape.len() != 3 {
            return Err(Error::shape("[C, H, W]", format!("{:?}", t.shape)));
        }
        Ok(Self { channels: t.shape[0], height: t.shape[1], width: t.shape[2], data: t.data.clone() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![self.channels, self.height, self.width], data: self.data.clone() }
    }

    /// Channel vector of cell `(col, row)`.
    pub fn cell(&self, col: usize, row: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..self.channels).map(|c| self.data[c * hw + row * self.width + col]).collect()
    }
}

/// In-plane coordinates after dropping rotated axis `plane`.
fn drop_axis(p: &Vec3, plane: usize) -> (f64, f64) {
    match plane {
        0 => (p.y, p.z),
        1 => (p.x, p.z),
        _ => (p.x, p.y),
    }
}

fn bin(u: f64, n: usize) -> usize {
    ((u * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Where every point of a cloud lands on the three planes of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProjection {
    pub index: usize,
    pub rotation: RotationMatrix,
    /// Normalization of the rotated cloud (grown by the padding).
    pub affine: Affine,
    pub height: usize,
    pub width: usize,
    /// Flat cell `row * W + col` of each point, per plane.
    pub cells: [Vec<usize>; 3],
}

impl GroupProjection {
    /// Rotates the points by `rotation`, normalizes them over the rotated
    /// bounds grown by `pad` metres, and bins them on each plane.
    pub fn new(
        points: &[Vec3],
        rotation: &RotationMatrix,
        index: usize,
        (height, width): (usize, usize),
        pad: f64,
        counters: &OpCounters,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if height < 2 || width < 2 {
            return Err(Error::InvalidArgument(format!("plane {height}x{width}")));
        }
        let rotated: Vec<Vec3> = points.iter().map(|p| rotation.apply(p)).collect();
        let (lo, hi) = crate::pointcloud::bounds_of(&rotated).ok_or(Error::EmptyCloud)?;
        let pad = Vec3::repeat(pad.max(0.0));
        let affine = Affine::from_bounds(lo - pad, hi + pad);
        let mut cells: [Vec<usize>; 3] = Default::default();
        for (plane, out) in cells.iter_mut().enumerate() {
            out.reserve(rotated.len());
            for p in &rotated {
                let (u, v) = drop_axis(&affine.apply(p), plane);
                out.push(bin(v, height) * width + bin(u, width));
            }
            OpCounters::add(&counters.point_bins, rotated.len());
        }
        Ok(Self { index, rotation: *rotation, affine, height, width, cells })
    }

    /// Point count per cell of `plane`.
    pub fn density(&self, plane: usize) -> Vec<f64> {
        let mut d = vec![0.0; self.height * self.width];
        for &c in &self.cells[plane] {
            d[c] += 1.0;
        }
        d
    }

    /// Normalized position of a query in this group's frame.
    pub fn normalize_query(&self, q: &Vec3) -> Result<Vec3> {
        let n = self.affine.apply(&self.rotation.apply(q));
        if n.iter().any(|v| !(*v >= -QUERY_MARGIN && *v <= 1.0 + QUERY_MARGIN)) {
            return Err(Error::OutsideDomain([q.x, q.y, q.z]));
        }
        Ok(n.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Bilinear taps of every query on each of the three planes.
    pub fn taps(&self, queries: &[Vec3], counters: &OpCounters) -> Result<[Vec<BilinearTaps>; 3]> {
        let mut out: [Vec<BilinearTaps>; 3] = Default::default();
        for q in queries {
            let n = self.normalize_query(q)?;
            for (plane, o) in out.iter_mut().enumerate() {
                let (u, v) = drop_axis(&n, plane);
                o.push(bilinear_taps(u, v, self.height, self.width));
            }
        }
        OpCounters::add(&counters.bilinear_reads, 3 * queries.len());
        Ok(out)
    }
}

impl GroupProjection {
    /// Like [`GroupProjection::taps`] but clamps queries outside the plane
    /// domain onto its border instead of rejecting them.
    pub fn taps_clamped(&self, queries: &[Vec3], counters: &OpCounters) -> [Vec<BilinearTaps>; 3] {
        let mut out: [Vec<BilinearTaps>; 3] = Default::default();
        for q in queries {
            let n = self.affine.apply(&self.rotation.apply(q)).map(|v| v.clamp(0.0, 1.0));
            for (plane, o) in out.iter_mut().enumerate() {
                let (u, v) = drop_axis(&n, plane);
                o.push(bilinear_taps(u, v, self.height, self.width));
            }
        }
        OpCounters::add(&counters.bilinear_reads, 3 * queries.len());
        out
    }
}

/// Cell-centre registered bilinear taps of `(u, v) ∈ [0, 1]²`; indices are
/// clamped to the border.
pub fn bilinear_taps(u: f64, v: f64, height: usize, width: usize) -> BilinearTaps {
    let x = u * width as f64 - 0.5;
    let y = v * height as f64 - 0.5;
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let clamp = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    let (c0, c1) = (clamp(x0, width), clamp(x0 + 1.0, width));
    let (r0, r1) = (clamp(y0, height), clamp(y0 + 1.0, height));
    let flat = |r: usize, c: usize| (r * width + c) as u32;
    [
        (flat(r0, c0), (1.0 - fx) * (1.0 - fy)),
        (flat(r0, c1), fx * (1.0 - fy)),
        (flat(r1, c0), (1.0 - fx) * fy),
        (flat(r1, c1), fx * fy),
    ]
}

/// Softmax over all cells jointly.
pub fn normalize_density(counts: &[f64]) -> Vec<f64> {
    let max = counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = counts.iter().map(|c| (c - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One tri-plane group: raw max-pooled embedding planes, point counts, and
/// (after [`encode_planes`]) the encoded planes.
#[derive(Debug, Clone, PartialEq)]
pub struct TriplaneGroup {
    pub projection: GroupProjection,
    pub raw: [PlaneGrid; 3],
    pub density: [Vec<f64>; 3],
    pub encoded: Option<[PlaneGrid; 3]>,
}

/// Records the three raw `[C_P, H, W]` planes of one group on `tape`.
pub fn raw_planes_on(tape: &mut Tape, embeddings: NodeId, proj: &GroupProjection) -> Result<[NodeId; 3]> {
    let hw = proj.height * proj.width;
    let c = tape.value(embeddings).cols();
    let mut out = [0; 3];
    for (plane, o) in out.iter_mut().enumerate() {
        let pooled = tape.segment_max(embeddings, &proj.cells[plane], hw)?;
        let t = tape.transpose(pooled)?;
        *o = tape.reshape(t, &[c, proj.height, proj.width])?;
    }
    Ok(out)
}

/// Records `ε_i(F ⊕ softmax(D))` for the three planes; without density the
/// encoders see the embedding planes alone.
pub fn encoded_planes_on(
    tape: &mut Tape,
    raw: &[NodeId; 3],
    proj: &GroupProjection,
    encoders: &[LearnableMap; 3],
    offsets: [usize; 3],
    use_density: bool,
) -> Result<[NodeId; 3]> {
    let mut out = [0; 3];
    let (h, w) = (proj.height, proj.width);
    for plane in 0..3 {
        let input = if use_density {
            let c = tape.value(raw[plane]).shape[0];
            let flat = tape.reshape(raw[plane], &[c, h * w])?;
            let d = tape.input(Tensor { shape: vec![1, h * w], data: normalize_density(&proj.density(plane)) });
            let cat = tape.concat_rows(&[flat, d])?;
            tape.reshape(cat, &[c + 1, h, w])?
        } else {
            raw[plane]
        };
        out[plane] = encoders[plane].forward_on(tape, input, offsets[plane])?;
    }
    Ok(out)
}

/// The two fusion MLPs: `Ẽ1` over one group's three plane features and
/// `Ẽ2` over all groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusers {
    pub e1: LearnableMap,
    pub e2: LearnableMap,
}

impl Fusers {
    pub fn new(c_t: usize, k: usize, c_g: usize, seed: u64) -> Self {
        Self {
            e1: LearnableMap::mlp(&[3 * c_t, c_t, c_t], seed),
            e2: LearnableMap::mlp(&[k * c_t, c_t, c_g], crate::rng::mix64(seed)),
        }
    }
}

/// Records `f_G` for `m` queries whose taps (per group, per plane) are given.
/// `planes[j][i]` is the encoded plane `i` of group `j`.
pub fn query_global_on(
    tape: &mut Tape,
    planes: &[[NodeId; 3]],
    taps: &[[Vec<BilinearTaps>; 3]],
    fusers: &Fusers,
    offsets: (usize, usize),
    counters: &OpCounters,
) -> Result<NodeId> {
    if planes.len() != taps.len() || planes.is_empty() {
        return Err(Error::LengthMismatch(planes.len(), taps.len()));
    }
    let k = planes.len();
    let m = taps[0][0].len();
    let mut per_group = Vec::with_capacity(k);
    for (pl, tp) in planes.iter().zip(taps) {
        let mut f = [0; 3];
        for i in 0..3 {
            f[i] = tape.bilinear(pl[i], tp[i].clone())?;
        }
        per_group.push(tape.concat_cols(&f)?);
    }
    // One Ẽ1 call over every (group, query) row, then regroup rows by query.
    let stacked = tape.concat_rows(&per_group)?;
    let fused = fusers.e1.forward_on(tape, stacked, offsets.0)?;
    let c_t = tape.value(fused).cols();
    let order: Vec<usize> = (0..m).flat_map(|q| (0..k).map(move |j| j * m + q)).collect();
    let regrouped = tape.gather_rows(fused, &order)?;
    let joined = tape.reshape(regrouped, &[m, k * c_t])?;
    let out = fusers.e2.forward_on(tape, joined, offsets.1)?;
    OpCounters::add(&counters.fuser_calls, 2 * m);
    Ok(out)
}

/// Value-level projection of one group without padding.
pub fn project_group(
    cloud: &PointCloud,
    embeddings: &PointEmbeddings,
    rotation: &RotationMatrix,
    height: usize,
    width: usize,
) -> Result<TriplaneGroup> {
    project_group_padded(cloud, embeddings, rotation, 0, (height, width), 0.0, &OpCounters::default())
}

pub fn project_group_padded(
    cloud: &PointCloud,
    embeddings: &PointEmbeddings,
    rotation: &RotationMatrix,
    index: usize,
    hw: (usize, usize),
    pad: f64,
    counters: &OpCounters,
) -> Result<TriplaneGroup> {
    if embeddings.rows() != cloud.len() {
        return Err(Error::LengthMismatch(embeddings.rows(), cloud.len()));
    }
    let proj = GroupProjection::new(&cloud.points, rotation, index, hw, pad, counters)?;
    let mut tape = Tape::new();
    let e = tape.input(Tensor::from_rows(cloud.len(), embeddings.channels, embeddings.features.clone())?);
    let ids = raw_planes_on(&mut tape, e, &proj)?;
    let raw = [
        PlaneGrid::from_tensor(tape.value(ids[0]))?,
        PlaneGrid::from_tensor(tape.value(ids[1]))?,
        PlaneGrid::from_tensor(tape.value(ids[2]))?,
    ];
    let density = [proj.density(0), proj.density(1), proj.density(2)];
    Ok(TriplaneGroup { projection: proj, raw, density, encoded: None })
}

/// Applies the shared plane encoders to a group's raw planes.
pub fn encode_planes(group: &TriplaneGroup, encoders: &[LearnableMap; 3], use_density: bool) -> Result<TriplaneGroup> {
    let mut tape = Tape::new();
    let raw = [
        tape.input(group.raw[0].to_tensor()),
        tape.input(group.raw[1].to_tensor()),
        tape.input(group.raw[2].to_tensor()),
    ];
    let ids = encoded_planes_on(&mut tape, &raw, &group.projection, encoders, [0; 3], use_density)?;
    let enc = [
        PlaneGrid::from_tensor(tape.value(ids[0]))?,
        PlaneGrid::from_tensor(tape.value(ids[1]))?,
        PlaneGrid::from_tensor(tape.value(ids[2]))?,
    ];
    Ok(TriplaneGroup { encoded: Some(enc), ..group.clone() })
}

/// Value-level `f_G` for a batch of metric queries.
pub fn query_global(
    groups: &[TriplaneGroup],
    fusers: &Fusers,
    queries: &[Vec3],
    counters: &OpCounters,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut planes = Vec::with_capacity(groups.len());
    let mut taps = Vec::with_capacity(groups.len());
    for g in groups {
        let enc = g.encoded.as_ref().ok_or_else(|| Error::InvalidArgument("group planes not encoded".into()))?;
        planes.push([tape.input(enc[0].to_tensor()), tape.input(enc[1].to_tensor()), tape.input(enc[2].to_tensor())]);
        taps.push(g.projection.taps(queries, counters)?);
    }
    let out = query_global_on(&mut tape, &planes, &taps, fusers, (0, 0), counters)?;
    Ok(tape.value(out).clone())
}
