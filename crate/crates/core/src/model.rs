//! The full grasp network: point encoder, multi-group tri-plane, local
//! occupancy decoder, shape feature extractor and grasp heads, plus the
//! inference pipeline built on them.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{default_endpoints, frame_from_direction, slerp_frames, RotationMatrix, Vec3};
use crate::grasp::{cell_of, collision_filter, fibonacci_directions, pose_nms, GraspPose, GripperSpec, N_CELLS};
use crate::io::Checkpoint;
use crate::nn::{AdamState, LearnableMap, NodeId, Tape, Tensor};
use crate::occupancy::{
    build_region, candidate_voxels, local_context_on, nearest_index, Candidate, GraspRegionSpec, LocalOccupancyRegion,
};
use crate::pointcloud::{farthest_point_sample, normalize_padded, voxel_key, Affine, VoxelKey};
use crate::rng;
use crate::triplane::{
    encoded_planes_on, query_global_on, raw_planes_on, Fusers, GroupProjection, OpCounters, PointEncoder,
};

/// Key points per candidate fed to the implicit shape branch.
pub const KEY_POINTS: usize = 32;
/// Set-abstraction centre counts per stage.
pub const SA_POINTS: [usize; 4] = [32, 8, 4, 1];
/// Set-abstraction grouping radii per stage (metres).
pub const SA_RADII: [f64; 4] = [0.02, 0.04, 0.08, f64::INFINITY];
/// Neighbourhood radius of the ball-query baseline (metres).
pub const BALL_RADIUS: f64 = 0.03;
pub const NMS_RADIUS: f64 = 0.03;
pub const NMS_TOP: usize = 50;
/// Edge length (in cells) of the dense global-query baseline grid.
pub const DENSE_CELLS: usize = 60;
/// Region voxel budget used by inference.
pub const REGION_BUDGET: usize = 2_000_000;
const QUERY_CHUNK: usize = 4096;
const DECODE_CHUNK: usize = 128;

/// Switches for the ablated variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Density channel concatenated to the plane encoder input.
    pub density: bool,
    /// Local context (`f_p′ ⊕ PE`) concatenated to the global feature.
    pub local_context: bool,
    /// Grasp-direction refinement from the completed shape.
    pub refine: bool,
    /// Local occupancy prediction; off means shape features come straight
    /// from observed points.
    pub occupancy: bool,
    /// Replace the tri-plane global feature by a max over cloud embeddings
    /// within [`BALL_RADIUS`].
    pub ball_query: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { density: true, local_context: true, refine: true, occupancy: true, ball_query: false }
    }
}

impl Ablation {
    pub const FLAGS: [&'static str; 5] = ["no_density", "no_local", "no_refine", "no_occupancy", "ball_query"];

    /// Applies a comma-separated list of flags from [`Ablation::FLAGS`].
    pub fn apply_flags(&mut self, flags: &str) -> Result<()> {
        for f in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match f {
                "no_density" => self.density = false,
                "no_local" => self.local_context = false,
                "no_refine" => self.refine = false,
                "no_occupancy" => self.occupancy = false,
                "ball_query" => self.ball_query = true,
                other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
            }
        }
        Ok(())
    }

    /// Active flags, comma separated (empty for the full model).
    pub fn flags(&self) -> String {
        let mut out = Vec::new();
        if !self.density {
            out.push("no_density");
        }
        if !self.local_context {
            out.push("no_local");
        }
        if !self.refine {
            out.push("no_refine");
        }
        if !self.occupancy {
            out.push("no_occupancy");
        }
        if self.ball_query {
            out.push("ball_query");
        }
        out.join(",")
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub k_groups: usize,
    pub plane_h: usize,
    pub plane_w: usize,
    pub c_p: usize,
    pub c_t: usize,
    pub c_q: usize,
    pub plane_hidden: usize,
    pub head_hidden: usize,
    pub sa_width: usize,
    pub directions: usize,
    pub region: GraspRegionSpec,
    pub gripper: GripperSpec,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_groups: 3,
            plane_h: 64,
            plane_w: 64,
            c_p: 256,
            c_t: 128,
            c_q: 512,
            plane_hidden: 128,
            head_hidden: 256,
            sa_width: 128,
            directions: 60,
            region: GraspRegionSpec::default(),
            gripper: GripperSpec::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// Small widths for CPU-bound tests and experiments.
    pub fn tiny() -> Self {
        Self {
            plane_h: 16,
            plane_w: 16,
            c_p: 32,
            c_t: 16,
            c_q: 64,
            plane_hidden: 8,
            head_hidden: 64,
            sa_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        let positive = [
            self.k_groups,
            self.plane_h,
            self.plane_w,
            self.c_p,
            self.c_t,
            self.plane_hidden,
            self.head_hidden,
            self.sa_width,
            self.directions,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("zero-sized dimension in {self:?}")));
        }
        if self.plane_h < 4 || self.plane_w < 4 {
            return Err(Error::Config("planes must be at least 4x4".into()));
        }
        if self.ablation.local_context && self.c_q <= self.c_p + self.c_t {
            return Err(Error::Config(format!("c_q ({}) must exceed c_p + c_t ({})", self.c_q, self.c_p + self.c_t)));
        }
        if (self.gripper.radius - self.region.r).abs() > 1e-12
            || (self.gripper.d_min - self.region.d_min).abs() > 1e-12
            || (self.gripper.d_max - self.region.d_max).abs() > 1e-12
        {
            return Err(Error::Config("gripper and region geometry disagree".into()));
        }
        Ok(())
    }

    /// Width of the positional embedding inside the local context.
    pub fn c_pe(&self) -> usize {
        self.c_q.saturating_sub(self.c_p + self.c_t).max(1)
    }

    /// Width of the per-voxel queried feature.
    pub fn query_width(&self) -> usize {
        let global = if self.ablation.ball_query { self.c_p } else { self.c_t };
        if self.ablation.local_context {
            global + self.c_p + self.c_pe()
        } else {
            global
        }
    }

    fn implicit_width(&self) -> usize {
        if self.ablation.occupancy {
            self.query_width()
        } else {
            self.c_p
        }
    }

    pub fn shape_width(&self) -> usize {
        self.sa_width + self.implicit_width()
    }

    /// Padding of the normalization boxes so every region voxel stays inside.
    pub fn pad(&self) -> f64 {
        self.region.reach() + self.region.v
    }

    /// Region and gripper geometry from radius and depth range.
    pub fn with_geometry(mut self, r: f64, d_min: f64, d_max: f64, v: f64) -> Self {
        self.region = GraspRegionSpec { r, d_min, d_max, v };
        self.gripper = GripperSpec { radius: r, d_min, d_max, ..self.gripper };
        self
    }
}

/// Everything learnable, in a fixed parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: PointEncoder,
    pub planes: [LearnableMap; 3],
    pub fusers: Fusers,
    pub pe: LearnableMap,
    pub decoder: LearnableMap,
    pub affordance: LearnableMap,
    pub view: LearnableMap,
    pub sa: [LearnableMap; 4],
    pub refine: LearnableMap,
    pub grasp: LearnableMap,
    frames: Vec<RotationMatrix>,
    directions: Vec<Vec3>,
    direction_frames: Vec<RotationMatrix>,
}

/// Offsets of each map inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct Offsets {
    pub encoder: usize,
    pub planes: [usize; 3],
    pub e1: usize,
    pub e2: usize,
    pub pe: usize,
    pub decoder: usize,
    pub affordance: usize,
    pub view: usize,
    pub sa: [usize; 4],
    pub refine: usize,
    pub grasp: usize,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = rng::derive(seed, rng::streams::INIT);
        let s = |i: u64| rng::derive(base, i);
        let c = &config;
        let plane_in = c.c_p + c.ablation.density as usize;
        let planes = [0, 1, 2].map(|i| LearnableMap::plane_encoder(plane_in, c.plane_hidden, c.c_t, s(10 + i)));
        let q = c.query_width();
        let sw = c.sa_width;
        let sa = [
            LearnableMap::mlp(&[3, sw / 2, sw / 2], s(30)),
            LearnableMap::mlp(&[3 + sw / 2, sw, sw], s(31)),
            LearnableMap::mlp(&[3 + sw, sw, sw], s(32)),
            LearnableMap::mlp(&[3 + sw, sw, sw], s(33)),
        ];
        let shape = c.shape_width();
        let frames = slerp_frames(&default_endpoints().0, &default_endpoints().1, c.k_groups)?.rotations;
        let directions = fibonacci_directions(c.directions);
        let direction_frames = directions.iter().map(frame_from_direction).collect();
        Ok(Self {
            config,
            encoder: PointEncoder::new(c.c_p, s(1)),
            planes,
            fusers: Fusers::new(c.c_t, c.k_groups, c.c_t, s(20)),
            pe: LearnableMap::mlp(&[9, c.c_pe(), c.c_pe()], s(21)),
            decoder: LearnableMap::mlp(&[q, (q / 2).max(1), 1], s(22)),
            affordance: LearnableMap::mlp(&[c.c_p, c.c_p, 1], s(23)),
            view: LearnableMap::mlp(&[c.c_p, c.c_p, c.directions], s(24)),
            sa,
            refine: LearnableMap::mlp(&[shape, c.head_hidden, c.directions], s(40)),
            grasp: LearnableMap::mlp(&[shape, c.head_hidden, 2 * N_CELLS], s(41)),
            frames,
            directions,
            direction_frames,
        })
    }

    fn maps(&self) -> Vec<&LearnableMap> {
        let mut v = vec![&self.encoder.map];
        v.extend(self.planes.iter());
        v.extend([&self.fusers.e1, &self.fusers.e2, &self.pe, &self.decoder, &self.affordance, &self.view]);
        v.extend(self.sa.iter());
        v.extend([&self.refine, &self.grasp]);
        v
    }

    fn maps_mut(&mut self) -> Vec<&mut LearnableMap> {
        let mut v = vec![&mut self.encoder.map];
        v.extend(self.planes.iter_mut());
        v.extend([
            &mut self.fusers.e1,
            &mut self.fusers.e2,
            &mut self.pe,
            &mut self.decoder,
            &mut self.affordance,
            &mut self.view,
        ]);
        v.extend(self.sa.iter_mut());
        v.extend([&mut self.refine, &mut self.grasp]);
        v
    }

    pub fn offsets(&self) -> Offsets {
        let starts: Vec<usize> = self
            .maps()
            .iter()
            .scan(0, |acc, m| {
                let s = *acc;
                *acc += m.param_count();
                Some(s)
            })
            .collect();
        Offsets {
            encoder: starts[0],
            planes: [starts[1], starts[2], starts[3]],
            e1: starts[4],
            e2: starts[5],
            pe: starts[6],
            decoder: starts[7],
            affordance: starts[8],
            view: starts[9],
            sa: [starts[10], starts[11], starts[12], starts[13]],
            refine: starts[14],
            grasp: starts[15],
        }
    }

    pub fn param_count(&self) -> usize {
        self.maps().iter().map(|m| m.param_count()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.maps().iter().flat_map(|m| m.params.iter().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::LengthMismatch(flat.len(), self.param_count()));
        }
        let mut at = 0;
        for m in self.maps_mut() {
            let n = m.param_count();
            m.params.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Parameters and optional optimizer state in checkpoint form.
    pub fn checkpoint(&self, adam: Option<AdamState>) -> Checkpoint {
        Checkpoint { descriptor: self.descriptor(), params: self.params(), adam }
    }

    /// Loads checkpoint parameters; the checkpoint must describe this
    /// architecture.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let expected = self.descriptor();
        if ck.descriptor != expected || ck.params.len() != self.param_count() {
            return Err(Error::ArchitectureMismatch { expected, found: ck.descriptor.clone() });
        }
        if ck.adam.as_ref().is_some_and(|a| a.m.len() != ck.params.len() || a.v.len() != ck.params.len()) {
            return Err(Error::format("CKPT1", "optimizer state does not match the parameters"));
        }
        self.set_params(&ck.params)
    }

    /// Architecture fingerprint stored in checkpoints.
    pub fn descriptor(&self) -> String {
        let c = &self.config;
        let maps: Vec<String> = self.maps().iter().map(|m| m.kind.descriptor()).collect();
        format!(
            "occugrasp k={} plane={}x{} r={} d=[{},{}] v={} ball={} maps={}",
            c.k_groups,
            c.plane_h,
            c.plane_w,
            c.region.r,
            c.region.d_min,
            c.region.d_max,
            c.region.v,
            c.ablation.ball_query,
            maps.join(";")
        )
    }

    pub fn frames(&self) -> &[RotationMatrix] {
        &self.frames
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    /// Approach frame of view direction `i`.
    pub fn direction_frame(&self, i: usize) -> RotationMatrix {
        self.direction_frames[i]
    }
}

/// Per-scene encoding recorded on a tape.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub points: Vec<Vec3>,
    pub affine: Affine,
    /// `[N, C_P]` point embeddings.
    pub embeddings: NodeId,
    pub projections: Vec<GroupProjection>,
    /// Encoded planes per group.
    pub planes: Vec<[NodeId; 3]>,
    ball: Option<BallIndex>,
    /// Clamp out-of-domain queries onto the plane border.
    pub clamp: bool,
}

/// Uniform hash of cloud points for radius lookups.
#[derive(Debug, Clone)]
struct BallIndex {
    cell: f64,
    buckets: HashMap<VoxelKey, Vec<usize>>,
}

impl BallIndex {
    fn new(points: &[Vec3], cell: f64) -> Self {
        let mut buckets: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(voxel_key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    /// Indices within `radius` of `q`, ascending.
    fn within(&self, points: &[Vec3], q: &Vec3, radius: f64) -> Vec<usize> {
        let k = voxel_key(q, self.cell);
        let mut out = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(b.iter().copied().filter(|&i| (points[i] - q).norm() <= radius));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Wall time per inference stage, seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub encode: f64,
    pub planes: f64,
    pub query: f64,
    pub decode: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.encode + self.planes + self.query + self.decode
    }
}

/// Point sets feeding the shape feature of one candidate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeSet {
    /// Occupied positions in the candidate frame, scaled by `1 / r`.
    pub positions: Vec<Vec3>,
    /// Rows of the implicit feature node belonging to this candidate.
    pub key_rows: Vec<usize>,
}

impl ShapeSet {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Indices `0..n` ordered by descending value; ties keep the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Candidate grasp points: uniform over points with affordance `> 0.5`,
/// with replacement when that set is smaller than `n`, falling back to all
/// points when it is empty.
pub fn sample_candidates(affordance: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    if affordance.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let area: Vec<usize> = (0..affordance.len()).filter(|&i| affordance[i] > 0.5).collect();
    let pool: Vec<usize> = if area.is_empty() { (0..affordance.len()).collect() } else { area };
    let mut r = rng::seeded(seed);
    if pool.len() >= n {
        Ok(index::sample(&mut r, pool.len(), n).into_iter().map(|i| pool[i]).collect())
    } else {
        Ok((0..n).map(|_| pool[r.random_range(0..pool.len())]).collect())
    }
}

/// Uniform subset of at most `k` of `0..n`, in ascending order.
pub fn key_subset(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v = index::sample(&mut rng::seeded(seed), n, k).into_vec();
    v.sort_unstable();
    v
}

/// Shape-set positions of `voxels` relative to a candidate.
pub fn local_positions(c: &Candidate, centers: &[Vec3], r: f64) -> Vec<Vec3> {
    centers.iter().map(|x| c.rotation.apply_inverse(&(x - c.point)) / r).collect()
}

impl Model {
    /// Records the point encoder and (unless the ball-query variant is
    /// active) the K encoded tri-plane groups.
    pub fn encode_on(&self, tape: &mut Tape, points: &[Vec3], counters: &OpCounters) -> Result<Encoded> {
        let (emb, affine) = self.embed_on(tape, points)?;
        let (projections, planes, ball) = self.planes_on(tape, points, emb, counters)?;
        Ok(Encoded { points: points.to_vec(), affine, embeddings: emb, projections, planes, ball, clamp: false })
    }

    fn embed_on(&self, tape: &mut Tape, points: &[Vec3]) -> Result<(NodeId, Affine)> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let cloud = crate::pointcloud::PointCloud::new(points.to_vec());
        let (normalized, affine) = normalize_padded(&cloud, self.config.pad());
        let x = tape.input(PointEncoder::input_features(&normalized, &affine)?);
        let emb = self.encoder.map.forward_on(tape, x, self.offsets().encoder)?;
        Ok((emb, affine))
    }

    #[allow(clippy::type_complexity)]
    fn planes_on(
        &self,
        tape: &mut Tape,
        points: &[Vec3],
        emb: NodeId,
        counters: &OpCounters,
    ) -> Result<(Vec<GroupProjection>, Vec<[NodeId; 3]>, Option<BallIndex>)> {
        let c = &self.config;
        if c.ablation.ball_query {
            return Ok((Vec::new(), Vec::new(), Some(BallIndex::new(points, BALL_RADIUS))));
        }
        let off = self.offsets();
        let mut projections = Vec::with_capacity(c.k_groups);
        let mut planes = Vec::with_capacity(c.k_groups);
        for (j, rot) in self.frames.iter().enumerate() {
            let proj = GroupProjection::new(points, rot, j, (c.plane_h, c.plane_w), self.config.pad(), counters)?;
            let raw = raw_planes_on(tape, emb, &proj)?;
            planes.push(encoded_planes_on(tape, &raw, &proj, &self.planes, off.planes, c.ablation.density)?);
            projections.push(proj);
        }
        Ok((projections, planes, None))
    }

    /// Copies an encoding's values onto a fresh tape as constants.
    pub fn detach(&self, from: &Tape, enc: &Encoded, to: &mut Tape) -> Encoded {
        Encoded {
            points: enc.points.clone(),
            affine: enc.affine,
            embeddings: to.input(from.value(enc.embeddings).clone()),
            projections: enc.projections.clone(),
            planes: enc.planes.iter().map(|p| p.map(|id| to.input(from.value(id).clone()))).collect(),
            ball: enc.ball.clone(),
            clamp: enc.clamp,
        }
    }

    /// Records `f_pq` for metric queries. `cand_points` and `cand_emb`
    /// describe the candidates used for the local context and `nearest`
    /// gives each query's nearest candidate.
    #[allow(clippy::too_many_arguments)]
    pub fn query_on(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        queries: &[Vec3],
        cand_points: &[Vec3],
        nearest: &[usize],
        cand_emb: NodeId,
        counters: &OpCounters,
    ) -> Result<NodeId> {
        let off = self.offsets();
        let global = match &enc.ball {
            Some(ball) => {
                let mut rows = Vec::new();
                let mut group = Vec::new();
                for (qi, q) in queries.iter().enumerate() {
                    for i in ball.within(&enc.points, q, BALL_RADIUS) {
                        rows.push(i);
                        group.push(qi);
                    }
                }
                if rows.is_empty() {
                    tape.input(Tensor::zeros(&[queries.len(), self.config.c_p]))
                } else {
                    let g = tape.gather_rows(enc.embeddings, &rows)?;
                    tape.segment_max(g, &group, queries.len())?
                }
            }
            None => {
                let taps = if enc.clamp {
                    enc.projections.iter().map(|p| p.taps_clamped(queries, counters)).collect()
                } else {
                    enc.projections.iter().map(|p| p.taps(queries, counters)).collect::<Result<Vec<_>>>()?
                };
                query_global_on(tape, &enc.planes, &taps, &self.fusers, (off.e1, off.e2), counters)?
            }
        };
        if !self.config.ablation.local_context {
            return Ok(global);
        }
        let local = local_context_on(tape, queries, cand_points, nearest, cand_emb, &enc.affine, &self.pe, off.pe)?;
        tape.concat_cols(&[global, local])
    }

    /// Records occupancy logits `[M, 1]` from queried features.
    pub fn occupancy_logits_on(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        self.decoder.forward_on(tape, features, self.offsets().decoder)
    }

    /// Records per-point affordance probabilities `[N, 1]`.
    pub fn affordance_on(&self, tape: &mut Tape, emb: NodeId) -> Result<NodeId> {
        let l = self.affordance.forward_on(tape, emb, self.offsets().affordance)?;
        Ok(tape.sigmoid(l))
    }

    /// Records view-wise affordance `[n, V]` from candidate embeddings.
    pub fn view_on(&self, tape: &mut Tape, cand_emb: NodeId) -> Result<NodeId> {
        let l = self.view.forward_on(tape, cand_emb, self.offsets().view)?;
        Ok(tape.sigmoid(l))
    }

    /// Records refined view-wise affordance `[n, V]` from shape features.
    pub fn refine_on(&self, tape: &mut Tape, shape: NodeId) -> Result<NodeId> {
        let l = self.refine.forward_on(tape, shape, self.offsets().refine)?;
        Ok(tape.sigmoid(l))
    }

    /// Records `(scores [n, 48], widths [n, 48])`.
    pub fn grasp_on(&self, tape: &mut Tape, shape: NodeId) -> Result<(NodeId, NodeId)> {
        let out = self.grasp.forward_on(tape, shape, self.offsets().grasp)?;
        let s = tape.slice_cols(out, 0, N_CELLS)?;
        let w = tape.slice_cols(out, N_CELLS, N_CELLS)?;
        let scores = tape.sigmoid(s);
        let w = tape.sigmoid(w);
        let widths = tape.scale(w, 2.0 * self.config.region.r);
        Ok((scores, widths))
    }

    /// Records the explicit set-abstraction branch over every set; empty
    /// sets produce zero rows.
    pub fn explicit_branch_on(&self, tape: &mut Tape, sets: &[ShapeSet]) -> Result<NodeId> {
        let off = self.offsets();
        let r = self.config.region.r;
        let mut positions: Vec<Vec<Vec3>> = sets.iter().map(|s| s.positions.clone()).collect();
        let mut feats: Option<NodeId> = None;
        for stage in 0..4 {
            let radius = SA_RADII[stage] / r;
            let mut rel = Vec::new();
            let mut gather = Vec::new();
            let mut group = Vec::new();
            let mut next = Vec::with_capacity(positions.len());
            let mut row0 = 0;
            let mut g = 0;
            for (si, pos) in positions.iter().enumerate() {
                let m = SA_POINTS[stage].min(pos.len());
                let centers = farthest_point_sample(pos, m)?;
                for &c in &centers {
                    let gid = if stage == 3 { si } else { g };
                    for (j, p) in pos.iter().enumerate() {
                        let d = p - pos[c];
                        if d.norm() <= radius {
                            rel.extend_from_slice(&[d.x, d.y, d.z]);
                            gather.push(row0 + j);
                            group.push(gid);
                        }
                    }
                    g += 1;
                }
                row0 += pos.len();
                next.push(centers.iter().map(|&c| pos[c]).collect::<Vec<_>>());
            }
            if group.is_empty() {
                return Ok(tape.input(Tensor::zeros(&[sets.len(), self.config.sa_width])));
            }
            let x = tape.input(Tensor::from_rows(group.len(), 3, rel)?);
            let x = match feats {
                Some(f) => {
                    let gathered = tape.gather_rows(f, &gather)?;
                    tape.concat_cols(&[x, gathered])?
                }
                None => x,
            };
            let h = self.sa[stage].forward_on(tape, x, off.sa[stage])?;
            let groups = if stage == 3 { sets.len() } else { g };
            feats = Some(tape.segment_max(h, &group, groups)?);
            positions = next;
        }
        Ok(feats.expect("four stages ran"))
    }

    /// Records the shape feature `[n, S + W]`: the explicit branch over each
    /// set's positions concatenated with the channel max of its key rows in
    /// `key_features`.
    pub fn shape_feature_on(&self, tape: &mut Tape, sets: &[ShapeSet], key_features: Option<NodeId>) -> Result<NodeId> {
        let explicit = self.explicit_branch_on(tape, sets)?;
        let mut rows = Vec::new();
        let mut group = Vec::new();
        for (si, s) in sets.iter().enumerate() {
            rows.extend_from_slice(&s.key_rows);
            group.extend(std::iter::repeat_n(si, s.key_rows.len()));
        }
        let implicit = match key_features {
            Some(f) if !rows.is_empty() => {
                let g = tape.gather_rows(f, &rows)?;
                tape.segment_max(g, &group, sets.len())?
            }
            _ => tape.input(Tensor::zeros(&[sets.len(), self.config.implicit_width()])),
        };
        tape.concat_cols(&[explicit, implicit])
    }
}

/// Result of running the pipeline on one cloud.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Final poses after collision filtering and NMS (camera frame).
    pub poses: Vec<GraspPose>,
    /// Decoded pose of every candidate before filtering.
    pub raw_poses: Vec<GraspPose>,
    pub candidates: Vec<Candidate>,
    /// Region used for occupancy (empty without occupancy prediction).
    pub region: Option<LocalOccupancyRegion>,
    pub probabilities: Vec<f64>,
    pub queried_voxels: usize,
    pub times: StageTimes,
}

impl Inference {
    pub fn occupied(&self) -> Vec<bool> {
        self.probabilities.iter().map(|&p| p > 0.5).collect()
    }
}

/// How occupancy features are obtained at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Query only the local grasp region.
    Local,
    /// Query a dense `n³` grid over the padded cloud bounds, then read the
    /// region voxels off the nearest dense cell.
    Dense(usize),
}

/// Options of [`Model::infer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub candidates: usize,
    pub seed: u64,
    pub collision_filter: bool,
    pub mode: QueryMode,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { candidates: 1024, seed: 0, collision_filter: true, mode: QueryMode::Local }
    }
}

struct QueryResult {
    probabilities: Vec<f64>,
    /// Queried feature rows of occupied voxels, keyed by region row.
    features: HashMap<usize, Vec<f64>>,
    queried: usize,
}

impl Model {
    /// Value-level occupancy over `queries` in chunks, keeping features of
    /// the voxels predicted occupied.
    #[allow(clippy::too_many_arguments)]
    pub fn query_values(
        &self,
        tape: &Tape,
        enc: &Encoded,
        queries: &[Vec3],
        cand_points: &[Vec3],
        nearest: &[usize],
        cand_emb: &Tensor,
        counters: &OpCounters,
        keep_features: bool,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut probs = Vec::with_capacity(queries.len());
        let mut feats = Vec::new();
        for start in (0..queries.len()).step_by(QUERY_CHUNK) {
            let end = (start + QUERY_CHUNK).min(queries.len());
            let mut t = Tape::new();
            let e = self.detach(tape, enc, &mut t);
            let ce = t.input(cand_emb.clone());
            let f = self.query_on(&mut t, &e, &queries[start..end], cand_points, &nearest[start..end], ce, counters)?;
            let l = self.occupancy_logits_on(&mut t, f)?;
            let fv = t.value(f);
            for (i, &x) in t.value(l).data.iter().enumerate() {
                let p = crate::nn::sigmoid(x);
                probs.push(p);
                if keep_features {
                    feats.push(if p > 0.5 { fv.row(i).to_vec() } else { Vec::new() });
                }
            }
        }
        Ok((probs, feats))
    }

    #[allow(clippy::too_many_arguments)]
    fn region_query(
        &self,
        tape: &Tape,
        enc: &Encoded,
        region: &LocalOccupancyRegion,
        cands: &[Candidate],
        cand_emb: &Tensor,
        mode: QueryMode,
        counters: &OpCounters,
    ) -> Result<QueryResult> {
        let cand_points: Vec<Vec3> = cands.iter().map(|c| c.point).collect();
        match mode {
            QueryMode::Local => {
                let (probabilities, feats) = self.query_values(
                    tape,
                    enc,
                    &region.centers,
                    &cand_points,
                    &region.owner,
                    cand_emb,
                    counters,
                    true,
                )?;
                let features = feats.into_iter().enumerate().filter(|(_, f)| !f.is_empty()).collect();
                Ok(QueryResult { probabilities, features, queried: region.len() })
            }
            QueryMode::Dense(n) => {
                let (lo, hi) = crate::pointcloud::bounds_of(&enc.points).ok_or(Error::EmptyCloud)?;
                let pad = Vec3::repeat(self.config.pad());
                let (lo, hi) = (lo - pad, hi + pad);
                let step = (hi - lo) / n as f64;
                let mut centers = Vec::with_capacity(n * n * n);
                for k in 0..n {
                    for j in 0..n {
                        for i in 0..n {
                            centers.push(
                                lo + step.component_mul(&Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5)),
                            );
                        }
                    }
                }
                let nearest: Vec<usize> = centers.iter().map(|c| nearest_index(&cand_points, c)).collect();
                let (dense_p, dense_f) =
                    self.query_values(tape, enc, &centers, &cand_points, &nearest, cand_emb, counters, true)?;
                let cell = |x: &Vec3| -> usize {
                    let mut idx = [0usize; 3];
                    for a in 0..3 {
                        idx[a] = (((x[a] - lo[a]) / step[a]).floor().max(0.0) as usize).min(n - 1);
                    }
                    idx[0] + n * (idx[1] + n * idx[2])
                };
                let mut probabilities = Vec::with_capacity(region.len());
                let mut features = HashMap::new();
                for (row, c) in region.centers.iter().enumerate() {
                    let d = cell(c);
                    probabilities.push(dense_p[d]);
                    if dense_p[d] > 0.5 {
                        features.insert(row, dense_f[d].clone());
                    }
                }
                Ok(QueryResult { probabilities, features, queried: centers.len() })
            }
        }
    }

    /// Occupancy probabilities over the region of caller-chosen candidates
    /// (input point rows with approach frames), bypassing the affordance and
    /// view heads.
    pub fn predict_occupancy(
        &self,
        points: &[Vec3],
        rows: &[usize],
        rotations: &[RotationMatrix],
        counters: &OpCounters,
    ) -> Result<(LocalOccupancyRegion, Vec<f64>)> {
        if rows.len() != rotations.len() {
            return Err(Error::LengthMismatch(rows.len(), rotations.len()));
        }
        let cands: Vec<Candidate> =
            rows.iter().zip(rotations).map(|(&i, r)| Candidate { point: points[i], rotation: *r }).collect();
        self.occupancy_for(points, rows, &cands, counters)
    }

    /// Like [`Model::predict_occupancy`] but centres each cylinder on an
    /// arbitrary anchor; features come from the nearest input point.
    pub fn predict_occupancy_at(
        &self,
        points: &[Vec3],
        anchors: &[Vec3],
        rotations: &[RotationMatrix],
        counters: &OpCounters,
    ) -> Result<(LocalOccupancyRegion, Vec<f64>)> {
        if anchors.len() != rotations.len() {
            return Err(Error::LengthMismatch(anchors.len(), rotations.len()));
        }
        let rows: Vec<usize> = anchors.iter().map(|a| nearest_index(points, a)).collect();
        let cands: Vec<Candidate> =
            anchors.iter().zip(rotations).map(|(a, r)| Candidate { point: *a, rotation: *r }).collect();
        self.occupancy_for(points, &rows, &cands, counters)
    }

    fn occupancy_for(
        &self,
        points: &[Vec3],
        rows: &[usize],
        cands: &[Candidate],
        counters: &OpCounters,
    ) -> Result<(LocalOccupancyRegion, Vec<f64>)> {
        if !self.config.ablation.occupancy {
            return Err(Error::InvalidArgument("model has no occupancy head".into()));
        }
        let mut tape = Tape::new();
        let (emb, affine) = self.embed_on(&mut tape, points)?;
        let ce = tape.gather_rows(emb, rows)?;
        let cand_emb = tape.value(ce).clone();
        let (projections, planes, ball) = self.planes_on(&mut tape, points, emb, counters)?;
        let enc = Encoded { points: points.to_vec(), affine, embeddings: emb, projections, planes, ball, clamp: false };
        let region = build_region(cands, &self.config.region, REGION_BUDGET)?;
        let cand_points: Vec<Vec3> = cands.iter().map(|c| c.point).collect();
        let (p, _) =
            self.query_values(&tape, &enc, &region.centers, &cand_points, &region.owner, &cand_emb, counters, false)?;
        Ok((region, p))
    }

    /// Candidate frames for view direction indices.
    pub fn candidates_for(&self, points: &[Vec3], dirs: &[usize]) -> Vec<Candidate> {
        points.iter().zip(dirs).map(|(p, &d)| Candidate { point: *p, rotation: self.direction_frames[d] }).collect()
    }

    /// Shape sets for candidates over a set of known occupied region rows.
    /// Returns the sets and the region rows of each set's key points.
    pub fn occupied_sets(
        &self,
        cands: &[Candidate],
        region: &LocalOccupancyRegion,
        occupied_rows: &HashMap<VoxelKey, usize>,
        seed: u64,
    ) -> (Vec<ShapeSet>, Vec<Vec<usize>>) {
        let spec = &self.config.region;
        let mut sets = Vec::with_capacity(cands.len());
        let mut keys = Vec::with_capacity(cands.len());
        for (ci, c) in cands.iter().enumerate() {
            let rows: Vec<usize> =
                candidate_voxels(c, spec).iter().filter_map(|k| occupied_rows.get(k).copied()).collect();
            let centers: Vec<Vec3> = rows.iter().map(|&r| region.centers[r]).collect();
            let pick = key_subset(rows.len(), KEY_POINTS, rng::derive(seed, ci as u64));
            keys.push(pick.iter().map(|&i| rows[i]).collect());
            sets.push(ShapeSet { positions: local_positions(c, &centers, spec.r), key_rows: Vec::new() });
        }
        (sets, keys)
    }

    /// Shape sets from observed points when occupancy is disabled; key rows
    /// index cloud points.
    pub fn observed_sets(&self, cands: &[Candidate], points: &[Vec3], seed: u64) -> (Vec<ShapeSet>, Vec<Vec<usize>>) {
        let spec = &self.config.region;
        let mut sets = Vec::with_capacity(cands.len());
        let mut keys = Vec::with_capacity(cands.len());
        for (ci, c) in cands.iter().enumerate() {
            let rows: Vec<usize> =
                (0..points.len()).filter(|&i| spec.contains(&c.point, &c.rotation, &points[i])).collect();
            let pos: Vec<Vec3> = rows.iter().map(|&i| points[i]).collect();
            let pick = key_subset(rows.len(), KEY_POINTS, rng::derive(seed, ci as u64));
            keys.push(pick.iter().map(|&i| rows[i]).collect());
            sets.push(ShapeSet { positions: local_positions(c, &pos, spec.r), key_rows: Vec::new() });
        }
        (sets, keys)
    }

    /// Shape features for a chunk of candidates at value level. `rows_of`
    /// gives each set's key rows into `table`.
    fn shape_values(
        &self,
        sets: &mut [ShapeSet],
        key_rows: &[Vec<usize>],
        table: &dyn Fn(usize) -> Vec<f64>,
    ) -> Result<Tensor> {
        let width = self.config.implicit_width();
        let mut data = Vec::new();
        let mut at = 0;
        for (s, rows) in sets.iter_mut().zip(key_rows) {
            s.key_rows = (at..at + rows.len()).collect();
            at += rows.len();
            for &r in rows {
                data.extend(table(r));
            }
        }
        let mut t = Tape::new();
        let kf = if at > 0 { Some(t.input(Tensor::from_rows(at, width, data)?)) } else { None };
        let f = self.shape_feature_on(&mut t, sets, kf)?;
        Ok(t.value(f).clone())
    }

    fn head_values(&self, map: &LearnableMap, x: &Tensor) -> Result<Tensor> {
        let out = map.forward(x)?;
        Ok(Tensor { shape: out.shape, data: out.data.iter().map(|&v| crate::nn::sigmoid(v)).collect() })
    }

    /// Runs the full pipeline on a camera-frame cloud.
    pub fn infer(&self, points: &[Vec3], opts: &InferOptions, counters: &OpCounters) -> Result<Inference> {
        let c = &self.config;
        let mut times = StageTimes::default();
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let (emb, affine) = self.embed_on(&mut tape, points)?;
        let aff = self.affordance_on(&mut tape, emb)?;
        let affordance = tape.value(aff).data.clone();
        let cand_idx = sample_candidates(&affordance, opts.candidates, opts.seed)?;
        let ce = tape.gather_rows(emb, &cand_idx)?;
        let view = self.view_on(&mut tape, ce)?;
        let views = tape.value(view).clone();
        let dirs: Vec<usize> = (0..cand_idx.len()).map(|i| argmax(views.row(i))).collect();
        let cand_points: Vec<Vec3> = cand_idx.iter().map(|&i| points[i]).collect();
        let mut cands = self.candidates_for(&cand_points, &dirs);
        let cand_emb = tape.value(ce).clone();
        times.encode = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let (projections, planes, ball) = if c.ablation.occupancy {
            self.planes_on(&mut tape, points, emb, counters)?
        } else {
            (Vec::new(), Vec::new(), None)
        };
        let clamp = matches!(opts.mode, QueryMode::Dense(_));
        let enc = Encoded { points: points.to_vec(), affine, embeddings: emb, projections, planes, ball, clamp };
        times.planes = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let mut region = None;
        let mut probabilities = Vec::new();
        let mut queried = 0;
        let mut occ_features = HashMap::new();
        let mut occupied_rows = HashMap::new();
        if c.ablation.occupancy {
            let r = build_region(&cands, &c.region, REGION_BUDGET)?;
            let q = self.region_query(&tape, &enc, &r, &cands, &cand_emb, opts.mode, counters)?;
            probabilities = q.probabilities;
            queried = q.queried;
            occ_features = q.features;
            occupied_rows = occ_features.keys().map(|&row| (r.voxels[row], row)).collect();
            region = Some(r);
        }
        times.query = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        let emb_values = tape.value(emb).clone();
        let mut raw_poses = Vec::with_capacity(cands.len());
        for start in (0..cands.len()).step_by(DECODE_CHUNK) {
            let end = (start + DECODE_CHUNK).min(cands.len());
            let seed = rng::derive(opts.seed, start as u64);
            let chunk = &mut cands[start..end];
            let shape = if let Some(r) = &region {
                let table = |row: usize| occ_features[&row].clone();
                let (mut sets, keys) = self.occupied_sets(chunk, r, &occupied_rows, seed);
                let mut shape = self.shape_values(&mut sets, &keys, &table)?;
                if c.ablation.refine {
                    let refined = self.head_values(&self.refine, &shape)?;
                    for (i, cand) in chunk.iter_mut().enumerate() {
                        cand.rotation = self.direction_frames[argmax(refined.row(i))];
                    }
                    let (mut sets, keys) = self.occupied_sets(chunk, r, &occupied_rows, rng::mix64(seed));
                    shape = self.shape_values(&mut sets, &keys, &table)?;
                }
                shape
            } else {
                let table = |row: usize| emb_values.row(row).to_vec();
                let (mut sets, keys) = self.observed_sets(chunk, points, seed);
                self.shape_values(&mut sets, &keys, &table)?
            };
            let out = self.grasp.forward(&shape)?;
            for (i, cand) in chunk.iter().enumerate() {
                raw_poses.push(decode_row(cand, out.row(i), c.region.r));
            }
        }
        let mut kept = raw_poses.clone();
        if opts.collision_filter && region.is_some() {
            let occupied: HashSet<VoxelKey> = occupied_rows.keys().copied().collect();
            kept = collision_filter(&kept, &occupied, &c.gripper, c.region.v);
        }
        let poses = pose_nms(&kept, NMS_RADIUS, NMS_TOP);
        times.decode = t3.elapsed().as_secs_f64();
        Ok(Inference { poses, raw_poses, candidates: cands, region, probabilities, queried_voxels: queried, times })
    }
}

/// Pose of the best-scoring cell in one row of raw grasp-head output
/// (48 score logits followed by 48 width logits).
pub fn decode_row(cand: &Candidate, raw: &[f64], r: f64) -> GraspPose {
    let scores: Vec<f64> = raw[..N_CELLS].iter().map(|&x| crate::nn::sigmoid(x)).collect();
    let best = argmax(&scores);
    let (rot_idx, depth_idx) = cell_of(best);
    let width = (crate::nn::sigmoid(raw[N_CELLS + best]) * 2.0 * r).max(f64::MIN_POSITIVE);
    GraspPose { point: cand.point, rotation: cand.rotation, rot_idx, depth_idx, width, score: scores[best] }
}
