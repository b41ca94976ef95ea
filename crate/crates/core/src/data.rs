//! Synthetic training/evaluation samples and their oracle labels.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{frame_from_direction, RotationMatrix, Vec3};
use crate::grasp::{coarse_directions, fibonacci_directions, GripperSpec, N_CELLS};
use crate::io::{read_occ1, read_pcb1, read_scene_text, write_occ1, write_pcb1, write_scene_text};
use crate::pointcloud::{add_gaussian_noise_indexed, sample_fixed_indices, PointCloud};
use crate::rng::{self, streams};
use crate::scene::oracle::{any_cell_succeeds, label_cells, LABEL_MU};
use crate::scene::{
    camera_ring, depth_to_pointcloud, generate_scene, ground_truth_occupancy_in_frame, merge_views, render_depth,
    select_views, Camera, OccupancyGrid, SceneGenConfig, SdfScene, ViewConfig,
};

/// Extra margin around the cloud covered by the ground-truth grid, beyond
/// the reach of a grasp region.
pub const GT_MARGIN: f64 = 0.1;

/// How observations are produced for a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationConfig {
    pub views: usize,
    pub noise_sigma: f64,
    pub noise_fraction: f64,
    pub camera: ViewConfig,
    pub generator: SceneGenConfig,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            views: 1,
            noise_sigma: 0.0,
            noise_fraction: 0.0,
            camera: ViewConfig::default(),
            generator: SceneGenConfig::default(),
        }
    }
}

/// Pose of the reference camera as stored next to a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
    pub intrinsics: [f64; 4],
    pub resolution: [usize; 2],
}

impl CameraRecord {
    pub fn from_camera(c: &Camera) -> Self {
        let m = &c.rotation.0;
        Self {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            position: [c.position.x, c.position.y, c.position.z],
            intrinsics: [c.fx, c.fy, c.cx, c.cy],
            resolution: [c.width, c.height],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let r = &self.rotation;
        let m = nalgebra::Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]);
        Camera::new(
            RotationMatrix::try_from_matrix(m, 1e-9)?,
            Vec3::from(self.position),
            (self.intrinsics[0], self.intrinsics[1], self.intrinsics[2], self.intrinsics[3]),
            (self.resolution[0], self.resolution[1]),
        )
    }
}

/// One synthetic scene with its observation in the reference camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub scene: SdfScene,
    /// Reference camera; the cloud and ground truth live in its frame.
    pub camera: Camera,
    /// Observed points (camera frame), coordinates rounded to f32.
    pub cloud: PointCloud,
    /// Points per rendered view, in merge order.
    pub view_counts: Vec<usize>,
    /// Indices of points perturbed by noise.
    pub noisy: Vec<usize>,
    pub gt: OccupancyGrid,
}

fn round_f32(p: &Vec3) -> Vec3 {
    p.map(|v| v as f32 as f64)
}

/// Ground-truth grid (reference camera frame) covering every region a
/// cloud point can spawn.
pub fn ground_truth_for(
    scene: &SdfScene,
    camera: &Camera,
    cloud: &PointCloud,
    reach: f64,
    voxel: f64,
) -> Result<OccupancyGrid> {
    let (lo, hi) = cloud.bounds().ok_or(Error::EmptyCloud)?;
    let pad = Vec3::repeat(reach + GT_MARGIN);
    ground_truth_occupancy_in_frame(scene, &camera.rotation, &camera.position, (lo - pad, hi + pad), voxel)
}

/// Builds scene `seed`, renders the selected views, merges them into the
/// first view's frame, applies optional noise and computes ground truth.
pub fn generate_sample(seed: u64, obs: &ObservationConfig, reach: f64, voxel: f64) -> Result<SceneSample> {
    let scene = generate_scene(seed, &obs.generator)?;
    let ring = camera_ring(seed, &obs.camera)?;
    let chosen = select_views(&ring, obs.views.max(1))?;
    let cams: Vec<Camera> = chosen.iter().map(|&i| ring[i]).collect();
    let reference = cams[0];
    let clouds: Vec<PointCloud> = cams.iter().map(|c| depth_to_pointcloud(&render_depth(&scene, c), c)).collect();
    let view_counts = clouds.iter().map(|c| c.len()).collect();
    let world = merge_views(&clouds, &cams)?;
    let cloud = PointCloud::new(world.points.iter().map(|p| round_f32(&reference.to_camera(p))).collect());
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let (cloud, noisy) = if obs.noise_sigma > 0.0 && obs.noise_fraction > 0.0 {
        let (c, idx) =
            add_gaussian_noise_indexed(&cloud, obs.noise_sigma, obs.noise_fraction, rng::derive(seed, streams::NOISE))?;
        (PointCloud::new(c.points.iter().map(round_f32).collect()), idx)
    } else {
        (cloud, Vec::new())
    };
    let gt = ground_truth_for(&scene, &reference, &cloud, reach, voxel)?;
    Ok(SceneSample { seed, scene, camera: reference, cloud, view_counts, noisy, gt })
}

/// Seed of scene `index` in a dataset drawn from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    rng::derive(rng::derive(seed, streams::SCENE), index as u64)
}

/// Generates `count` samples in parallel; scenes that cannot be placed are
/// an error.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    obs: &ObservationConfig,
    reach: f64,
    voxel: f64,
) -> Result<Vec<SceneSample>> {
    (0..count).into_par_iter().map(|i| generate_sample(scene_seed(seed, i), obs, reach, voxel)).collect()
}

/// Sidecar of a stored sample: everything but the scene, cloud and grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub camera: CameraRecord,
    pub view_counts: Vec<usize>,
    pub noisy: Vec<usize>,
}

/// File stem of sample `index` in a dataset directory.
pub fn sample_stem(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Writes `<stem>.txt` (scene), `<stem>.json` (sidecar), `<stem>.pcb` (PCB1
/// cloud) and `<stem>.occ` (OCC1 ground truth).
pub fn save_sample(dir: &Path, index: usize, s: &SceneSample) -> Result<()> {
    let stem = dir.join(sample_stem(index));
    let meta = SampleMeta {
        seed: s.seed,
        camera: CameraRecord::from_camera(&s.camera),
        view_counts: s.view_counts.clone(),
        noisy: s.noisy.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::format("sidecar", e.to_string()))?;
    fs::write(stem.with_extension("txt"), write_scene_text(&s.scene))?;
    fs::write(stem.with_extension("json"), json + "\n")?;
    fs::write(stem.with_extension("pcb"), write_pcb1(&s.cloud))?;
    fs::write(stem.with_extension("occ"), write_occ1(&s.gt))?;
    Ok(())
}

/// Reads the sample stored under `stem` (path without extension).
pub fn load_sample(stem: &Path) -> Result<SceneSample> {
    let meta: SampleMeta = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)
        .map_err(|e| Error::format("sidecar", e.to_string()))?;
    let scene = read_scene_text(&fs::read_to_string(stem.with_extension("txt"))?, meta.seed)?;
    let cloud = read_pcb1(&fs::read(stem.with_extension("pcb"))?)?;
    let gt = read_occ1(&fs::read(stem.with_extension("occ"))?)?;
    if meta.view_counts.iter().sum::<usize>() != cloud.len() || meta.noisy.iter().any(|&i| i >= cloud.len()) {
        return Err(Error::format("sidecar", "does not match the cloud"));
    }
    Ok(SceneSample {
        seed: meta.seed,
        scene,
        camera: meta.camera.to_camera()?,
        cloud,
        view_counts: meta.view_counts,
        noisy: meta.noisy,
        gt,
    })
}

/// Every sample in `dir`, ordered by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::InvalidArgument(format!("no samples in {}", dir.display())));
    }
    stems.par_iter().map(|s| load_sample(s)).collect()
}

/// How many points of a scene receive which labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    pub points: usize,
    pub pool: usize,
    pub affordance_points: usize,
    pub directions: usize,
    pub gripper: GripperSpec,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { points: 1024, pool: 16, affordance_points: 96, directions: 60, gripper: GripperSpec::default() }
    }
}

/// Oracle labels for one scene, indexed into the scene's fixed point sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabels {
    /// Indices into the full cloud forming the fixed-size network input.
    pub sample: Vec<usize>,
    /// Rows of the input sample with affordance labels.
    pub affordance_rows: Vec<usize>,
    pub affordance: Vec<f64>,
    /// Rows of the input sample with grasp labels.
    pub pool_rows: Vec<usize>,
    /// `[pool][direction]` mean cell success.
    pub view: Vec<Vec<f64>>,
    /// `[pool][direction * 48 + cell]` success at the label friction.
    pub scores: Vec<Vec<f64>>,
    /// `[pool][direction * 48 + cell]` label widths.
    pub widths: Vec<Vec<f64>>,
}

impl SceneLabels {
    pub fn input_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(self.sample.iter().map(|&i| cloud.points[i]).collect())
    }
}

/// World-frame pose of a camera-frame grasp point and approach rotation.
pub fn to_world(camera: &Camera, point: &Vec3, rotation: &RotationMatrix) -> (Vec3, RotationMatrix) {
    (camera.to_world(point), camera.rotation.compose(rotation))
}

/// Indices of the fixed-size network input drawn from a sample's cloud.
pub fn input_indices(sample: &SceneSample, n: usize) -> Result<Vec<usize>> {
    sample_fixed_indices(sample.cloud.len(), n, rng::derive(sample.seed, streams::LABELS))
}

/// The fixed-size network input of a sample.
pub fn input_points(sample: &SceneSample, n: usize) -> Result<Vec<Vec3>> {
    Ok(input_indices(sample, n)?.iter().map(|&i| sample.cloud.points[i]).collect())
}

/// Computes oracle labels. The network input is a fixed uniform sample of
/// `points` cloud points; grasp labels cover `pool` input points lying above
/// the table, affordance labels a uniform subset of input points.
pub fn compute_labels(sample: &SceneSample, cfg: &LabelConfig) -> Result<SceneLabels> {
    let seed = rng::derive(sample.seed, streams::LABELS);
    let idx = input_indices(sample, cfg.points)?;
    let input: Vec<Vec3> = idx.iter().map(|&i| sample.cloud.points[i]).collect();
    let world: Vec<Vec3> = input.iter().map(|p| sample.camera.to_world(p)).collect();
    let mut r = rng::seeded(rng::mix64(seed));

    let above: Vec<usize> = (0..input.len()).filter(|&i| world[i].z > 0.003).collect();
    let source = if above.is_empty() { (0..input.len()).collect() } else { above };
    let pool_rows: Vec<usize> = (0..cfg.pool).map(|_| source[r.random_range(0..source.len())]).collect();
    let affordance_rows: Vec<usize> =
        (0..cfg.affordance_points.min(input.len())).map(|_| r.random_range(0..input.len())).collect();

    let dirs = fibonacci_directions(cfg.directions);
    let rots: Vec<RotationMatrix> = dirs.iter().map(frame_from_direction).collect();
    type PoolLabels = (Vec<f64>, Vec<f64>, Vec<f64>);
    let per_pool: Vec<Result<PoolLabels>> = pool_rows
        .par_iter()
        .map(|&row| {
            let mut view = Vec::with_capacity(dirs.len());
            let mut scores = Vec::with_capacity(dirs.len() * N_CELLS);
            let mut widths = Vec::with_capacity(dirs.len() * N_CELLS);
            for rot in &rots {
                let (p, rw) = to_world(&sample.camera, &input[row], rot);
                let cells = label_cells(&sample.scene, &p, &rw, &cfg.gripper)?;
                let mut ok = 0.0;
                for c in &cells {
                    let s = c.outcome.success(LABEL_MU) as u8 as f64;
                    ok += s;
                    scores.push(s);
                    widths.push(c.width);
                }
                view.push(ok / N_CELLS as f64);
            }
            Ok((view, scores, widths))
        })
        .collect();
    let mut view = Vec::new();
    let mut scores = Vec::new();
    let mut widths = Vec::new();
    for item in per_pool {
        let (v, s, w) = item?;
        view.push(v);
        scores.push(s);
        widths.push(w);
    }

    let coarse: Vec<RotationMatrix> = coarse_directions().iter().map(frame_from_direction).collect();
    let affordance: Vec<Result<f64>> = affordance_rows
        .par_iter()
        .map(|&row| {
            let p = sample.camera.to_world(&input[row]);
            let rw: Vec<RotationMatrix> = coarse.iter().map(|c| sample.camera.rotation.compose(c)).collect();
            Ok(any_cell_succeeds(&sample.scene, &p, &rw, LABEL_MU, &cfg.gripper)? as u8 as f64)
        })
        .collect();
    let affordance = affordance.into_iter().collect::<Result<Vec<f64>>>()?;

    Ok(SceneLabels { sample: idx, affordance_rows, affordance, pool_rows, view, scores, widths })
}
