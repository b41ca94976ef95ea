//! Occupancy and grasp metrics, per-scene evaluation and the strategy
//! benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{input_points, to_world, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::{frame_from_direction, RotationMatrix, Vec3};
use crate::grasp::{GraspPose, GripperSpec};
use crate::model::{InferOptions, Model, QueryMode, DENSE_CELLS, NMS_TOP};
use crate::occupancy::crop_ground_truth;
use crate::rng::{self, streams};
use crate::scene::oracle::evaluate_grasp;
use crate::scene::{Camera, SdfScene};
use crate::triplane::OpCounters;

/// Friction coefficients averaged by the oracle AP.
pub const FRICTIONS: [f64; 6] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2];

/// Voxel-level agreement of a predicted occupied set with ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OccupancyMetrics {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// IOU, F1, precision and recall of `pred` against `gt`.
pub fn eval_occupancy(pred: &[bool], gt: &[bool]) -> Result<OccupancyMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(OccupancyMetrics { iou: ratio(tp, tp + fp + fn_), f1, precision, recall })
}

/// Mean Precision@k for `k = 1..=min(50, n)` of a ranked success list.
pub fn ap_from_successes(successes: &[bool]) -> f64 {
    let n = successes.len().min(NMS_TOP);
    if n == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (k, &s) in successes[..n].iter().enumerate() {
        hits += s as usize;
        sum += hits as f64 / (k + 1) as f64;
    }
    sum / n as f64
}

/// Oracle AP of ranked camera-frame poses, averaged over [`FRICTIONS`].
/// Poses are re-ranked by score (stable) before truncation.
pub fn eval_grasp_ap(poses: &[GraspPose], scene: &SdfScene, camera: &Camera, gripper: &GripperSpec) -> Result<f64> {
    if poses.is_empty() {
        eprintln!("warning: empty pose list scores AP 0");
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| poses[b].score.total_cmp(&poses[a].score));
    order.truncate(NMS_TOP);
    let outcomes = order
        .iter()
        .map(|&i| {
            let p = &poses[i];
            let (point, rotation) = to_world(camera, &p.point, &p.rotation);
            evaluate_grasp(scene, &GraspPose { point, rotation, ..*p }, gripper)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_mu: Vec<f64> = FRICTIONS
        .iter()
        .map(|&mu| ap_from_successes(&outcomes.iter().map(|o| o.success(mu)).collect::<Vec<_>>()))
        .collect();
    Ok(per_mu.iter().sum::<f64>() / FRICTIONS.len() as f64)
}

/// Metrics of one evaluated scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SceneMetrics {
    pub scene: usize,
    pub occupancy: Option<OccupancyMetrics>,
    /// Occupancy over the reference region (see [`reference_candidates`]).
    pub reference: Option<OccupancyMetrics>,
    pub ap: f64,
    pub poses: usize,
    pub queried_voxels: usize,
    pub seconds: f64,
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub points: usize,
    pub candidates: usize,
    pub seed: u64,
    pub mode: QueryMode,
    /// Skip the grasp oracle (occupancy metrics only).
    pub occupancy_only: bool,
    /// Size of the model-independent reference region; 0 skips it.
    pub reference_candidates: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            points: 1024,
            candidates: 1024,
            seed: 0,
            mode: QueryMode::Local,
            occupancy_only: false,
            reference_candidates: 0,
        }
    }
}

/// Runs inference on one sample and scores it.
pub fn evaluate_scene(model: &Model, sample: &SceneSample, index: usize, cfg: &EvalConfig) -> Result<SceneMetrics> {
    evaluate_scene_anchored(model, sample, index, cfg, None)
}

/// [`evaluate_scene`] with the reference region centred on `anchors`
/// instead of on the sample's own reference candidates.
pub fn evaluate_scene_anchored(
    model: &Model,
    sample: &SceneSample,
    index: usize,
    cfg: &EvalConfig,
    anchors: Option<&[Vec3]>,
) -> Result<SceneMetrics> {
    let points = input_points(sample, cfg.points)?;
    let opts = InferOptions {
        candidates: cfg.candidates,
        seed: rng::derive(rng::derive(cfg.seed, streams::INFER), sample.seed),
        collision_filter: true,
        mode: cfg.mode,
    };
    let start = Instant::now();
    let out = model.infer(&points, &opts, &OpCounters::default())?;
    let seconds = start.elapsed().as_secs_f64();
    let occupancy = match &out.region {
        Some(region) => Some(eval_occupancy(&out.occupied(), &crop_ground_truth(region, &sample.gt)?)?),
        None => None,
    };
    let ap = if cfg.occupancy_only {
        0.0
    } else {
        eval_grasp_ap(&out.poses, &sample.scene, &sample.camera, &model.config.gripper)?
    };
    let reference = if cfg.reference_candidates > 0 && model.config.ablation.occupancy {
        let own;
        let anchors = match anchors {
            Some(a) => a,
            None => {
                own = reference_anchors(&points, sample.seed, cfg.reference_candidates)?;
                &own
            }
        };
        let rots: Vec<RotationMatrix> = anchors.iter().map(frame_from_direction).collect();
        let (region, p) = model.predict_occupancy_at(&points, anchors, &rots, &OpCounters::default())?;
        let pred: Vec<bool> = p.iter().map(|&x| x > 0.5).collect();
        Some(eval_occupancy(&pred, &crop_ground_truth(&region, &sample.gt)?)?)
    } else {
        None
    };
    Ok(SceneMetrics {
        scene: index,
        occupancy,
        reference,
        ap,
        poses: out.poses.len(),
        queried_voxels: out.queried_voxels,
        seconds,
    })
}

/// A region that depends only on the input cloud: `n` seeded input points,
/// each approached along its camera viewing ray (camera at the origin).
pub fn reference_candidates(points: &[Vec3], n: usize, seed: u64) -> Result<(Vec<usize>, Vec<RotationMatrix>)> {
    let rows = crate::pointcloud::sample_fixed_indices(points.len(), n, seed)?;
    let rots = rows.iter().map(|&i| frame_from_direction(&points[i])).collect();
    Ok((rows, rots))
}

/// Grasp points of the reference region of a sample with input `points`.
pub fn reference_anchors(points: &[Vec3], sample_seed: u64, n: usize) -> Result<Vec<Vec3>> {
    let (rows, _) = reference_candidates(points, n, rng::derive(sample_seed, streams::INFER))?;
    Ok(rows.iter().map(|&i| points[i]).collect())
}

/// Evaluates every sample with its reference region centred on the
/// matching entry of `anchors`.
pub fn evaluate_anchored(
    model: &Model,
    samples: &[SceneSample],
    anchors: &[Vec<Vec3>],
    cfg: &EvalConfig,
) -> Result<Vec<SceneMetrics>> {
    if anchors.len() != samples.len() {
        return Err(Error::LengthMismatch(samples.len(), anchors.len()));
    }
    samples
        .par_iter()
        .zip(anchors)
        .enumerate()
        .map(|(i, (s, a))| evaluate_scene_anchored(model, s, i, cfg, Some(a)))
        .collect()
}

/// Evaluates every sample (in parallel, results in input order).
pub fn evaluate(model: &Model, samples: &[SceneSample], cfg: &EvalConfig) -> Result<Vec<SceneMetrics>> {
    samples.par_iter().enumerate().map(|(i, s)| evaluate_scene(model, s, i, cfg)).collect()
}

/// Mean over scenes; occupancy metrics average only scenes that have them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub occupancy: Option<OccupancyMetrics>,
    pub reference: Option<OccupancyMetrics>,
    pub ap: f64,
    pub seconds: f64,
    pub queried_voxels: f64,
}

fn mean_metrics(items: impl Iterator<Item = OccupancyMetrics>) -> Option<OccupancyMetrics> {
    let v: Vec<OccupancyMetrics> = items.collect();
    if v.is_empty() {
        return None;
    }
    let m = v.len() as f64;
    Some(OccupancyMetrics {
        iou: v.iter().map(|o| o.iou).sum::<f64>() / m,
        f1: v.iter().map(|o| o.f1).sum::<f64>() / m,
        precision: v.iter().map(|o| o.precision).sum::<f64>() / m,
        recall: v.iter().map(|o| o.recall).sum::<f64>() / m,
    })
}

pub fn aggregate(rows: &[SceneMetrics]) -> Aggregate {
    if rows.is_empty() {
        return Aggregate::default();
    }
    let n = rows.len() as f64;
    let occupancy = mean_metrics(rows.iter().filter_map(|r| r.occupancy));
    let reference = mean_metrics(rows.iter().filter_map(|r| r.reference));
    Aggregate {
        occupancy,
        reference,
        ap: rows.iter().map(|r| r.ap).sum::<f64>() / n,
        seconds: rows.iter().map(|r| r.seconds).sum::<f64>() / n,
        queried_voxels: rows.iter().map(|r| r.queried_voxels as f64).sum::<f64>() / n,
    }
}

pub const METRICS_HEADER: &str = "scene,iou,f1,precision,recall,oracle_ap,poses,queried_voxels";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// CSV with `#` metadata lines, one row per scene and a final `mean` row.
/// Timing is left out so repeated evaluations produce identical files.
pub fn metrics_csv(rows: &[SceneMetrics], meta: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        let _ = writeln!(out, "# {k}: {v}");
    }
    let _ = writeln!(out, "{METRICS_HEADER}");
    for r in rows {
        let o = r.occupancy;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scene,
            opt(o.map(|o| o.iou)),
            opt(o.map(|o| o.f1)),
            opt(o.map(|o| o.precision)),
            opt(o.map(|o| o.recall)),
            r.ap,
            r.poses,
            r.queried_voxels
        );
    }
    let a = aggregate(rows);
    let o = a.occupancy;
    let _ = writeln!(
        out,
        "mean,{},{},{},{},{},,{}",
        opt(o.map(|o| o.iou)),
        opt(o.map(|o| o.f1)),
        opt(o.map(|o| o.precision)),
        opt(o.map(|o| o.recall)),
        a.ap,
        a.queried_voxels
    );
    out
}

/// One row of the strategy comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub name: String,
    pub ap: f64,
    pub iou: Option<f64>,
    pub seconds: f64,
    pub queried_voxels: f64,
}

/// A named model and how it queries occupancy.
pub struct Strategy<'a> {
    pub name: &'a str,
    pub model: &'a Model,
    pub mode: QueryMode,
}

/// Compares strategies on the same samples; times are medians per scene.
pub fn bench_strategies(
    strategies: &[Strategy],
    samples: &[SceneSample],
    cfg: &EvalConfig,
) -> Result<Vec<StrategyRow>> {
    strategies
        .iter()
        .map(|s| {
            let c = EvalConfig { mode: s.mode, ..*cfg };
            let rows = samples
                .iter()
                .enumerate()
                .map(|(i, x)| evaluate_scene(s.model, x, i, &c))
                .collect::<Result<Vec<_>>>()?;
            let a = aggregate(&rows);
            let mut t: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
            t.sort_by(f64::total_cmp);
            Ok(StrategyRow {
                name: s.name.to_string(),
                ap: a.ap,
                iou: a.occupancy.map(|o| o.iou),
                seconds: t[t.len() / 2],
                queried_voxels: a.queried_voxels,
            })
        })
        .collect()
}

/// The four rows of the strategy table from trained models: ours, the
/// dense global query of the same model, the ball-query variant and the
/// variant without occupancy.
pub fn standard_strategies<'a>(ours: &'a Model, ball: &'a Model, no_occupancy: &'a Model) -> Vec<Strategy<'a>> {
    vec![
        Strategy { name: "w/o occupancy", model: no_occupancy, mode: QueryMode::Local },
        Strategy { name: "global tri-plane", model: ours, mode: QueryMode::Dense(DENSE_CELLS) },
        Strategy { name: "ball query", model: ball, mode: QueryMode::Local },
        Strategy { name: "ours", model: ours, mode: QueryMode::Local },
    ]
}

pub fn strategies_csv(rows: &[StrategyRow]) -> String {
    let mut out = String::from("strategy,oracle_ap,iou,median_seconds,queried_voxels\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.name, r.ap, opt(r.iou), r.seconds, r.queried_voxels);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{PrimitiveKind, SdfPrimitive};
    use proptest::prelude::*;

    #[test]
    fn occupancy_examples() {
        let a = [true, false, true];
        let m = eval_occupancy(&a, &a).unwrap();
        assert_eq!((m.iou, m.f1), (1.0, 1.0));
        let m = eval_occupancy(&[true, false], &[false, true]).unwrap();
        assert_eq!((m.iou, m.f1), (0.0, 0.0));
        assert!(eval_occupancy(&[true], &[]).is_err());
    }

    proptest! {
        #[test]
        fn iou_never_exceeds_f1(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
            let p: Vec<bool> = pairs.iter().map(|x| x.0).collect();
            let g: Vec<bool> = pairs.iter().map(|x| x.1).collect();
            let m = eval_occupancy(&p, &g).unwrap();
            prop_assert!(m.iou <= m.f1 + 1e-12);
            prop_assert!(m.f1 <= 1.0);
            if m.precision + m.recall > 0.0 {
                let f = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((f - m.f1).abs() < 1e-12);
            }
        }

        #[test]
        fn ranks_past_fifty_do_not_matter(mut s in proptest::collection::vec(any::<bool>(), 50..80)) {
            let before = ap_from_successes(&s);
            s.push(true);
            prop_assert_eq!(before, ap_from_successes(&s));
        }
    }

    #[test]
    fn precision_at_k_example() {
        let ap = ap_from_successes(&[true, false, true]);
        assert!((ap - 13.0 / 18.0).abs() < 1e-15);
        assert_eq!(ap_from_successes(&[]), 0.0);
        assert_eq!(ap_from_successes(&[true; 10]), 1.0);
        assert_eq!(ap_from_successes(&[false; 10]), 0.0);
    }

    #[test]
    fn oracle_ap_extremes() {
        let ball = SdfPrimitive::at(PrimitiveKind::Sphere { radius: 0.03 }, Vec3::new(0.0, 0.0, 0.03)).unwrap();
        let scene = SdfScene::desk(vec![ball], 0);
        let cam =
            Camera::new(RotationMatrix::identity(), Vec3::zeros(), (100.0, 100.0, 50.0, 50.0), (100, 100)).unwrap();
        // Approach along -y through the sphere centre: a diametral pinch.
        let down = crate::geometry::frame_from_direction(&Vec3::new(0.0, 1.0, 0.0));
        let good = GraspPose {
            point: Vec3::new(0.0, -0.03, 0.03),
            rotation: down,
            rot_idx: 0,
            depth_idx: 2,
            width: 0.08,
            score: 0.9,
        };
        let g = GripperSpec::default();
        let ok = evaluate_grasp(&scene, &good, &g).unwrap();
        assert!(ok.success(0.2), "{ok:?}");
        assert_eq!(eval_grasp_ap(&[good; 3], &scene, &cam, &g).unwrap(), 1.0);
        let miss = GraspPose { point: Vec3::new(0.2, 0.2, 0.3), ..good };
        assert_eq!(eval_grasp_ap(&[miss; 3], &scene, &cam, &g).unwrap(), 0.0);
        assert_eq!(eval_grasp_ap(&[], &scene, &cam, &g).unwrap(), 0.0);
    }

    #[test]
    fn csv_mean_row_matches_scene_rows() {
        let m = |i, iou| SceneMetrics {
            scene: i,
            occupancy: Some(OccupancyMetrics { iou, f1: iou, precision: 0.5, recall: 0.5 }),
            reference: None,
            ap: 0.1 * i as f64,
            poses: 3,
            queried_voxels: 10,
            seconds: 0.0,
        };
        let rows = [m(0, 0.3), m(1, 0.6), m(2, 0.7)];
        let csv = metrics_csv(&rows, &[("ablate", "no_refine".into())]);
        assert!(csv.starts_with("# ablate: no_refine\n"));
        let mean_line = csv.lines().last().unwrap();
        let iou: f64 = mean_line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((iou - (0.3 + 0.6 + 0.7) / 3.0).abs() < 1e-12);
    }
}
