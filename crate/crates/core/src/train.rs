//! Multi-task loss and the optimization loop.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;
use serde::Serialize;

use crate::data::{compute_labels, input_points, LabelConfig, SceneLabels, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::grasp::N_CELLS;
use crate::model::{argmax, Model, ShapeSet};
use crate::nn::{adam_step, bce_mean, check_gradients, smooth_l1_mean, AdamState, GradCheck, NodeId, Tape, Tensor};
use crate::occupancy::{build_region, crop_ground_truth, sample_training_voxels, DEFAULT_TRAINING_VOXELS};
use crate::rng::{self, streams};
use crate::scene::OccupancyGrid;
use crate::triplane::OpCounters;

/// Loss weights `λ1` (affordance), `λ2` (view) and `λ3` (width + score).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 10.0, l2: 100.0, l3: 10.0 }
    }
}

/// The five loss terms and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub occupancy: f64,
    pub affordance: f64,
    pub view: f64,
    pub width: f64,
    pub score: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.occupancy, self.affordance, self.view, self.width, self.score, self.total].iter().all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, o: &LossReport, k: f64) {
        self.occupancy += k * o.occupancy;
        self.affordance += k * o.affordance;
        self.view += k * o.view;
        self.width += k * o.width;
        self.score += k * o.score;
        self.total += k * o.total;
    }
}

/// `L_o + λ1 L_a + λ2 L_v + λ3 (L_w + L_s)`.
pub fn total_loss(occupancy: f64, affordance: f64, view: f64, width: f64, score: f64, w: &LossWeights) -> LossReport {
    LossReport {
        occupancy,
        affordance,
        view,
        width,
        score,
        total: occupancy + w.l1 * affordance + w.l2 * view + w.l3 * (width + score),
    }
}

/// Mean clamped binary cross-entropy of occupancy probabilities.
pub fn occupancy_loss(probabilities: &[f64], gt: &[bool]) -> Result<f64> {
    if probabilities.len() != gt.len() {
        return Err(Error::LengthMismatch(probabilities.len(), gt.len()));
    }
    let labels: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
    Ok(bce_mean(probabilities, &labels))
}

/// Predictions of the grasp heads for one batch of candidates.
#[derive(Debug, Clone, Copy)]
pub struct GraspHeads<'a> {
    pub affordance: &'a [f64],
    pub view_pre: &'a [f64],
    pub view_post: Option<&'a [f64]>,
    pub widths: &'a [f64],
    pub scores: &'a [f64],
}

/// Targets aligned with [`GraspHeads`].
#[derive(Debug, Clone, Copy)]
pub struct GraspTargets<'a> {
    pub affordance: &'a [f64],
    pub view_pre: &'a [f64],
    pub view_post: Option<&'a [f64]>,
    pub widths: &'a [f64],
    pub scores: &'a [f64],
}

/// `(L_a, L_v, L_w, L_s)`. Widths only count where the score label is
/// positive; the view loss averages the pre- and post-refinement heads.
pub fn grasp_losses(pred: &GraspHeads, target: &GraspTargets) -> Result<(f64, f64, f64, f64)> {
    let check = |a: usize, b: usize| if a == b { Ok(()) } else { Err(Error::LengthMismatch(a, b)) };
    check(pred.affordance.len(), target.affordance.len())?;
    check(pred.view_pre.len(), target.view_pre.len())?;
    check(pred.widths.len(), target.widths.len())?;
    check(pred.scores.len(), target.scores.len())?;
    check(pred.widths.len(), target.scores.len())?;
    let la = bce_mean(pred.affordance, target.affordance);
    let mut lv = smooth_l1_mean(pred.view_pre, target.view_pre, None).0;
    match (pred.view_post, target.view_post) {
        (Some(p), Some(t)) => {
            check(p.len(), t.len())?;
            lv = 0.5 * (lv + smooth_l1_mean(p, t, None).0);
        }
        (None, None) => {}
        _ => return Err(Error::InvalidArgument("refined view head without targets".into())),
    }
    let mask: Vec<bool> = target.scores.iter().map(|&s| s > 0.0).collect();
    let lw = smooth_l1_mean(pred.widths, target.widths, Some(&mask)).0;
    let ls = smooth_l1_mean(pred.scores, target.scores, None).0;
    Ok((la, lv, lw, ls))
}

/// Training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Candidates per scene in the grasp losses.
    pub candidates: usize,
    /// Cap on region voxels supervised per scene.
    pub occ_samples: usize,
    pub weights: LossWeights,
    pub labels: LabelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            lr: 1e-3,
            batch: 2,
            candidates: 8,
            occ_samples: DEFAULT_TRAINING_VOXELS,
            weights: LossWeights::default(),
            labels: LabelConfig::default(),
        }
    }
}

/// A scene ready for training: network input, ground truth and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainScene {
    pub seed: u64,
    pub points: Vec<Vec3>,
    pub gt: OccupancyGrid,
    pub labels: SceneLabels,
}

impl TrainScene {
    pub fn new(sample: &SceneSample, labels: SceneLabels) -> Result<Self> {
        if labels.sample.iter().any(|&i| i >= sample.cloud.len()) {
            return Err(Error::InvalidArgument("labels do not match the cloud".into()));
        }
        Ok(Self { seed: sample.seed, points: labels.input_cloud(&sample.cloud).points, gt: sample.gt.clone(), labels })
    }

    /// Computes labels with `cfg` and wraps the sample.
    pub fn label(sample: &SceneSample, cfg: &LabelConfig) -> Result<Self> {
        let labels = compute_labels(sample, cfg)?;
        debug_assert_eq!(labels.input_cloud(&sample.cloud).points, input_points(sample, cfg.points)?);
        Self::new(sample, labels)
    }
}

/// Loss nodes of one scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneLoss {
    pub total: NodeId,
    pub report: LossReport,
}

fn scalar(tape: &mut Tape, v: f64) -> NodeId {
    tape.input(Tensor::scalar(v))
}

/// Records the full multi-task loss of one scene.
pub fn scene_loss_on(
    model: &Model,
    tape: &mut Tape,
    scene: &TrainScene,
    cfg: &TrainConfig,
    seed: u64,
    counters: &OpCounters,
) -> Result<SceneLoss> {
    let mc = &model.config;
    let labels = &scene.labels;
    if labels.pool_rows.is_empty() || labels.affordance_rows.is_empty() {
        return Err(Error::InvalidArgument("scene has no labelled points".into()));
    }
    if labels.view[0].len() != mc.directions {
        return Err(Error::ShapeMismatch {
            expected: format!("{} view labels", mc.directions),
            actual: format!("{}", labels.view[0].len()),
        });
    }
    let mut r = rng::seeded(seed);
    let enc = model.encode_on(tape, &scene.points, counters)?;

    let ae = tape.gather_rows(enc.embeddings, &labels.affordance_rows)?;
    let ap = model.affordance_on(tape, ae)?;
    let la = tape.bce(ap, &labels.affordance)?;

    let picks: Vec<usize> = (0..cfg.candidates).map(|_| r.random_range(0..labels.pool_rows.len())).collect();
    let rows: Vec<usize> = picks.iter().map(|&k| labels.pool_rows[k]).collect();
    let cand_points: Vec<Vec3> = rows.iter().map(|&i| scene.points[i]).collect();
    let ce = tape.gather_rows(enc.embeddings, &rows)?;
    let vpre = model.view_on(tape, ce)?;
    let view_target: Vec<f64> = picks.iter().flat_map(|&k| labels.view[k].iter().copied()).collect();
    let lv_pre = tape.smooth_l1(vpre, &view_target, None)?;
    let dirs: Vec<usize> = (0..picks.len()).map(|i| argmax(tape.value(vpre).row(i))).collect();
    let mut cands = model.candidates_for(&cand_points, &dirs);

    let mut lv_post = None;
    let (lo, shape) = if mc.ablation.occupancy {
        let region = build_region(&cands, &mc.region, usize::MAX)?;
        let gt = crop_ground_truth(&region, &scene.gt)?;
        let sel = sample_training_voxels(region.len(), cfg.occ_samples, r.random());
        let qs: Vec<Vec3> = sel.iter().map(|&i| region.centers[i]).collect();
        let near: Vec<usize> = sel.iter().map(|&i| region.owner[i]).collect();
        let f = model.query_on(tape, &enc, &qs, &cand_points, &near, ce, counters)?;
        let logits = model.occupancy_logits_on(tape, f)?;
        let probs = tape.sigmoid(logits);
        let gt_sel: Vec<f64> = sel.iter().map(|&i| gt[i] as u8 as f64).collect();
        let lo = tape.bce(probs, &gt_sel)?;

        let occupied: Vec<bool> = if sel.len() == region.len() {
            tape.value(probs).data.iter().map(|&p| p > 0.5).collect()
        } else {
            let ce_v = tape.value(ce).clone();
            let (p, _) =
                model.query_values(tape, &enc, &region.centers, &cand_points, &region.owner, &ce_v, counters, false)?;
            p.iter().map(|&p| p > 0.5).collect()
        };
        let occupied_rows: HashMap<_, _> =
            (0..region.len()).filter(|&i| occupied[i]).map(|i| (region.voxels[i], i)).collect();

        let shape_of = |tape: &mut Tape, cands: &[crate::occupancy::Candidate], s: u64| -> Result<NodeId> {
            let (mut sets, keys) = model.occupied_sets(cands, &region, &occupied_rows, s);
            let key_features = keyed_queries(model, tape, &enc, &region, &cand_points, ce, &mut sets, &keys, counters)?;
            model.shape_feature_on(tape, &sets, key_features)
        };
        let mut shape = shape_of(tape, &cands, r.random())?;
        if mc.ablation.refine {
            let vpost = model.refine_on(tape, shape)?;
            lv_post = Some(tape.smooth_l1(vpost, &view_target, None)?);
            let dirs: Vec<usize> = (0..picks.len()).map(|i| argmax(tape.value(vpost).row(i))).collect();
            cands = model.candidates_for(&cand_points, &dirs);
            shape = shape_of(tape, &cands, r.random())?;
        }
        (lo, shape)
    } else {
        let (mut sets, keys) = model.observed_sets(&cands, &scene.points, r.random());
        let mut all = Vec::new();
        for (s, k) in sets.iter_mut().zip(&keys) {
            s.key_rows = (all.len()..all.len() + k.len()).collect();
            all.extend_from_slice(k);
        }
        let kf = if all.is_empty() { None } else { Some(tape.gather_rows(enc.embeddings, &all)?) };
        let shape = model.shape_feature_on(tape, &sets, kf)?;
        (scalar(tape, 0.0), shape)
    };

    let final_dirs: Vec<usize> = cands.iter().map(|c| direction_index(model, c)).collect();
    let mut s_target = Vec::with_capacity(picks.len() * N_CELLS);
    let mut w_target = Vec::with_capacity(picks.len() * N_CELLS);
    for (&k, &d) in picks.iter().zip(&final_dirs) {
        s_target.extend_from_slice(&labels.scores[k][d * N_CELLS..(d + 1) * N_CELLS]);
        w_target.extend_from_slice(&labels.widths[k][d * N_CELLS..(d + 1) * N_CELLS]);
    }
    let mask: Vec<bool> = s_target.iter().map(|&s| s > 0.0).collect();
    let (scores, widths) = model.grasp_on(tape, shape)?;
    let ls = tape.smooth_l1(scores, &s_target, None)?;
    let lw = tape.smooth_l1(widths, &w_target, Some(&mask))?;
    let lv = match lv_post {
        Some(post) => tape.weighted_sum(&[(lv_pre, 0.5), (post, 0.5)])?,
        None => lv_pre,
    };
    let w = &cfg.weights;
    let total = tape.weighted_sum(&[(lo, 1.0), (la, w.l1), (lv, w.l2), (lw, w.l3), (ls, w.l3)])?;
    let v = |t: &Tape, id: NodeId| t.value(id).item();
    let report = total_loss(v(tape, lo), v(tape, la), v(tape, lv), v(tape, lw), v(tape, ls), w);
    Ok(SceneLoss { total, report })
}

fn direction_index(model: &Model, c: &crate::occupancy::Candidate) -> usize {
    (0..model.directions().len()).find(|&d| model.direction_frame(d) == c.rotation).unwrap_or(0)
}

/// Queries the key voxels of every set on the tape and rewrites each set's
/// key rows to index the returned node.
#[allow(clippy::too_many_arguments)]
fn keyed_queries(
    model: &Model,
    tape: &mut Tape,
    enc: &crate::model::Encoded,
    region: &crate::occupancy::LocalOccupancyRegion,
    cand_points: &[Vec3],
    cand_emb: NodeId,
    sets: &mut [ShapeSet],
    keys: &[Vec<usize>],
    counters: &OpCounters,
) -> Result<Option<NodeId>> {
    let mut all = Vec::new();
    for (s, k) in sets.iter_mut().zip(keys) {
        s.key_rows = (all.len()..all.len() + k.len()).collect();
        all.extend_from_slice(k);
    }
    if all.is_empty() {
        return Ok(None);
    }
    let qs: Vec<Vec3> = all.iter().map(|&i| region.centers[i]).collect();
    let near: Vec<usize> = all.iter().map(|&i| region.owner[i]).collect();
    Ok(Some(model.query_on(tape, enc, &qs, cand_points, &near, cand_emb, counters)?))
}

/// Checks the gradient of one scene's total loss with respect to the model
/// parameters at `indices` against central differences.
pub fn loss_gradient_check(
    model: &Model,
    scene: &TrainScene,
    cfg: &TrainConfig,
    seed: u64,
    indices: &[usize],
    h: f64,
) -> Result<GradCheck> {
    let counters = OpCounters::default();
    check_gradients(&model.params(), indices, h, |tape, p| {
        let mut m = model.clone();
        m.set_params(p)?;
        Ok(scene_loss_on(&m, tape, scene, cfg, seed, &counters)?.total)
    })
}

/// Scenes used at `step` (distinct, uniformly drawn).
pub fn batch_indices(seed: u64, step: u64, scenes: usize, batch: usize) -> Vec<usize> {
    let mut r = rng::seeded(step_seed(seed, step));
    index::sample(&mut r, scenes, batch.min(scenes)).into_vec()
}

fn step_seed(seed: u64, step: u64) -> u64 {
    rng::derive(rng::derive(seed, streams::STEP), step)
}

/// Batch loss and gradient at the current parameters.
pub fn batch_gradient(
    model: &Model,
    scenes: &[TrainScene],
    cfg: &TrainConfig,
    step: u64,
    counters: &OpCounters,
) -> Result<(LossReport, Vec<f64>)> {
    let idx = batch_indices(cfg.seed, step, scenes.len(), cfg.batch);
    let mut tape = Tape::new();
    let mut totals = Vec::with_capacity(idx.len());
    let mut report = LossReport::default();
    let k = 1.0 / idx.len() as f64;
    for (j, &i) in idx.iter().enumerate() {
        let seed = rng::derive(step_seed(cfg.seed, step), 1 + j as u64);
        let l = scene_loss_on(model, &mut tape, &scenes[i], cfg, seed, counters)?;
        report.add_scaled(&l.report, k);
        totals.push((l.total, k));
    }
    let loss = tape.weighted_sum(&totals)?;
    let grads = tape.backward(loss, model.param_count())?;
    Ok((report, grads.params))
}

/// Optimizer state carried across steps and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        Self { adam: AdamState::new(model.param_count()) }
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.adam.t
    }
}

/// Runs optimizer steps until `cfg.steps` have been taken in total. On a
/// non-finite loss or gradient the model keeps the last good parameters
/// and [`Error::Diverged`] is returned. `on_step` sees each step's report.
pub fn train(
    model: &mut Model,
    state: &mut TrainState,
    scenes: &[TrainScene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<Vec<LossReport>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let counters = OpCounters::default();
    let mut reports = Vec::new();
    while (state.step() as usize) < cfg.steps {
        let step = state.step();
        let (report, grads) = batch_gradient(model, scenes, cfg, step, &counters)?;
        if !report.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(step));
        }
        let mut params = model.params();
        adam_step(&mut params, &grads, &mut state.adam, cfg.lr)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged(step));
        }
        model.set_params(&params)?;
        on_step(step, &report);
        reports.push(report);
    }
    Ok(reports)
}
