//! Matched-budget comparisons between model variants and data conditions.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::input_points;
use crate::data::{generate_dataset, ObservationConfig, SceneSample};
use crate::error::Result;
use crate::eval::{aggregate, evaluate_anchored, reference_anchors, Aggregate, EvalConfig};
use crate::geometry::Vec3;
use crate::model::{Model, ModelConfig};
use crate::rng::{self, streams};
use crate::train::{train, TrainConfig, TrainScene, TrainState};

/// Noise level of the robustness comparison: σ in metres, fraction of
/// perturbed points.
pub const STUDY_NOISE: (f64, f64) = (0.02, 0.3);
/// Candidates of the reference region used for occupancy comparisons.
pub const REFERENCE_CANDIDATES: usize = 128;
/// Views merged in the multi-view comparison.
pub const STUDY_VIEWS: usize = 3;

/// What gets trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    Base,
    NoOccupancy,
    SingleGroup,
    NoDensity,
    MultiView,
    NoiseAugmented,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::NoOccupancy,
        Variant::SingleGroup,
        Variant::NoDensity,
        Variant::MultiView,
        Variant::NoiseAugmented,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::NoOccupancy => "no_occupancy",
            Variant::SingleGroup => "k1",
            Variant::NoDensity => "no_density",
            Variant::MultiView => "multi_view",
            Variant::NoiseAugmented => "noise_augmented",
        }
    }

    pub fn model_config(self, base: ModelConfig) -> ModelConfig {
        let mut c = base;
        match self {
            Variant::NoOccupancy => c.ablation.occupancy = false,
            Variant::SingleGroup => c.k_groups = 1,
            Variant::NoDensity => c.ablation.density = false,
            _ => {}
        }
        c
    }

    /// Observation conditions of the training set and of the matching
    /// held-out set.
    pub fn condition(self) -> Condition {
        match self {
            Variant::MultiView => Condition::MultiView,
            Variant::NoiseAugmented => Condition::Noisy,
            _ => Condition::Clean,
        }
    }
}

/// How scenes are observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Condition {
    Clean,
    MultiView,
    Noisy,
}

impl Condition {
    pub fn observation(self) -> ObservationConfig {
        let mut o = ObservationConfig::default();
        match self {
            Condition::Clean => {}
            Condition::MultiView => o.views = STUDY_VIEWS,
            Condition::Noisy => (o.noise_sigma, o.noise_fraction) = STUDY_NOISE,
        }
        o
    }
}

/// Shared training and evaluation budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyBudget {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub eval: EvalConfig,
}

impl StudyBudget {
    /// Tiny profile, 64 training scenes, 2000 steps, 16 held-out scenes.
    pub fn full() -> Self {
        Self {
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            train_scenes: 64,
            test_scenes: 16,
            eval: EvalConfig { reference_candidates: REFERENCE_CANDIDATES, ..Default::default() },
        }
    }
}

/// Metrics of one trained variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StudyOutcome {
    pub variant: Variant,
    pub seed: u64,
    /// Held-out scenes observed like the training scenes.
    pub matched: Aggregate,
    /// Held-out scenes observed with [`STUDY_NOISE`], for variants trained
    /// on clean data.
    pub noisy: Option<Aggregate>,
}

impl StudyOutcome {
    /// IOU over the reference region of the matched held-out set.
    pub fn iou(&self) -> f64 {
        self.matched.reference.map_or(0.0, |o| o.iou)
    }

    /// IOU over each model's own predicted regions.
    pub fn predicted_iou(&self) -> f64 {
        self.matched.occupancy.map_or(0.0, |o| o.iou)
    }

    pub fn noisy_iou(&self) -> Option<f64> {
        self.noisy.map(|a| a.reference.map_or(0.0, |o| o.iou))
    }
}

/// Generates and labels data once per seed and condition.
pub struct Study {
    pub budget: StudyBudget,
    train_sets: HashMap<(u64, Condition), Vec<TrainScene>>,
    test_sets: HashMap<(u64, Condition), Vec<SceneSample>>,
    anchors: HashMap<u64, Vec<Vec<Vec3>>>,
}

impl Study {
    pub fn new(budget: StudyBudget) -> Self {
        Self { budget, train_sets: HashMap::new(), test_sets: HashMap::new(), anchors: HashMap::new() }
    }

    fn samples(&self, seed: u64, cond: Condition, count: usize, stream: u64) -> Result<Vec<SceneSample>> {
        let m = &self.budget.model;
        let data_seed = rng::derive(rng::derive(seed, streams::SPLIT), stream);
        generate_dataset(data_seed, count, &cond.observation(), m.pad(), m.region.v)
    }

    fn train_set(&mut self, seed: u64, cond: Condition) -> Result<&[TrainScene]> {
        if !self.train_sets.contains_key(&(seed, cond)) {
            let samples = self.samples(seed, cond, self.budget.train_scenes, 0)?;
            let lc = self.budget.train.labels;
            let scenes = samples.par_iter().map(|s| TrainScene::label(s, &lc)).collect::<Result<Vec<_>>>()?;
            self.train_sets.insert((seed, cond), scenes);
        }
        Ok(&self.train_sets[&(seed, cond)])
    }

    /// Held-out samples; clean and noisy sets show the same scenes.
    pub fn test_set(&mut self, seed: u64, cond: Condition) -> Result<&[SceneSample]> {
        if !self.test_sets.contains_key(&(seed, cond)) {
            let samples = self.samples(seed, cond, self.budget.test_scenes, 1)?;
            self.test_sets.insert((seed, cond), samples);
        }
        Ok(&self.test_sets[&(seed, cond)])
    }

    /// Trains `variant` from `seed` on its condition's data.
    pub fn train_variant(&mut self, variant: Variant, seed: u64) -> Result<Model> {
        let b = self.budget;
        let mut model = Model::new(variant.model_config(b.model), seed)?;
        let mut cfg = b.train;
        cfg.seed = seed;
        cfg.labels.directions = model.config.directions;
        cfg.labels.gripper = model.config.gripper;
        let scenes = self.train_set(seed, variant.condition())?;
        let mut state = TrainState::new(&model);
        train(&mut model, &mut state, scenes, &cfg, |_, _| {})?;
        Ok(model)
    }

    /// Reference-region grasp points of each held-out scene, drawn from its
    /// clean single-view input so that every condition is scored on the
    /// same voxels.
    pub fn anchors(&mut self, seed: u64) -> Result<&[Vec<Vec3>]> {
        if !self.anchors.contains_key(&seed) {
            let (points, n) = (self.budget.train.labels.points, self.budget.eval.reference_candidates.max(1));
            let clean = self.test_set(seed, Condition::Clean)?;
            let anchors = clean
                .iter()
                .map(|s| reference_anchors(&input_points(s, points)?, s.seed, n))
                .collect::<Result<Vec<_>>>()?;
            self.anchors.insert(seed, anchors);
        }
        Ok(&self.anchors[&seed])
    }

    pub fn evaluate(&mut self, model: &Model, seed: u64, cond: Condition, grasps: bool) -> Result<Aggregate> {
        let cfg =
            EvalConfig { seed, occupancy_only: !grasps, points: self.budget.train.labels.points, ..self.budget.eval };
        let anchors = self.anchors(seed)?.to_vec();
        let test = self.test_set(seed, cond)?;
        Ok(aggregate(&evaluate_anchored(model, test, &anchors, &cfg)?))
    }

    /// Trains and evaluates one variant. Grasp AP is computed only for the
    /// occupancy comparison; clean-trained variants are also scored on
    /// noisy scenes.
    pub fn run(&mut self, variant: Variant, seed: u64) -> Result<StudyOutcome> {
        let model = self.train_variant(variant, seed)?;
        self.score(&model, variant, seed)
    }

    /// Evaluates a model trained as `variant` from `seed`.
    pub fn score(&mut self, model: &Model, variant: Variant, seed: u64) -> Result<StudyOutcome> {
        let grasps = matches!(variant, Variant::Base | Variant::NoOccupancy);
        let matched = self.evaluate(model, seed, variant.condition(), grasps)?;
        let noisy =
            if variant == Variant::Base { Some(self.evaluate(model, seed, Condition::Noisy, false)?) } else { None };
        Ok(StudyOutcome { variant, seed, matched, noisy })
    }
}

/// Seeds (out of those present in both lists) where `better(a, b)` holds,
/// and the means of `metric` on each side.
pub fn paired_ordering(
    a: &[StudyOutcome],
    b: &[StudyOutcome],
    metric: impl Fn(&StudyOutcome) -> f64,
) -> (usize, usize, f64, f64) {
    let mut wins = 0;
    let mut pairs = 0;
    let (mut sa, mut sb) = (0.0, 0.0);
    for x in a {
        if let Some(y) = b.iter().find(|y| y.seed == x.seed) {
            pairs += 1;
            let (mx, my) = (metric(x), metric(y));
            sa += mx;
            sb += my;
            wins += (mx >= my) as usize;
        }
    }
    let n = pairs.max(1) as f64;
    (wins, pairs, sa / n, sb / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(variant: Variant, seed: u64, iou: f64) -> StudyOutcome {
        let occ = crate::eval::OccupancyMetrics { iou, f1: 0.0, precision: 0.0, recall: 0.0 };
        let matched = Aggregate { reference: Some(occ), ..Default::default() };
        StudyOutcome { variant, seed, matched, noisy: None }
    }

    #[test]
    fn variants_change_one_thing() {
        let base = ModelConfig::tiny();
        assert_eq!(Variant::Base.model_config(base), base);
        assert_eq!(Variant::MultiView.model_config(base), base);
        assert_eq!(Variant::SingleGroup.model_config(base).k_groups, 1);
        assert!(!Variant::NoDensity.model_config(base).ablation.density);
        assert!(!Variant::NoOccupancy.model_config(base).ablation.occupancy);
        assert_eq!(Variant::MultiView.condition().observation().views, STUDY_VIEWS);
        let noisy = Variant::NoiseAugmented.condition().observation();
        assert_eq!((noisy.noise_sigma, noisy.noise_fraction), STUDY_NOISE);
    }

    #[test]
    fn paired_ordering_matches_by_seed() {
        let a = [outcome(Variant::Base, 1, 0.6), outcome(Variant::Base, 2, 0.4), outcome(Variant::Base, 3, 0.5)];
        let b = [outcome(Variant::SingleGroup, 2, 0.3), outcome(Variant::SingleGroup, 1, 0.7)];
        let (wins, pairs, ma, mb) = paired_ordering(&a, &b, StudyOutcome::iou);
        assert_eq!((wins, pairs), (1, 2));
        assert!((ma - 0.5).abs() < 1e-12 && (mb - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clean_and_noisy_tests_share_scenes() {
        let budget = StudyBudget { train_scenes: 1, test_scenes: 2, ..StudyBudget::full() };
        let mut s = Study::new(budget);
        let clean: Vec<u64> = s.test_set(3, Condition::Clean).unwrap().iter().map(|x| x.seed).collect();
        let noisy: Vec<u64> = s.test_set(3, Condition::Noisy).unwrap().iter().map(|x| x.seed).collect();
        assert_eq!(clean, noisy);
        assert!(!s.test_set(3, Condition::Noisy).unwrap()[0].noisy.is_empty());
    }
}
