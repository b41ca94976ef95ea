//! Shared fixtures for the benchmarks.

use occugrasp::data::{generate_sample, input_points, ObservationConfig};
use occugrasp::geometry::Vec3;
use occugrasp::model::{InferOptions, Model, ModelConfig};
use occugrasp::occupancy::Candidate;
use occugrasp::triplane::OpCounters;

/// A rendered desk scene reduced to the network input, and an untrained
/// tiny model.
pub struct Fixture {
    pub points: Vec<Vec3>,
    pub model: Model,
}

impl Fixture {
    pub fn new(seed: u64, points: usize) -> Self {
        let model = Model::new(ModelConfig::tiny(), seed).expect("tiny config is valid");
        let c = &model.config;
        let sample =
            generate_sample(seed, &ObservationConfig::default(), c.pad(), c.region.v).expect("scene generation");
        let points = input_points(&sample, points).expect("non-empty cloud");
        Self { points, model }
    }

    /// The candidates inference picks for this scene.
    pub fn candidates(&self, n: usize) -> Vec<Candidate> {
        let opts = InferOptions { candidates: n, ..Default::default() };
        self.model.infer(&self.points, &opts, &OpCounters::default()).expect("inference").candidates
    }
}
