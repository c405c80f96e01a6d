//! Fixtures shared by the benchmarks.

use byzdistill::checks::random_simplex;
use byzdistill::model::{self, Activation, Architecture, ModelParams, TrainingSet};
use byzdistill::rng;
use byzdistill::PredictionSet;

/// Uniformly random predictions, `clients x samples` over `classes`.
pub fn predictions(clients: usize, samples: usize, classes: usize, seed: u64) -> PredictionSet {
    let mut r = rng::stream(&[seed]);
    let data = (0..clients * samples).flat_map(|_| random_simplex(&mut r, classes).into_inner()).collect();
    PredictionSet::new(clients, samples, classes, data).expect("rectangular")
}

/// The reference-size network and a batch of soft-labelled rows for it.
pub fn model_fixture(rows: usize, seed: u64) -> (ModelParams, TrainingSet) {
    let arch = Architecture::new(20, vec![32], 5, Activation::Tanh).expect("valid architecture");
    let params = model::init(&arch, seed);
    let mut r = rng::stream(&[seed, 1]);
    let features: Vec<f64> = (0..rows * 20).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let targets = (0..rows).flat_map(|_| random_simplex(&mut r, 5).into_inner()).collect();
    let set = TrainingSet::new(features, targets, 20, 5).expect("consistent shapes");
    (params, set)
}
