//! Seed-pinned synthetic setups shared by the experiment tests.

use ndarray::Array2;

use saekit::data::{gen_compositional, ActivationBatch, DirectionInit, SyntheticSpec};
use saekit::metrics::{row_cosine_matrix, row_max};
use saekit::sae::{Sae, SaeConfig, Variant};
use saekit::trainer::{train, TrainConfig};

/// Two groups of three features ("color" and "shape") in 20 dimensions.
pub struct CompositionToy {
    pub spec: SyntheticSpec<f64>,
    pub train: ActivationBatch<f64>,
    pub test: ActivationBatch<f64>,
    /// Six unit atomic directions, color rows first.
    pub atoms: Array2<f64>,
    /// Nine normalized sums `atom[c] + atom[3 + s]`, row `3c + s`.
    pub composites: Array2<f64>,
}

pub fn composition_toy(seed: u64) -> CompositionToy {
    let spec = SyntheticSpec::<f64>::new(20, vec![3, 3], DirectionInit::Orthonormal, seed)
        .unwrap()
        .with_noise(0.02);
    let train = gen_compositional(&spec, 8192).unwrap();
    let mut held_out = spec.clone();
    held_out.seed = seed ^ 0x7e57;
    let test = gen_compositional(&held_out, 4096).unwrap();
    let atoms = spec.directions.clone();
    let mut composites = Array2::zeros((9, 20));
    for c in 0..3 {
        for s in 0..3 {
            let v = &atoms.row(c) + &atoms.row(3 + s);
            composites.row_mut(3 * c + s).assign(&(&v / v.dot(&v).sqrt()));
        }
    }
    CompositionToy {
        spec,
        train,
        test,
        atoms,
        composites,
    }
}

pub fn toy_train_config(seed: u64, epochs: usize, restarts: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 64,
        epochs,
        dead_window: 2048,
        checkpoint_every: 1000,
        seed,
        init_from_data: true,
        restarts,
        ..TrainConfig::default()
    }
}

/// BatchTopK SAE of width `m` trained on the composition toy.
pub fn train_composition(toy: &CompositionToy, m: usize, k: usize, seed: u64) -> Sae<f64> {
    let cfg = SaeConfig::new(Variant::BatchTopK, 20, m).with_k(k).with_seed(seed);
    train(cfg, toy_train_config(seed, 200, 8), &toy.train).unwrap().0
}

/// Twelve orthonormal features, exactly one active per sample with a signed
/// coefficient, drawn with geometrically decaying frequency.
pub struct IncompletenessToy {
    pub spec: SyntheticSpec<f64>,
    pub train: ActivationBatch<f64>,
    pub test: ActivationBatch<f64>,
}

pub fn incompleteness_toy(seed: u64) -> IncompletenessToy {
    let mut spec = SyntheticSpec::<f64>::new(20, vec![12], DirectionInit::Orthonormal, seed)
        .unwrap()
        .with_noise(0.02)
        .with_coeffs(-1.5, 1.5);
    spec.group_weights = Some(vec![(0..12).map(|i| 0.85f64.powi(i)).collect()]);
    let train = gen_compositional(&spec, 16384).unwrap();
    let mut held_out = spec.clone();
    held_out.seed = seed ^ 0x7e57;
    let test = gen_compositional(&held_out, 8192).unwrap();
    IncompletenessToy { spec, train, test }
}

/// TopK (k = 1) SAE of width `m` trained on the incompleteness toy.
pub fn train_incompleteness(toy: &IncompletenessToy, m: usize, seed: u64) -> Sae<f64> {
    let cfg = SaeConfig::new(Variant::TopK, 20, m).with_k(1).with_seed(seed);
    train(cfg, toy_train_config(seed, 100, 8), &toy.train).unwrap().0
}

/// For each row of `truth`, the largest cosine to any row of `rows`; averaged.
pub fn mean_max_cos(truth: &Array2<f64>, rows: &Array2<f64>) -> f64 {
    let c = row_cosine_matrix(truth.view(), rows.view()).unwrap();
    let best: Vec<f64> = row_max(c.view()).into_iter().map(|(v, _)| v).collect();
    best.iter().sum::<f64>() / best.len() as f64
}
