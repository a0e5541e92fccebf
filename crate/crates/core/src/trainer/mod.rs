//! Adam training loop with dead-latent tracking, decoder normalization,
//! BatchTopK threshold estimation, metric history and checkpoints.

mod adam;
mod checkpoint;

use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, ActivationBatch};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::{self, streams};
use crate::sae::{
    loss, loss_and_grad, remove_radial_component, LossParts, Sae, SaeConfig, ThresholdEstimator, Variant,
};
use crate::scalar::Scalar;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_weights_header, save_checkpoint, save_checkpoint_as,
    ArrayDesc, WeightsHeader, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

fn default_lr() -> f64 {
    4e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    4096
}
fn default_epochs() -> usize {
    1
}
fn default_dead_window() -> u64 {
    1_000_000
}
fn default_checkpoint_every() -> usize {
    100
}
fn default_restarts() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Overrides `epochs` with `ceil(total_samples / count)` when set.
    #[serde(default)]
    pub total_samples: Option<u64>,
    /// A latent is dead once it has not fired for more than this many samples.
    #[serde(default = "default_dead_window")]
    pub dead_window: u64,
    /// History is recorded every this many optimizer steps.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Keep the decoder directions fixed.
    #[serde(default)]
    pub freeze_decoder: bool,
    /// Keep the decoder bias fixed.
    #[serde(default)]
    pub freeze_decoder_bias: bool,
    /// Seed fresh decoder (and tied encoder) rows from training samples by
    /// k-means++-style sampling instead of Gaussian directions.
    #[serde(default)]
    pub init_from_data: bool,
    /// Independent runs from different initializations; [`train`] keeps the
    /// one with the lowest final training loss.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            total_samples: None,
            dead_window: default_dead_window(),
            checkpoint_every: default_checkpoint_every(),
            seed: 0,
            freeze_decoder: false,
            freeze_decoder_bias: false,
            init_from_data: false,
            restarts: default_restarts(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig("train.lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::InvalidConfig("train.beta1 must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("train.beta2 must be in [0, 1)".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidConfig("train.eps must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("train.checkpoint_every must be >= 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("train.restarts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Number of epochs to run over `count` samples.
    pub fn total_epochs(&self, count: usize) -> usize {
        match self.total_samples {
            Some(t) if count > 0 => t.div_ceil(count as u64) as usize,
            _ => self.epochs,
        }
    }
}

/// One training-history record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub reconstruct: f64,
    pub sparsity: f64,
    pub aux: f64,
    pub total: f64,
    pub mean_l0: f64,
    pub fvu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub epoch: u64,
    pub samples_seen: u64,
    pub adam: AdamState<T>,
    /// Samples since each latent last fired.
    pub last_active: Vec<u64>,
    pub history: Vec<HistoryRecord>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(sae: &Sae<T>) -> Self {
        let (m, n) = (sae.m(), sae.n());
        Self {
            step: 0,
            epoch: 0,
            samples_seen: 0,
            adam: AdamState::new(&[m * n, m, m * n, n]),
            last_active: vec![0; m],
            history: Vec::new(),
        }
    }

    pub fn dead_mask(&self, window: u64) -> Vec<bool> {
        self.last_active.iter().map(|&c| c > window).collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let moments = |g: &Vec<Vec<T>>| -> Vec<Vec<f64>> {
            g.iter().map(|v| v.iter().map(|x| x.to_f64_lossy()).collect()).collect()
        };
        let file = TrainStateFile {
            dtype: T::DTYPE,
            step: self.step,
            epoch: self.epoch,
            samples_seen: self.samples_seen,
            adam_step: self.adam.step,
            first_moments: moments(&self.adam.first),
            second_moments: moments(&self.adam.second),
            last_active: self.last_active.clone(),
            history: self.history.clone(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    /// Restores a state saved by [`TrainState::to_json`]; bit-exact when the
    /// stored dtype matches `T`.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let f: TrainStateFile = serde_json::from_slice(bytes)?;
        let moments =
            |g: Vec<Vec<f64>>| -> Vec<Vec<T>> { g.into_iter().map(|v| v.into_iter().map(T::lit).collect()).collect() };
        Ok(Self {
            step: f.step,
            epoch: f.epoch,
            samples_seen: f.samples_seen,
            adam: AdamState {
                step: f.adam_step,
                first: moments(f.first_moments),
                second: moments(f.second_moments),
            },
            last_active: f.last_active,
            history: f.history,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainStateFile {
    dtype: crate::scalar::Dtype,
    step: u64,
    epoch: u64,
    samples_seen: u64,
    adam_step: u64,
    first_moments: Vec<Vec<f64>>,
    second_moments: Vec<Vec<f64>>,
    last_active: Vec<u64>,
    history: Vec<HistoryRecord>,
}

/// Drives training of one SAE over an in-memory dataset.
pub struct Trainer<'a, T> {
    sae: Sae<T>,
    state: TrainState<T>,
    cfg: TrainConfig,
    data: &'a ActivationBatch<T>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(sae_cfg: SaeConfig, cfg: TrainConfig, data: &'a ActivationBatch<T>) -> Result<Self> {
        let mut sae = Sae::init(sae_cfg)?;
        if cfg.init_from_data {
            crate::error::check_dim(sae.n(), data.n_dims())?;
            init_from_samples(&mut sae, data);
        }
        Self::with_sae(sae, cfg, data)
    }

    /// Continues training an existing SAE with fresh optimizer state.
    pub fn with_sae(sae: Sae<T>, cfg: TrainConfig, data: &'a ActivationBatch<T>) -> Result<Self> {
        let state = TrainState::new(&sae);
        Self::resume(sae, state, cfg, data)
    }

    /// Continues from a saved `(sae, state)` pair.
    pub fn resume(sae: Sae<T>, state: TrainState<T>, cfg: TrainConfig, data: &'a ActivationBatch<T>) -> Result<Self> {
        cfg.validate()?;
        sae.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        crate::error::check_dim(sae.n(), data.n_dims())?;
        crate::error::check_dim(sae.m(), state.last_active.len())?;
        if sae.variant() == Variant::JumpReluInference {
            return Err(Error::NotTrainable(Variant::JumpReluInference.name()));
        }
        Ok(Self { sae, state, cfg, data })
    }

    pub fn sae(&self) -> &Sae<T> {
        &self.sae
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch as usize >= self.cfg.total_epochs(self.data.count())
    }

    /// Runs one epoch. The final epoch also estimates the BatchTopK threshold.
    pub fn run_epoch(&mut self) -> Result<()> {
        let total = self.cfg.total_epochs(self.data.count()) as u64;
        let is_final = self.state.epoch + 1 >= total;
        let estimate = is_final && self.sae.variant() == Variant::BatchTopK;
        let mut est = ThresholdEstimator::new();
        let shuffle_seed = rng::mix(self.cfg.seed, self.state.epoch);
        for batch in batch_iter(self.data, self.cfg.batch_size, true, shuffle_seed)? {
            let acts = self.step(&batch)?;
            if estimate {
                est.push(acts.view());
            }
        }
        self.state.epoch += 1;
        if estimate {
            self.sae.batchtopk_threshold = Some(est.finish()?);
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    fn step(&mut self, batch: &ActivationBatch<T>) -> Result<ndarray::Array2<T>> {
        let dead = self.state.dead_mask(self.cfg.dead_window);
        let x = batch.data().view();
        let (parts, mut grads, acts) = loss_and_grad(&self.sae, x, &dead)?;
        if !grads.all_finite() {
            return Err(Error::GradientOverflow);
        }
        let relu = self.sae.variant() == Variant::Relu;
        if relu {
            remove_radial_component(&self.sae.dec_rows, &mut grads.dec_rows);
        }
        let train_dec = !self.cfg.freeze_decoder;
        let train_bias = !self.cfg.freeze_decoder_bias;
        let adam_cfg = self.cfg.adam();
        {
            let grad_slices = grads.slices();
            let mut params = self.sae.param_slices_mut();
            adam_step(
                &mut params,
                &grad_slices,
                &[true, true, train_dec, train_bias],
                &mut self.state.adam,
                &adam_cfg,
            )?;
        }
        if relu && train_dec {
            self.sae.project_decoder_unit_norm(self.state.step);
        }

        let b = batch.count() as u64;
        for (i, counter) in self.state.last_active.iter_mut().enumerate() {
            if acts.column(i).iter().any(|v| *v != T::zero()) {
                *counter = 0;
            } else {
                *counter += b;
            }
        }
        self.state.samples_seen += b;
        self.state.step += 1;
        if self.state.step.is_multiple_of(self.cfg.checkpoint_every as u64) {
            self.state
                .history
                .push(history_record(self.state.step, parts, &acts, batch));
        }
        Ok(acts)
    }

    pub fn finish(self) -> (Sae<T>, TrainState<T>) {
        (self.sae, self.state)
    }
}

fn history_record<T: Scalar>(
    step: u64,
    parts: LossParts<T>,
    acts: &ndarray::Array2<T>,
    batch: &ActivationBatch<T>,
) -> HistoryRecord {
    let p = parts.to_f64();
    let nnz = acts.iter().filter(|v| **v != T::zero()).count();
    let var = batch.total_variance().to_f64_lossy();
    HistoryRecord {
        step,
        reconstruct: p.reconstruct,
        sparsity: p.sparsity,
        aux: p.aux,
        total: p.total,
        mean_l0: nnz as f64 / batch.count() as f64,
        fvu: if var > 0.0 { p.reconstruct / var } else { f64::NAN },
    }
}

/// Sets decoder and encoder rows to unit-normalized training samples chosen
/// by k-means++ sampling (squared distance between unit vectors). At most
/// 16384 randomly chosen rows are considered.
pub fn init_from_samples<T: Scalar>(sae: &mut Sae<T>, data: &ActivationBatch<T>) {
    let mut rng = rng::stream(sae.config.seed, streams::INIT ^ 0x5eed);
    let mut pool: Vec<Array1<f64>> = Vec::new();
    let mut order: Vec<usize> = (0..data.count()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(16_384) {
        let row = data.row(i).mapv(|v| v.to_f64_lossy());
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            pool.push(row / norm);
        }
    }
    if pool.is_empty() {
        return;
    }
    let mut dist = vec![f64::INFINITY; pool.len()];
    let mut pick = rng.random_range(0..pool.len());
    for i in 0..sae.m() {
        let chosen = pool[pick].clone();
        let row = chosen.mapv(T::lit);
        sae.dec_rows.row_mut(i).assign(&row);
        sae.enc_weights.row_mut(i).assign(&row);
        for (d, p) in dist.iter_mut().zip(&pool) {
            let diff = p - &chosen;
            *d = d.min(diff.dot(&diff));
        }
        let total: f64 = dist.iter().sum();
        pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            dist.iter()
                .position(|&d| {
                    r -= d;
                    r < 0.0
                })
                .unwrap_or(pool.len() - 1)
        } else {
            rng.random_range(0..pool.len())
        };
    }
}

/// Training loss of `sae` on all of `data` at once, without the auxiliary term.
pub fn full_data_loss<T: Scalar>(sae: &Sae<T>, data: &ActivationBatch<T>) -> Result<f64> {
    let parts = loss(sae, data.data().view(), &vec![false; sae.m()])?;
    Ok(parts.to_f64().total)
}

/// Initializes and trains an SAE end to end. With `restarts > 1`, restart
/// `r` reseeds the SAE with `mix(seed, r)` and the run with the lowest
/// [`full_data_loss`] is returned.
pub fn train<T: Scalar>(
    sae_cfg: SaeConfig,
    train_cfg: TrainConfig,
    data: &ActivationBatch<T>,
) -> Result<(Sae<T>, TrainState<T>)> {
    train_cfg.validate()?;
    let mut best: Option<(f64, Sae<T>, TrainState<T>)> = None;
    for r in 0..train_cfg.restarts {
        let mut cfg = sae_cfg.clone();
        if r > 0 {
            cfg.seed = rng::mix(sae_cfg.seed, r as u64);
        }
        let mut trainer = Trainer::new(cfg, train_cfg.clone(), data)?;
        trainer.run()?;
        let (sae, state) = trainer.finish();
        let score = full_data_loss(&sae, data)?;
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, sae, state));
        }
    }
    let (_, sae, state) = best.expect("restarts >= 1");
    Ok((sae, state))
}

/// Writes the training history as a JSON array.
pub fn write_history(history: &[HistoryRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(history)?)
}
