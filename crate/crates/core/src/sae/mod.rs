//! Sparse autoencoder parameters and forward passes for every variant.
//!
//! Encoding maps `R^n -> R^m` through `z = W_enc x + b_enc` followed by the
//! variant's sparsifying nonlinearity; decoding maps a latent code back with
//! `x_hat = sum_i f_i * dec_rows[i] + b_dec`.

mod objective;
mod sparsify;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, streams};
use crate::scalar::Scalar;

pub use objective::{grad, loss, loss_and_grad, remove_radial_component, LossParts, SaeGrads};
pub use sparsify::{batchtopk_sparsify, estimate_batchtopk_threshold, topk_row, ThresholdEstimator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Relu,
    TopK,
    BatchTopK,
    /// Per-latent thresholds, inference only (imported weights).
    JumpReluInference,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Relu => "relu",
            Variant::TopK => "top-k",
            Variant::BatchTopK => "batch-top-k",
            Variant::JumpReluInference => "jump-relu-inference",
        }
    }

    pub fn uses_k(self) -> bool {
        matches!(self, Variant::TopK | Variant::BatchTopK)
    }
}

fn default_lambda() -> f64 {
    8e-5
}
fn default_alpha_aux() -> f64 {
    1.0 / 32.0
}
fn default_k_aux() -> usize {
    512
}
fn default_k() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub variant: Variant,
    pub n: usize,
    pub m: usize,
    /// Active latents per sample (TopK) or per-sample average (BatchTopK).
    #[serde(default = "default_k")]
    pub k: usize,
    /// L1 coefficient, Relu only.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Auxiliary dead-latent loss coefficient, TopK/BatchTopK only.
    #[serde(default = "default_alpha_aux")]
    pub alpha_aux: f64,
    #[serde(default = "default_k_aux")]
    pub k_aux: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SaeConfig {
    pub fn new(variant: Variant, n: usize, m: usize) -> Self {
        Self {
            variant,
            n,
            m,
            k: default_k().min(m.max(1)),
            lambda: default_lambda(),
            alpha_aux: default_alpha_aux(),
            k_aux: default_k_aux(),
            seed: 0,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_alpha_aux(mut self, alpha: f64) -> Self {
        self.alpha_aux = alpha;
        self
    }

    pub fn with_k_aux(mut self, k_aux: usize) -> Self {
        self.k_aux = k_aux;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `k_aux` clipped to the dictionary size.
    pub fn effective_k_aux(&self) -> usize {
        self.k_aux.min(self.m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("sae.n must be >= 1".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("sae.m must be >= 1".into()));
        }
        if self.variant.uses_k() && !(1..=self.m).contains(&self.k) {
            return Err(Error::InvalidConfig(format!(
                "sae.k must satisfy 1 <= k <= m ({}), got {}",
                self.m, self.k
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("sae.lambda must be >= 0".into()));
        }
        if !(self.alpha_aux >= 0.0) || !self.alpha_aux.is_finite() {
            return Err(Error::InvalidConfig("sae.alpha_aux must be >= 0".into()));
        }
        Ok(())
    }
}

/// Encoder/decoder parameters plus the variant's inference thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct Sae<T> {
    /// `m × n`; row `i` is latent `i`'s encoder vector.
    pub enc_weights: Array2<T>,
    pub enc_bias: Array1<T>,
    /// `m × n`; row `i` is latent `i`'s decoder direction.
    pub dec_rows: Array2<T>,
    pub dec_bias: Array1<T>,
    pub jump_thresholds: Option<Array1<T>>,
    pub batchtopk_threshold: Option<T>,
    pub config: SaeConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput<T> {
    pub pre_acts: Array1<T>,
    pub acts: Array1<T>,
}

/// Reconstruction split into the bias and each active latent's contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Contributions<T> {
    pub recon: Array1<T>,
    pub per_latent: BTreeMap<usize, Array1<T>>,
}

impl<T: Scalar> Sae<T> {
    /// Gaussian decoder rows normalized to unit length, encoder rows equal to
    /// the decoder rows, zero biases.
    pub fn init(config: SaeConfig) -> Result<Self> {
        config.validate()?;
        let (n, m) = (config.n, config.m);
        let mut rng = rng::stream(config.seed, streams::INIT);
        let mut dec = Array2::<T>::zeros((m, n));
        for mut row in dec.rows_mut() {
            fill_unit_gaussian(&mut rng, row.as_slice_mut().expect("standard layout"));
        }
        Ok(Self {
            enc_weights: dec.clone(),
            enc_bias: Array1::zeros(m),
            dec_rows: dec,
            dec_bias: Array1::zeros(n),
            jump_thresholds: None,
            batchtopk_threshold: None,
            config,
        })
    }

    pub fn from_parts(
        config: SaeConfig,
        enc_weights: Array2<T>,
        enc_bias: Array1<T>,
        dec_rows: Array2<T>,
        dec_bias: Array1<T>,
    ) -> Result<Self> {
        let sae = Self {
            enc_weights,
            enc_bias,
            dec_rows,
            dec_bias,
            jump_thresholds: None,
            batchtopk_threshold: None,
            config,
        };
        sae.validate_shapes()?;
        Ok(sae)
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn validate_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let (m, n) = (self.m(), self.n());
        let bad = |what: &str, got: String| Error::Header(format!("{what} has shape {got}, expected m={m}, n={n}"));
        if self.enc_weights.dim() != (m, n) {
            return Err(bad("enc_weights", format!("{:?}", self.enc_weights.dim())));
        }
        if self.dec_rows.dim() != (m, n) {
            return Err(bad("dec_rows", format!("{:?}", self.dec_rows.dim())));
        }
        if self.enc_bias.len() != m {
            return Err(bad("enc_bias", format!("{}", self.enc_bias.len())));
        }
        if self.dec_bias.len() != n {
            return Err(bad("dec_bias", format!("{}", self.dec_bias.len())));
        }
        if let Some(t) = &self.jump_thresholds {
            if t.len() != m {
                return Err(bad("jump_thresholds", format!("{}", t.len())));
            }
        }
        Ok(())
    }

    /// Full structural check: shapes, finiteness and threshold presence.
    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        let finite = self.enc_weights.iter().all(|v| v.is_finite())
            && self.enc_bias.iter().all(|v| v.is_finite())
            && self.dec_rows.iter().all(|v| v.is_finite())
            && self.dec_bias.iter().all(|v| v.is_finite())
            && self.jump_thresholds.iter().flatten().all(|v| v.is_finite())
            && self.batchtopk_threshold.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite);
        }
        let is_jump = self.variant() == Variant::JumpReluInference;
        if is_jump != self.jump_thresholds.is_some() {
            return Err(Error::Header(
                "jump_thresholds present iff variant is jump-relu-inference".into(),
            ));
        }
        Ok(())
    }

    /// `z = W_enc x + b_enc` for one sample, one dot product per latent.
    pub fn pre_activations(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        check_dim(self.n(), x.len())?;
        Ok(Array1::from_iter(
            self.enc_weights
                .rows()
                .into_iter()
                .zip(&self.enc_bias)
                .map(|(w, &b)| w.dot(&x) + b),
        ))
    }

    /// Pre-activations for a batch (`B × m`), bit-identical to calling
    /// [`Self::pre_activations`] on each row.
    pub fn pre_activations_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        check_dim(self.n(), x.ncols())?;
        let mut z = Array2::zeros((x.nrows(), self.m()));
        for (xr, mut zr) in x.rows().into_iter().zip(z.rows_mut()) {
            for ((w, &b), out) in self
                .enc_weights
                .rows()
                .into_iter()
                .zip(&self.enc_bias)
                .zip(zr.iter_mut())
            {
                *out = w.dot(&xr) + b;
            }
        }
        Ok(z)
    }

    /// Batch pre-activations through one matrix product; faster, but rounding
    /// may differ from the per-row path in the last bits.
    fn pre_activations_gemm(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        check_dim(self.n(), x.ncols())?;
        Ok(x.dot(&self.enc_weights.t()) + &self.enc_bias)
    }

    /// Inference-time sparsification of one pre-activation vector.
    fn sparsify_inference(&self, z: ArrayView1<'_, T>) -> Result<Array1<T>> {
        Ok(match self.variant() {
            Variant::Relu => z.mapv(relu),
            Variant::TopK => topk_row(z, self.config.k),
            Variant::BatchTopK => {
                let theta = self
                    .batchtopk_threshold
                    .ok_or(Error::MissingThreshold(Variant::BatchTopK.name()))?;
                z.mapv(|v| if v > theta && v > T::zero() { v } else { T::zero() })
            }
            Variant::JumpReluInference => {
                let theta = self
                    .jump_thresholds
                    .as_ref()
                    .ok_or(Error::MissingThreshold(Variant::JumpReluInference.name()))?;
                Array1::from_iter(z.iter().zip(theta).map(|(&v, &t)| if v > t { v } else { T::zero() }))
            }
        })
    }

    pub fn encode(&self, x: ArrayView1<'_, T>) -> Result<EncodeOutput<T>> {
        let pre_acts = self.pre_activations(x)?;
        let acts = self.sparsify_inference(pre_acts.view())?;
        Ok(EncodeOutput { pre_acts, acts })
    }

    /// Inference encoding of every row; returns `(pre_acts, acts)`, both `B × m`.
    pub fn encode_batch(&self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, Array2<T>)> {
        let z = self.pre_activations_batch(x)?;
        let mut f = Array2::zeros(z.dim());
        for (zr, mut fr) in z.rows().into_iter().zip(f.rows_mut()) {
            fr.assign(&self.sparsify_inference(zr)?);
        }
        Ok((z, f))
    }

    /// Training-time encoding: BatchTopK selects globally across the batch.
    pub fn encode_train(&self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, Array2<T>)> {
        let z = self.pre_activations_gemm(x)?;
        let f = match self.variant() {
            Variant::Relu => z.mapv(relu),
            Variant::TopK => {
                let mut f = Array2::zeros(z.dim());
                for (zr, mut fr) in z.rows().into_iter().zip(f.rows_mut()) {
                    fr.assign(&topk_row(zr, self.config.k));
                }
                f
            }
            Variant::BatchTopK => batchtopk_sparsify(z.view(), self.config.k),
            Variant::JumpReluInference => return Err(Error::NotTrainable(Variant::JumpReluInference.name())),
        };
        Ok((z, f))
    }

    /// `sum_i f_i * dec_rows[i] + b_dec`, accumulated in latent index order.
    pub fn decode(&self, f: ArrayView1<'_, T>) -> Result<Array1<T>> {
        check_dim(self.m(), f.len())?;
        let mut out = self.dec_bias.clone();
        for (i, &fi) in f.iter().enumerate() {
            if fi != T::zero() {
                out.scaled_add(fi, &self.dec_rows.row(i));
            }
        }
        Ok(out)
    }

    pub fn decode_batch(&self, f: ArrayView2<'_, T>) -> Result<Array2<T>> {
        check_dim(self.m(), f.ncols())?;
        let mut out = Array2::zeros((f.nrows(), self.n()));
        for (fr, mut or) in f.rows().into_iter().zip(out.rows_mut()) {
            or.assign(&self.dec_bias);
            for (i, &fi) in fr.iter().enumerate() {
                if fi != T::zero() {
                    or.scaled_add(fi, &self.dec_rows.row(i));
                }
            }
        }
        Ok(out)
    }

    /// Inference reconstruction of a batch.
    pub fn reconstruct_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let (_, f) = self.encode_batch(x)?;
        self.decode_batch(f.view())
    }

    pub fn forward_contributions(&self, x: ArrayView1<'_, T>) -> Result<Contributions<T>> {
        let enc = self.encode(x)?;
        let mut recon = self.dec_bias.clone();
        let mut per_latent = BTreeMap::new();
        for (i, &fi) in enc.acts.iter().enumerate() {
            if fi != T::zero() {
                let c = self.dec_rows.row(i).mapv(|d| fi * d);
                recon += &c;
                per_latent.insert(i, c);
            }
        }
        Ok(Contributions { recon, per_latent })
    }

    /// Rescales every decoder row to unit norm. Zero-norm rows are redrawn
    /// from the seed stream keyed by `salt`; their indices are returned.
    pub fn project_decoder_unit_norm(&mut self, salt: u64) -> Vec<usize> {
        let mut reinit = Vec::new();
        for (i, mut row) in self.dec_rows.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if norm > T::zero() && norm.is_finite() {
                row.mapv_inplace(|v| v / norm);
            } else {
                let mut rng = rng::stream(rng::mix(self.config.seed, salt ^ i as u64), streams::REINIT);
                fill_unit_gaussian(&mut rng, row.as_slice_mut().expect("standard layout"));
                reinit.push(i);
            }
        }
        reinit
    }

    /// Norm of each decoder row.
    pub fn decoder_norms(&self) -> Array1<T> {
        self.dec_rows.map_axis(Axis(1), |r| r.dot(&r).sqrt())
    }

    pub fn cast<U: Scalar>(&self) -> Sae<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        let c1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        Sae {
            enc_weights: c2(&self.enc_weights),
            enc_bias: c1(&self.enc_bias),
            dec_rows: c2(&self.dec_rows),
            dec_bias: c1(&self.dec_bias),
            jump_thresholds: self.jump_thresholds.as_ref().map(c1),
            batchtopk_threshold: self.batchtopk_threshold.map(|v| U::lit(v.to_f64_lossy())),
            config: self.config.clone(),
        }
    }
}

#[inline]
pub fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn fill_unit_gaussian<T: Scalar, R: Rng>(rng: &mut R, out: &mut [T]) {
    loop {
        let v: Vec<f64> = (0..out.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for (o, a) in out.iter_mut().zip(&v) {
                *o = T::lit(a / norm);
            }
            return;
        }
    }
}
