//! Activation batches, the synthetic compositional generator and the `SAEA`
//! binary activation format.
//!
//! # `SAEA` layout (little-endian)
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SAEA"
//! 4       4     version (u32, currently 1)
//! 8       1     dtype (u8, 0 = float32)
//! 9       4     n_dims (u32)
//! 13      8     count (u64)
//! 21      1     has_labels (u8, 0 or 1)
//! 22      ...   count * n_dims float32 values, row-major
//! ...     ...   count u32 labels when has_labels = 1
//! ```

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::{self, streams};
use crate::scalar::Scalar;

pub const ACTIVATION_MAGIC: [u8; 4] = *b"SAEA";
pub const ACTIVATION_VERSION: u32 = 1;
pub const ACTIVATION_HEADER_LEN: usize = 22;

/// A matrix of activation vectors (one row per sample) with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBatch<T> {
    data: Array2<T>,
    labels: Option<Vec<u32>>,
}

impl<T: Scalar> ActivationBatch<T> {
    pub fn new(data: Array2<T>, labels: Option<Vec<u32>>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if let Some(l) = &labels {
            if l.len() != data.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: data.nrows(),
                    got: l.len(),
                });
            }
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<T>], n_dims: usize) -> Result<Self> {
        let mut flat = Vec::with_capacity(rows.len() * n_dims);
        for r in rows {
            crate::error::check_dim(n_dims, r.len())?;
            flat.extend_from_slice(r);
        }
        let data = Array2::from_shape_vec((rows.len(), n_dims), flat).map_err(|e| Error::Header(e.to_string()))?;
        Self::new(data, None)
    }

    pub fn empty(n_dims: usize) -> Self {
        Self {
            data: Array2::zeros((0, n_dims)),
            labels: None,
        }
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.data.row(i)
    }

    /// Copies the given rows (and their labels) into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn with_labels(mut self, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(l) = &labels {
            crate::error::check_dim(self.count(), l.len())?;
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> ActivationBatch<U> {
        ActivationBatch {
            data: self.data.mapv(|v| U::lit(v.to_f64_lossy())),
            labels: self.labels.clone(),
        }
    }

    /// Mean squared distance of rows to the row mean (the FVU denominator).
    pub fn total_variance(&self) -> T {
        if self.is_empty() {
            return T::zero();
        }
        let mean = self.data.mean_axis(Axis(0)).expect("nonempty");
        let mut acc = T::zero();
        for row in self.data.rows() {
            for (v, m) in row.iter().zip(mean.iter()) {
                let d = *v - *m;
                acc += d * d;
            }
        }
        acc / T::lit(self.count() as f64)
    }
}

/// Mixed-radix encoding of per-group feature indices into one `u32` label.
///
/// The first group is the most significant digit, so for groups `[3, 3]`
/// the label is `color * 3 + shape`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelLayout {
    pub groups: Vec<usize>,
}

impl LabelLayout {
    pub fn new(groups: Vec<usize>) -> Self {
        Self { groups }
    }

    pub fn encode(&self, idx: &[usize]) -> u32 {
        let mut label = 0usize;
        for (j, g) in idx.iter().zip(&self.groups) {
            label = label * g + j;
        }
        label as u32
    }

    pub fn decode(&self, label: u32) -> Vec<usize> {
        let mut rest = label as usize;
        let mut out = vec![0; self.groups.len()];
        for (slot, g) in out.iter_mut().zip(&self.groups).rev() {
            *slot = rest % g;
            rest /= g;
        }
        out
    }

    /// Group-local class of every sample for group `group`.
    pub fn group_classes(&self, labels: &[u32], group: usize) -> Vec<usize> {
        labels.iter().map(|&l| self.decode(l)[group]).collect()
    }

    pub fn n_features(&self) -> usize {
        self.groups.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionInit {
    /// Gram-Schmidt on Gaussian draws; requires `features <= n_dims`.
    #[default]
    Orthonormal,
    RandomUnit,
}

/// `features × n_dims` matrix of unit-norm feature directions.
pub fn make_directions<T: Scalar>(features: usize, n_dims: usize, init: DirectionInit, seed: u64) -> Result<Array2<T>> {
    if n_dims == 0 {
        return Err(Error::InvalidConfig("data.n_dims must be positive".into()));
    }
    if init == DirectionInit::Orthonormal && features > n_dims {
        return Err(Error::InvalidConfig(format!(
            "orthonormal directions need features ({features}) <= n_dims ({n_dims})"
        )));
    }
    let mut rng = rng::stream(seed, streams::DIRECTIONS);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(features);
    while rows.len() < features {
        let mut v: Vec<f64> = (0..n_dims).map(|_| rng.sample(StandardNormal)).collect();
        if init == DirectionInit::Orthonormal {
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    Ok(Array2::from_shape_fn((features, n_dims), |(i, j)| T::lit(rows[i][j])))
}

/// Parameters of the compositional toy generator.
///
/// Each sample activates exactly one feature per group; the feature's
/// direction is scaled by a uniform coefficient and Gaussian noise is added.
#[derive(Clone, Debug)]
pub struct SyntheticSpec<T> {
    pub n_dims: usize,
    pub groups: Vec<usize>,
    /// One unit row per atomic feature, features of group 0 first.
    pub directions: Array2<T>,
    pub coeff_low: f64,
    pub coeff_high: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Optional per-group selection weights; uniform when absent.
    pub group_weights: Option<Vec<Vec<f64>>>,
}

impl<T: Scalar> SyntheticSpec<T> {
    /// Spec with freshly drawn directions and default coefficient range [0.5, 1.5].
    pub fn new(n_dims: usize, groups: Vec<usize>, init: DirectionInit, seed: u64) -> Result<Self> {
        let features = groups.iter().sum();
        let directions = make_directions(features, n_dims, init, seed)?;
        let spec = Self {
            n_dims,
            groups,
            directions,
            coeff_low: 0.5,
            coeff_high: 1.5,
            noise_std: 0.0,
            seed,
            group_weights: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_coeffs(mut self, low: f64, high: f64) -> Self {
        self.coeff_low = low;
        self.coeff_high = high;
        self
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn layout(&self) -> LabelLayout {
        LabelLayout::new(self.groups.clone())
    }

    pub fn n_features(&self) -> usize {
        self.groups.iter().sum()
    }

    /// Offset of group `g`'s first feature row in `directions`.
    pub fn group_offset(&self, g: usize) -> usize {
        self.groups[..g].iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dims == 0 {
            return Err(Error::InvalidConfig("data.n_dims must be positive".into()));
        }
        if self.groups.is_empty() || self.groups.contains(&0) {
            return Err(Error::InvalidConfig(
                "data.groups must be a nonempty list of positive sizes".into(),
            ));
        }
        let f = self.n_features();
        if self.directions.dim() != (f, self.n_dims) {
            return Err(Error::InvalidConfig(format!(
                "directions must be {f}x{}, got {:?}",
                self.n_dims,
                self.directions.dim()
            )));
        }
        let tol = 1e-9f64.max(16.0 * T::epsilon().to_f64_lossy());
        for (i, row) in self.directions.rows().into_iter().enumerate() {
            let norm = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > tol || !norm.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "direction {i} has norm {norm}, expected 1"
                )));
            }
        }
        if !(self.coeff_low <= self.coeff_high) || !self.coeff_low.is_finite() || !self.coeff_high.is_finite() {
            return Err(Error::InvalidConfig("data.coeff_low must be <= data.coeff_high".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidConfig("data.noise_std must be >= 0".into()));
        }
        if let Some(w) = &self.group_weights {
            if w.len() != self.groups.len() || w.iter().zip(&self.groups).any(|(w, &g)| w.len() != g) {
                return Err(Error::InvalidConfig("data.group_weights must match data.groups".into()));
            }
            if w.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite())
                || w.iter().any(|g| g.iter().sum::<f64>() <= 0.0)
            {
                return Err(Error::InvalidConfig(
                    "data.group_weights must be nonnegative with positive sum".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Draws `count` samples from the compositional generative process.
///
/// Labels hold the per-group feature indices packed by [`LabelLayout`].
pub fn gen_compositional<T: Scalar>(spec: &SyntheticSpec<T>, count: usize) -> Result<ActivationBatch<T>> {
    spec.validate()?;
    let n = spec.n_dims;
    let layout = spec.layout();
    let mut rng = rng::stream(spec.seed, streams::SAMPLES);
    let pickers: Vec<Option<WeightedIndex<f64>>> = match &spec.group_weights {
        Some(w) => w
            .iter()
            .map(|g| {
                WeightedIndex::new(g)
                    .map(Some)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))
            })
            .collect::<Result<_>>()?,
        None => vec![None; spec.groups.len()],
    };
    let dirs: Vec<Vec<f64>> = spec
        .directions
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();

    let mut data = Array2::<T>::zeros((count, n));
    let mut labels = Vec::with_capacity(count);
    let mut sample = vec![0.0f64; n];
    let mut picked = vec![0usize; spec.groups.len()];
    for s in 0..count {
        sample.iter_mut().for_each(|v| *v = 0.0);
        for (g, &size) in spec.groups.iter().enumerate() {
            let j = match &pickers[g] {
                Some(w) => w.sample(&mut rng),
                None => rng.random_range(0..size),
            };
            picked[g] = j;
            let c = spec.coeff_low + (spec.coeff_high - spec.coeff_low) * rng.random::<f64>();
            let d = &dirs[spec.group_offset(g) + j];
            sample.iter_mut().zip(d).for_each(|(v, d)| *v += c * d);
        }
        if spec.noise_std > 0.0 {
            for v in sample.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.noise_std * z;
            }
        }
        for (dst, v) in data.row_mut(s).iter_mut().zip(&sample) {
            *dst = T::lit(*v);
        }
        labels.push(layout.encode(&picked));
    }
    ActivationBatch::new(data, Some(labels))
}

/// Parsed fixed-size header of an `SAEA` file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivationFileHeader {
    pub version: u32,
    pub dtype: u8,
    pub n_dims: u32,
    pub count: u64,
    pub has_labels: u8,
}

impl ActivationFileHeader {
    pub fn to_bytes(&self) -> [u8; ACTIVATION_HEADER_LEN] {
        let mut b = [0u8; ACTIVATION_HEADER_LEN];
        b[0..4].copy_from_slice(&ACTIVATION_MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8] = self.dtype;
        b[9..13].copy_from_slice(&self.n_dims.to_le_bytes());
        b[13..21].copy_from_slice(&self.count.to_le_bytes());
        b[21] = self.has_labels;
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[0..4] != ACTIVATION_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < ACTIVATION_HEADER_LEN {
            return Err(Error::TruncatedPayload);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ACTIVATION_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = bytes[8];
        if dtype != 0 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let has_labels = bytes[21];
        if has_labels > 1 {
            return Err(Error::Header(format!("has_labels must be 0 or 1, got {has_labels}")));
        }
        Ok(Self {
            version,
            dtype,
            n_dims: u32::from_le_bytes(bytes[9..13].try_into().unwrap()),
            count: u64::from_le_bytes(bytes[13..21].try_into().unwrap()),
            has_labels,
        })
    }

    /// Exact payload length implied by the header.
    pub fn payload_len(&self) -> Result<usize> {
        let overflow = || Error::SizeOverflow(format!("{} x {}", self.count, self.n_dims));
        let count = usize::try_from(self.count).map_err(|_| overflow())?;
        let data = count
            .checked_mul(self.n_dims as usize)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(overflow)?;
        let labels = if self.has_labels == 1 {
            count.checked_mul(4).ok_or_else(overflow)?
        } else {
            0
        };
        data.checked_add(labels).ok_or_else(overflow)
    }
}

/// Serializes a batch to `SAEA` bytes. Values are stored as float32.
pub fn encode_activations<T: Scalar>(batch: &ActivationBatch<T>) -> Result<Vec<u8>> {
    let n_dims =
        u32::try_from(batch.n_dims()).map_err(|_| Error::SizeOverflow(format!("n_dims {}", batch.n_dims())))?;
    let header = ActivationFileHeader {
        version: ACTIVATION_VERSION,
        dtype: 0,
        n_dims,
        count: batch.count() as u64,
        has_labels: batch.labels.is_some() as u8,
    };
    let payload = header.payload_len()?;
    let mut out = Vec::with_capacity(ACTIVATION_HEADER_LEN + payload);
    out.extend_from_slice(&header.to_bytes());
    for v in batch.data.iter() {
        out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    if let Some(labels) = &batch.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_activations<T: Scalar>(bytes: &[u8]) -> Result<ActivationBatch<T>> {
    let header = ActivationFileHeader::parse(bytes)?;
    let payload = &bytes[ACTIVATION_HEADER_LEN..];
    let expected = header.payload_len()?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload);
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes);
    }
    let count = header.count as usize;
    let n = header.n_dims as usize;
    let (data_bytes, label_bytes) = payload.split_at(count * n * 4);
    let mut values = Vec::with_capacity(count * n);
    for chunk in data_bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        values.push(T::of_f32(v));
    }
    let labels = (header.has_labels == 1).then(|| {
        label_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    let data = Array2::from_shape_vec((count, n), values).map_err(|e| Error::Header(e.to_string()))?;
    ActivationBatch::new(data, labels)
}

pub fn write_activations<T: Scalar>(batch: &ActivationBatch<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_activations(batch)?)
}

pub fn read_activations<T: Scalar>(path: impl AsRef<Path>) -> Result<ActivationBatch<T>> {
    decode_activations(&std::fs::read(path)?)
}

/// Row indices of each mini-batch in one epoch.
pub fn batch_indices(count: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, streams::SHUFFLE));
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Iterator over mini-batches of one epoch.
pub struct BatchIter<'a, T> {
    source: &'a ActivationBatch<T>,
    chunks: std::vec::IntoIter<Vec<usize>>,
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = ActivationBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        self.chunks.next().map(|idx| self.source.select(&idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.chunks.size_hint()
    }
}

impl<T: Scalar> ExactSizeIterator for BatchIter<'_, T> {}

pub fn batch_iter<T: Scalar>(
    batch: &ActivationBatch<T>,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchIter<'_, T>> {
    let chunks = batch_indices(batch.count(), batch_size, shuffle, seed)?;
    Ok(BatchIter {
        source: batch,
        chunks: chunks.into_iter(),
    })
}

/// Seeded random split; returns `(train, test)`.
pub fn train_test_split<T: Scalar>(
    batch: &ActivationBatch<T>,
    test_fraction: f64,
    seed: u64,
) -> Result<(ActivationBatch<T>, ActivationBatch<T>)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig("test_fraction must be in [0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..batch.count()).collect();
    order.shuffle(&mut rng::stream(seed, streams::SPLIT));
    let n_test = (batch.count() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    Ok((batch.select(train), batch.select(test)))
}
