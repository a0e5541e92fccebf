//! Meta-SAEs: BatchTopK SAEs trained on the decoder rows of a base SAE, so
//! each base latent decomposes into a few meta-latents.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::ActivationBatch;
use crate::error::{check_dim, Error, Result};
use crate::io::write_atomic;
use crate::metrics::{batch_mse, row_cosine_matrix, row_max};
use crate::sae::{Sae, SaeConfig, Variant};
use crate::scalar::Scalar;
use crate::trainer::{train, TrainConfig, Trainer};

fn default_meta_m() -> usize {
    2304
}
fn default_avg_k() -> usize {
    4
}
fn default_epochs() -> usize {
    2000
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    4096
}
fn default_normalize() -> bool {
    true
}
fn default_dead_window() -> u64 {
    1_000_000
}
fn default_restarts() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSaeConfig {
    #[serde(default = "default_meta_m")]
    pub meta_m: usize,
    /// Mean number of active meta-latents per decoder row (BatchTopK `k`).
    #[serde(default = "default_avg_k")]
    pub avg_k: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_normalize")]
    pub normalize_rows: bool,
    #[serde(default = "default_dead_window")]
    pub dead_window: u64,
    /// See [`TrainConfig::init_from_data`].
    #[serde(default)]
    pub init_from_data: bool,
    /// See [`TrainConfig::restarts`].
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MetaSaeConfig {
    fn default() -> Self {
        Self {
            meta_m: default_meta_m(),
            avg_k: default_avg_k(),
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch_size(),
            normalize_rows: default_normalize(),
            dead_window: default_dead_window(),
            init_from_data: false,
            restarts: default_restarts(),
            seed: 0,
        }
    }
}

impl MetaSaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_m == 0 {
            return Err(Error::InvalidConfig("meta.meta_m must be >= 1".into()));
        }
        if self.avg_k == 0 || self.avg_k > self.meta_m {
            return Err(Error::InvalidConfig("meta.avg_k must be in [1, meta_m]".into()));
        }
        self.train_config(self.epochs).validate()
    }

    fn sae_config(&self, n: usize) -> SaeConfig {
        SaeConfig::new(Variant::BatchTopK, n, self.meta_m)
            .with_k(self.avg_k)
            .with_seed(self.seed)
    }

    fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs,
            dead_window: self.dead_window,
            init_from_data: self.init_from_data,
            restarts: self.restarts,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Decoder rows of a base SAE as a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderDataset<T> {
    pub batch: ActivationBatch<T>,
    /// Base latent index of each row.
    pub latents: Vec<usize>,
    /// Original norm of each row.
    pub norms: Vec<T>,
    /// Zero-norm rows dropped under normalization.
    pub excluded: Vec<usize>,
}

impl<T: Scalar> DecoderDataset<T> {
    /// Rescales rows back to their original norms.
    pub fn denormalize(&self, rows: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = rows.to_owned();
        for (mut r, &n) in out.rows_mut().into_iter().zip(&self.norms) {
            r.mapv_inplace(|v| v * n);
        }
        out
    }
}

pub fn extract_decoder_dataset<T: Scalar>(base: &Sae<T>, normalize: bool) -> Result<DecoderDataset<T>> {
    let norms_all = base.decoder_norms();
    let mut rows = Vec::new();
    let (mut latents, mut norms, mut excluded) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &norm) in norms_all.iter().enumerate() {
        let row = base.dec_rows.row(i);
        if normalize {
            if !(norm > T::zero()) {
                excluded.push(i);
                continue;
            }
            rows.push(row.mapv(|v| v / norm).to_vec());
        } else {
            rows.push(row.to_vec());
        }
        latents.push(i);
        norms.push(if normalize { norm } else { T::one() });
    }
    if rows.is_empty() {
        return Err(Error::Empty("decoder dataset"));
    }
    Ok(DecoderDataset {
        batch: ActivationBatch::from_rows(&rows, base.n())?,
        latents,
        norms,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaSae<T> {
    pub inner: Sae<T>,
    pub base_ref: String,
    pub normalize_rows: bool,
}

impl<T: Scalar> MetaSae<T> {
    pub fn meta_m(&self) -> usize {
        self.inner.m()
    }

    /// `1 - FVU` of the meta-SAE over the base decoder rows.
    pub fn variance_explained(&self, base: &Sae<T>) -> Result<f64> {
        let ds = extract_decoder_dataset(base, self.normalize_rows)?;
        variance_explained_on(&self.inner, &ds.batch)
    }
}

fn variance_explained_on<T: Scalar>(sae: &Sae<T>, rows: &ActivationBatch<T>) -> Result<f64> {
    let x = rows.data().view();
    let mse = batch_mse(x, sae.reconstruct_batch(x)?.view())?;
    let var = rows.total_variance().to_f64_lossy();
    if var <= 0.0 {
        return Err(Error::Empty("decoder rows with nonzero variance"));
    }
    Ok(1.0 - mse / var)
}

/// Trains a meta-SAE on `base`'s decoder rows.
pub fn train_meta<T: Scalar>(base: &Sae<T>, cfg: &MetaSaeConfig, base_ref: &str) -> Result<MetaSae<T>> {
    cfg.validate()?;
    let ds = extract_decoder_dataset(base, cfg.normalize_rows)?;
    let (inner, _) = train(cfg.sae_config(base.n()), cfg.train_config(cfg.epochs), &ds.batch)?;
    Ok(MetaSae {
        inner,
        base_ref: base_ref.to_string(),
        normalize_rows: cfg.normalize_rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaComponent {
    pub meta_latent: usize,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub latent_index: usize,
    /// Active meta-latents, largest coefficient first.
    pub components: Vec<MetaComponent>,
    /// `|row - recon|^2 / |row|^2` for this decoder row.
    pub fvu: f64,
}

/// Meta-latent code of one base decoder row.
pub fn decompose_latent<T: Scalar>(meta: &MetaSae<T>, base: &Sae<T>, i: usize) -> Result<Decomposition> {
    if i >= base.m() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: base.m(),
        });
    }
    check_dim(base.n(), meta.inner.n())?;
    let mut row = base.dec_rows.row(i).to_owned();
    if meta.normalize_rows {
        let norm = row.dot(&row).sqrt();
        if !(norm > T::zero()) {
            return Err(Error::DegenerateDirection { index: i });
        }
        row.mapv_inplace(|v| v / norm);
    }
    let acts = meta.inner.encode(row.view())?.acts;
    let recon = meta.inner.decode(acts.view())?;
    let mut components: Vec<MetaComponent> = acts
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > T::zero())
        .map(|(j, v)| MetaComponent {
            meta_latent: j,
            coefficient: v.to_f64_lossy(),
        })
        .collect();
    components.sort_by(|a, b| {
        b.coefficient
            .total_cmp(&a.coefficient)
            .then(a.meta_latent.cmp(&b.meta_latent))
    });
    let err: f64 = (&row - &recon).iter().map(|v| v.to_f64_lossy().powi(2)).sum();
    let energy: f64 = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum();
    Ok(Decomposition {
        latent_index: i,
        components,
        fvu: if energy > 0.0 { err / energy } else { f64::NAN },
    })
}

/// Maximum decoder cosine of each meta-latent to `other_rows`.
pub fn meta_alignment<T: Scalar>(meta: &MetaSae<T>, other_rows: ArrayView2<'_, T>) -> Result<Vec<f64>> {
    let cos = row_cosine_matrix(meta.inner.dec_rows.view(), other_rows)?;
    Ok(row_max(cos.view()).into_iter().map(|(c, _)| c).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Replacement<T> {
    pub meta: MetaSae<T>,
    /// Donor row index chosen for each meta-latent.
    pub mapping: Vec<usize>,
    pub variance_explained_before: f64,
    /// After swapping decoder rows, before retraining the encoder.
    pub variance_explained_replaced: f64,
    pub variance_explained_after: f64,
}

/// Replaces each meta decoder row by its most cosine-similar donor row
/// (rescaled to the replaced row's norm), freezes the decoder directions and
/// retrains the encoder and decoder bias for `retrain_epochs`. Encoder rows
/// whose decoder row changed restart tied to the new unit direction.
pub fn decoder_replacement_retrain<T: Scalar>(
    meta: &MetaSae<T>,
    base: &Sae<T>,
    donor_rows: ArrayView2<'_, T>,
    cfg: &MetaSaeConfig,
    retrain_epochs: usize,
) -> Result<Replacement<T>> {
    check_dim(meta.inner.n(), donor_rows.ncols())?;
    let ds = extract_decoder_dataset(base, meta.normalize_rows)?;
    let before = variance_explained_on(&meta.inner, &ds.batch)?;

    let cos = row_cosine_matrix(meta.inner.dec_rows.view(), donor_rows)?;
    let mapping: Vec<usize> = row_max(cos.view())
        .into_iter()
        .map(|(_, j)| j.ok_or(Error::Empty("donor rows")))
        .collect::<Result<_>>()?;
    let mut inner = meta.inner.clone();
    for (i, &j) in mapping.iter().enumerate() {
        let old = inner.dec_rows.row(i);
        let donor_norm = donor_rows.row(j).dot(&donor_rows.row(j)).sqrt();
        let scale = old.dot(&old).sqrt() / donor_norm;
        let new: Array1<T> = donor_rows.row(j).mapv(|v| v * scale);
        if new != old {
            // the old encoder row was fit to another direction; re-tie it
            inner
                .enc_weights
                .row_mut(i)
                .assign(&donor_rows.row(j).mapv(|v| v / donor_norm));
            inner.enc_bias[i] = T::zero();
        }
        inner.dec_rows.row_mut(i).assign(&new);
    }
    let replaced = variance_explained_on(&inner, &ds.batch)?;

    if retrain_epochs > 0 {
        let tc = TrainConfig {
            freeze_decoder: true,
            ..cfg.train_config(retrain_epochs)
        };
        let mut trainer = Trainer::with_sae(inner, tc, &ds.batch)?;
        trainer.run()?;
        inner = trainer.finish().0;
    }
    let after = variance_explained_on(&inner, &ds.batch)?;
    Ok(Replacement {
        meta: MetaSae {
            inner,
            base_ref: meta.base_ref.clone(),
            normalize_rows: meta.normalize_rows,
        },
        mapping,
        variance_explained_before: before,
        variance_explained_replaced: replaced,
        variance_explained_after: after,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Base,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub base: usize,
    pub meta: usize,
    pub weight: f64,
}

/// Bipartite base-latent / meta-latent graph weighted by coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionGraph {
    pub base_ref: String,
    pub variance_explained: f64,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub decompositions: Vec<Decomposition>,
    /// Base latents with zero-norm decoder rows, left without edges.
    pub excluded: Vec<usize>,
}

pub fn decomposition_graph<T: Scalar>(meta: &MetaSae<T>, base: &Sae<T>) -> Result<DecompositionGraph> {
    let node = |kind, index| GraphNode {
        id: match kind {
            NodeKind::Base => format!("base:{index}"),
            NodeKind::Meta => format!("meta:{index}"),
        },
        kind,
        index,
    };
    let mut nodes: Vec<GraphNode> = (0..base.m()).map(|i| node(NodeKind::Base, i)).collect();
    nodes.extend((0..meta.meta_m()).map(|j| node(NodeKind::Meta, j)));
    let mut edges = Vec::new();
    let mut decompositions = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..base.m() {
        match decompose_latent(meta, base, i) {
            Ok(d) => {
                edges.extend(d.components.iter().map(|c| GraphEdge {
                    base: i,
                    meta: c.meta_latent,
                    weight: c.coefficient,
                }));
                decompositions.push(d);
            }
            Err(Error::DegenerateDirection { .. }) => excluded.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok(DecompositionGraph {
        base_ref: meta.base_ref.clone(),
        variance_explained: meta.variance_explained(base)?,
        nodes,
        edges,
        decompositions,
        excluded,
    })
}

pub fn write_graph(graph: &DecompositionGraph, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(graph)?)
}
