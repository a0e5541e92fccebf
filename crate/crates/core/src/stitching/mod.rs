//! Cross-SAE comparison by decoder cosine similarity and stitching.
//!
//! A stitched model reconstructs from a subset `L0` of a small SAE's latents
//! and a subset `L1` of a large SAE's latents, blending the decoder biases by
//! `alpha = |L0| / (|L0| + |L1|)`. Latent activations always come from each
//! SAE's own full encoder and are subset afterwards.

mod experiments;
mod report;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ActivationBatch;
use crate::error::{check_dim, Error, Result};
use crate::metrics::{batch_mse, row_cosine_matrix, row_max};
use crate::rng::{self, streams};
use crate::sae::Sae;
use crate::scalar::Scalar;

pub use experiments::{
    activation_similarity, b_dec_swap_eval, novel_active_mse_split, same_size_reconstruction_fraction,
    swap_effect_stats, ActivationSimilarity, BiasSwap, MseSplit, NovelSplit, SwapEffect,
};
pub use report::{build_report, trajectory_csv, write_report, write_trajectory_csv, StitchReport};

/// Default decoder-cosine threshold separating novel from reconstruction latents.
pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// `cos(dec_rows_a[i], dec_rows_b[j])` for every pair.
pub fn decoder_cosine_matrix<T: Scalar>(a: &Sae<T>, b: &Sae<T>) -> Result<Array2<T>> {
    check_dim(a.n(), b.n())?;
    row_cosine_matrix(a.dec_rows.view(), b.dec_rows.view())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentLabel {
    Novel,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    /// Index in the large SAE.
    pub index: usize,
    pub max_cos: f64,
    /// Small-SAE latent achieving `max_cos`.
    pub nearest_small: usize,
    pub label: LatentLabel,
    /// MSE change from adding this latent alone to the full small SAE.
    pub delta_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyEdge {
    pub small: usize,
    pub large: usize,
    pub cos: f64,
}

/// Connected component of the thresholded small/large similarity graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFamily {
    pub small_indices: Vec<usize>,
    pub large_indices: Vec<usize>,
    pub edges: Vec<FamilyEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub threshold: f64,
    pub latents: Vec<LatentRecord>,
    pub families: Vec<LatentFamily>,
}

impl Classification {
    pub fn novel(&self) -> Vec<usize> {
        self.with_label(LatentLabel::Novel)
    }

    pub fn reconstruction(&self) -> Vec<usize> {
        self.with_label(LatentLabel::Reconstruction)
    }

    fn with_label(&self, label: LatentLabel) -> Vec<usize> {
        self.latents
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.index)
            .collect()
    }

    /// Small latents with no edge to any large latent.
    pub fn orphan_small(&self, small_m: usize) -> Vec<usize> {
        let covered: BTreeSet<usize> = self
            .families
            .iter()
            .flat_map(|f| f.small_indices.iter().copied())
            .collect();
        (0..small_m).filter(|i| !covered.contains(i)).collect()
    }
}

fn check_threshold(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "stitch.threshold must be in (0, 1), got {theta}"
        )));
    }
    Ok(())
}

/// Labels each large latent by its maximum decoder cosine to the small SAE and
/// groups reconstruction latents into families.
pub fn classify_latents<T: Scalar>(small: &Sae<T>, large: &Sae<T>, theta: f64) -> Result<Classification> {
    check_threshold(theta)?;
    let cos = decoder_cosine_matrix(large, small)?;
    let latents = row_max(cos.view())
        .into_iter()
        .enumerate()
        .map(|(j, (max_cos, arg))| LatentRecord {
            index: j,
            max_cos,
            nearest_small: arg.unwrap_or(0),
            label: if max_cos < theta {
                LatentLabel::Novel
            } else {
                LatentLabel::Reconstruction
            },
            delta_mse: None,
        })
        .collect();
    let edges: Vec<FamilyEdge> = cos
        .indexed_iter()
        .filter(|(_, c)| c.to_f64_lossy() >= theta)
        .map(|((large, small), c)| FamilyEdge {
            small,
            large,
            cos: c.to_f64_lossy(),
        })
        .collect();
    Ok(Classification {
        threshold: theta,
        latents,
        families: families_from_edges(small.m(), edges),
    })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of a bipartite graph given by its edges. Nodes
/// `0..small_m` are small latents; large latent `j` is node `small_m + j`.
/// Families are ordered by their smallest large index.
pub fn families_from_edges(small_m: usize, edges: Vec<FamilyEdge>) -> Vec<LatentFamily> {
    let large_m = edges.iter().map(|e| e.large + 1).max().unwrap_or(0);
    let mut uf = UnionFind::new(small_m + large_m);
    for e in &edges {
        uf.union(e.small, small_m + e.large);
    }
    let mut by_root: std::collections::BTreeMap<usize, LatentFamily> = Default::default();
    for e in edges {
        let root = uf.find(e.small);
        let fam = by_root.entry(root).or_insert_with(|| LatentFamily {
            small_indices: Vec::new(),
            large_indices: Vec::new(),
            edges: Vec::new(),
        });
        fam.small_indices.push(e.small);
        fam.large_indices.push(e.large);
        fam.edges.push(e);
    }
    let mut families: Vec<LatentFamily> = by_root
        .into_values()
        .map(|mut f| {
            f.small_indices.sort_unstable();
            f.small_indices.dedup();
            f.large_indices.sort_unstable();
            f.large_indices.dedup();
            f.edges.sort_by_key(|e| (e.small, e.large));
            f
        })
        .collect();
    families.sort_by_key(|f| f.large_indices[0]);
    families
}

/// Which latents of each SAE participate in a stitched reconstruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchState {
    pub kept_small: BTreeSet<usize>,
    pub inserted_large: BTreeSet<usize>,
}

impl StitchState {
    pub fn new(kept_small: BTreeSet<usize>, inserted_large: BTreeSet<usize>) -> Result<Self> {
        if kept_small.is_empty() && inserted_large.is_empty() {
            return Err(Error::InvalidConfig("stitch state needs at least one latent".into()));
        }
        Ok(Self {
            kept_small,
            inserted_large,
        })
    }

    /// Every small latent, no large latent.
    pub fn all_small(small_m: usize) -> Self {
        Self {
            kept_small: (0..small_m).collect(),
            inserted_large: BTreeSet::new(),
        }
    }

    pub fn all_large(large_m: usize) -> Self {
        Self {
            kept_small: BTreeSet::new(),
            inserted_large: (0..large_m).collect(),
        }
    }

    pub fn alpha(&self) -> f64 {
        let (a, b) = (self.kept_small.len(), self.inserted_large.len());
        a as f64 / (a + b) as f64
    }

    fn check(&self, small_m: usize, large_m: usize) -> Result<()> {
        if self.kept_small.is_empty() && self.inserted_large.is_empty() {
            return Err(Error::InvalidConfig("stitch state needs at least one latent".into()));
        }
        if let Some(&i) = self.kept_small.iter().next_back().filter(|&&i| i >= small_m) {
            return Err(Error::IndexOutOfRange { index: i, len: small_m });
        }
        if let Some(&j) = self.inserted_large.iter().next_back().filter(|&&j| j >= large_m) {
            return Err(Error::IndexOutOfRange { index: j, len: large_m });
        }
        Ok(())
    }
}

fn blend_into<T: Scalar>(
    out: &mut ndarray::ArrayViewMut1<'_, T>,
    state: &StitchState,
    small: &Sae<T>,
    large: &Sae<T>,
    f0: ArrayView1<'_, T>,
    f1: ArrayView1<'_, T>,
) {
    let alpha = T::lit(state.alpha());
    let beta = T::one() - alpha;
    out.assign(&small.dec_bias.mapv(|v| alpha * v));
    out.scaled_add(beta, &large.dec_bias);
    for &i in &state.kept_small {
        if f0[i] != T::zero() {
            out.scaled_add(f0[i], &small.dec_rows.row(i));
        }
    }
    for &j in &state.inserted_large {
        if f1[j] != T::zero() {
            out.scaled_add(f1[j], &large.dec_rows.row(j));
        }
    }
}

/// Stitched reconstruction of one input.
pub fn stitched_reconstruct<T: Scalar>(
    small: &Sae<T>,
    large: &Sae<T>,
    state: &StitchState,
    x: ArrayView1<'_, T>,
) -> Result<Array1<T>> {
    check_dim(small.n(), large.n())?;
    state.check(small.m(), large.m())?;
    let f0 = small.encode(x)?.acts;
    let f1 = large.encode(x)?.acts;
    let mut out = Array1::zeros(small.n());
    blend_into(&mut out.view_mut(), state, small, large, f0.view(), f1.view());
    Ok(out)
}

/// Both SAEs' inference activations on a fixed dataset, for evaluating many
/// stitch states without re-encoding.
pub struct StitchEval<'a, T> {
    pub small: &'a Sae<T>,
    pub large: &'a Sae<T>,
    x: ArrayView2<'a, T>,
    pub small_acts: Array2<T>,
    pub large_acts: Array2<T>,
}

impl<'a, T: Scalar> StitchEval<'a, T> {
    pub fn new(small: &'a Sae<T>, large: &'a Sae<T>, data: &'a ActivationBatch<T>) -> Result<Self> {
        check_dim(small.n(), large.n())?;
        if data.is_empty() {
            return Err(Error::Empty("stitching data"));
        }
        let x = data.data().view();
        let (_, small_acts) = small.encode_batch(x)?;
        let (_, large_acts) = large.encode_batch(x)?;
        Ok(Self {
            small,
            large,
            x,
            small_acts,
            large_acts,
        })
    }

    pub fn x(&self) -> ArrayView2<'a, T> {
        self.x
    }

    pub fn reconstruct(&self, state: &StitchState) -> Result<Array2<T>> {
        state.check(self.small.m(), self.large.m())?;
        let mut out = Array2::zeros(self.x.dim());
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            blend_into(
                &mut row,
                state,
                self.small,
                self.large,
                self.small_acts.row(r),
                self.large_acts.row(r),
            );
        }
        Ok(out)
    }

    pub fn mse(&self, state: &StitchState) -> Result<f64> {
        batch_mse(self.x, self.reconstruct(state)?.view())
    }

    /// Mean count of active latents among those the state includes.
    pub fn mean_l0(&self, state: &StitchState) -> f64 {
        let count = |acts: &Array2<T>, set: &BTreeSet<usize>| -> usize {
            acts.rows()
                .into_iter()
                .map(|r| set.iter().filter(|&&i| r[i] != T::zero()).count())
                .sum()
        };
        let nnz = count(&self.small_acts, &state.kept_small) + count(&self.large_acts, &state.inserted_large);
        nnz as f64 / self.x.nrows() as f64
    }

    /// `MSE(all small + {j}) - MSE(all small)` for every large latent `j`.
    ///
    /// Uses the expansion `|r - f d|^2 = |r|^2 - 2 f (r . d) + f^2 |d|^2`
    /// around the shared residual, so the cost is one dense product.
    pub fn per_latent_add_effect(&self) -> Result<Vec<f64>> {
        let (small, large) = (self.small, self.large);
        let base = self.mse(&StitchState::all_small(small.m()))?;
        let a = small.m() as f64 / (small.m() + 1) as f64;
        let bias =
            small.dec_bias.mapv(|v| v.to_f64_lossy() * a) + large.dec_bias.mapv(|v| v.to_f64_lossy() * (1.0 - a));
        let x = self.x.mapv(|v| v.to_f64_lossy());
        let f0 = self.small_acts.mapv(|v| v.to_f64_lossy());
        let d0 = small.dec_rows.mapv(|v| v.to_f64_lossy());
        let resid = x - f0.dot(&d0) - &bias;
        let b = self.x.nrows() as f64;
        let resid_sq: f64 = resid.iter().map(|v| v * v).sum::<f64>() / b;
        let d1 = large.dec_rows.mapv(|v| v.to_f64_lossy());
        let proj = resid.dot(&d1.t());
        let d1_sq: Vec<f64> = d1.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut out = Vec::with_capacity(large.m());
        for j in 0..large.m() {
            let mut extra = 0.0;
            for r in 0..self.x.nrows() {
                let f = self.large_acts[[r, j]].to_f64_lossy();
                if f != 0.0 {
                    extra += f * f * d1_sq[j] - 2.0 * f * proj[[r, j]];
                }
            }
            out.push(resid_sq + extra / b - base);
        }
        Ok(out)
    }
}

/// ΔMSE of adding each large latent alone to the full small SAE; negative
/// values mean the latent improves reconstruction.
pub fn per_latent_add_effect<T: Scalar>(small: &Sae<T>, large: &Sae<T>, data: &ActivationBatch<T>) -> Result<Vec<f64>> {
    StitchEval::new(small, large, data)?.per_latent_add_effect()
}

/// ROC of `-max_cos` as a predictor of `delta_mse < 0`.
pub fn roc_for_threshold(delta_mse: &[f64], max_cos: &[f64]) -> Result<crate::metrics::Roc> {
    check_dim(delta_mse.len(), max_cos.len())?;
    let labels: Vec<bool> = delta_mse.iter().map(|d| *d < 0.0).collect();
    let scores: Vec<f64> = max_cos.iter().map(|c| -c).collect();
    crate::metrics::roc_curve(&scores, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Start,
    AddNovel,
    SwapFamily,
    RemoveOrphan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub phase: Phase,
    pub description: String,
    pub mean_l0: f64,
    pub mse: f64,
}

/// Walks from the small SAE to the large one: novel latents are added one at
/// a time, then each family swaps its small latents for its large ones, then
/// small latents without any family are removed. Each phase runs in a random
/// order drawn from `order_seed`.
pub fn interpolate<T: Scalar>(
    small: &Sae<T>,
    large: &Sae<T>,
    data: &ActivationBatch<T>,
    theta: f64,
    order_seed: u64,
) -> Result<Vec<TrajectoryPoint>> {
    let cls = classify_latents(small, large, theta)?;
    let eval = StitchEval::new(small, large, data)?;
    interpolate_with(&eval, &cls, order_seed)
}

pub fn interpolate_with<T: Scalar>(
    eval: &StitchEval<'_, T>,
    cls: &Classification,
    order_seed: u64,
) -> Result<Vec<TrajectoryPoint>> {
    let mut rng = rng::stream(order_seed, streams::ORDER);
    let mut state = StitchState::all_small(eval.small.m());
    let mut out = Vec::new();
    let mut record = |state: &StitchState, phase: Phase, description: String| -> Result<()> {
        out.push(TrajectoryPoint {
            step: out.len(),
            phase,
            description,
            mean_l0: eval.mean_l0(state),
            mse: eval.mse(state)?,
        });
        Ok(())
    };
    record(&state, Phase::Start, "small".into())?;

    let mut novel = cls.novel();
    novel.shuffle(&mut rng);
    for j in novel {
        state.inserted_large.insert(j);
        record(&state, Phase::AddNovel, format!("add large {j}"))?;
    }

    let mut fams: Vec<usize> = (0..cls.families.len()).collect();
    fams.shuffle(&mut rng);
    for f in fams {
        let fam = &cls.families[f];
        for i in &fam.small_indices {
            state.kept_small.remove(i);
        }
        state.inserted_large.extend(fam.large_indices.iter().copied());
        record(
            &state,
            Phase::SwapFamily,
            format!("swap small {:?} for large {:?}", fam.small_indices, fam.large_indices),
        )?;
    }

    let mut orphans = cls.orphan_small(eval.small.m());
    orphans.shuffle(&mut rng);
    for i in orphans {
        state.kept_small.remove(&i);
        record(&state, Phase::RemoveOrphan, format!("remove small {i}"))?;
    }
    Ok(out)
}
