//! Auxiliary stitching measurements: isolated family swaps, MSE split by
//! novel-latent activity, decoder-bias exchange, activation similarity and
//! same-size overlap.

use serde::{Deserialize, Serialize};

use super::{classify_latents, Classification, LatentFamily, StitchEval, StitchState};
use crate::data::ActivationBatch;
use crate::error::{check_dim, Error, Result};
use crate::metrics::{batch_mse, cosine, per_row_sq_error};
use crate::sae::Sae;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapEffect {
    pub family: usize,
    pub delta_mse: f64,
    pub delta_l0: f64,
}

/// Swaps each family on its own, starting from the full small SAE.
pub fn swap_effect_stats<T: Scalar>(
    small: &Sae<T>,
    large: &Sae<T>,
    families: &[LatentFamily],
    data: &ActivationBatch<T>,
) -> Result<Vec<SwapEffect>> {
    let eval = StitchEval::new(small, large, data)?;
    let base = StitchState::all_small(small.m());
    let (base_mse, base_l0) = (eval.mse(&base)?, eval.mean_l0(&base));
    families
        .iter()
        .enumerate()
        .map(|(f, fam)| {
            let mut st = base.clone();
            for i in &fam.small_indices {
                st.kept_small.remove(i);
            }
            st.inserted_large.extend(fam.large_indices.iter().copied());
            Ok(SwapEffect {
                family: f,
                delta_mse: eval.mse(&st)? - base_mse,
                delta_l0: eval.mean_l0(&st) - base_l0,
            })
        })
        .collect()
}

/// Mean per-sample squared error of both SAEs on one partition of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseSplit {
    /// Large-SAE latent, or `None` for the union of all novel latents.
    pub latent: Option<usize>,
    pub active_count: usize,
    pub inactive_count: usize,
    pub small_active_mse: Option<f64>,
    pub small_inactive_mse: Option<f64>,
    pub large_active_mse: Option<f64>,
    pub large_inactive_mse: Option<f64>,
}

impl MseSplit {
    /// `active - inactive` for the small and large SAE, when both sides exist.
    pub fn gaps(&self) -> Option<(f64, f64)> {
        Some((
            self.small_active_mse? - self.small_inactive_mse?,
            self.large_active_mse? - self.large_inactive_mse?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NovelSplit {
    pub per_latent: Vec<MseSplit>,
    /// Partition by whether any novel latent is active.
    pub aggregate: Option<MseSplit>,
    /// Novel latents that never fire on the data.
    pub never_active: Vec<usize>,
}

fn split_means(err: &[f64], active: &[bool]) -> (usize, usize, Option<f64>, Option<f64>) {
    let (mut sa, mut na, mut si, mut ni) = (0.0, 0, 0.0, 0);
    for (e, a) in err.iter().zip(active) {
        if *a {
            sa += e;
            na += 1;
        } else {
            si += e;
            ni += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    (na, ni, mean(sa, na), mean(si, ni))
}

/// Reconstruction error of both SAEs on inputs where novel latents of the
/// large SAE are active versus inactive.
pub fn novel_active_mse_split<T: Scalar>(
    small: &Sae<T>,
    large: &Sae<T>,
    cls: &Classification,
    data: &ActivationBatch<T>,
) -> Result<NovelSplit> {
    let eval = StitchEval::new(small, large, data)?;
    let x = eval.x();
    let err_small = per_row_sq_error(x, eval.reconstruct(&StitchState::all_small(small.m()))?.view());
    let err_large = per_row_sq_error(x, eval.reconstruct(&StitchState::all_large(large.m()))?.view());
    let split = |latent: Option<usize>, active: &[bool]| {
        let (na, ni, sa, si) = split_means(&err_small, active);
        let (_, _, la, li) = split_means(&err_large, active);
        MseSplit {
            latent,
            active_count: na,
            inactive_count: ni,
            small_active_mse: sa,
            small_inactive_mse: si,
            large_active_mse: la,
            large_inactive_mse: li,
        }
    };

    let novel = cls.novel();
    let mut per_latent = Vec::new();
    let mut never_active = Vec::new();
    let mut any = vec![false; x.nrows()];
    for &j in &novel {
        let active: Vec<bool> = eval.large_acts.column(j).iter().map(|v| *v != T::zero()).collect();
        if !active.iter().any(|a| *a) {
            never_active.push(j);
            continue;
        }
        for (acc, a) in any.iter_mut().zip(&active) {
            *acc |= *a;
        }
        per_latent.push(split(Some(j), &active));
    }
    let aggregate = (!per_latent.is_empty()).then(|| split(None, &any));
    Ok(NovelSplit {
        per_latent,
        aggregate,
        never_active,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSwap {
    pub mse_a: f64,
    pub mse_b: f64,
    /// SAE `a` decoding with `b`'s decoder bias.
    pub mse_a_with_b_bias: f64,
    pub mse_b_with_a_bias: f64,
}

impl BiasSwap {
    pub fn relative_change_a(&self) -> f64 {
        (self.mse_a_with_b_bias - self.mse_a) / self.mse_a
    }

    pub fn relative_change_b(&self) -> f64 {
        (self.mse_b_with_a_bias - self.mse_b) / self.mse_b
    }
}

/// Exchanges only the decoder biases of two SAEs and re-evaluates MSE.
pub fn b_dec_swap_eval<T: Scalar>(a: &Sae<T>, b: &Sae<T>, data: &ActivationBatch<T>) -> Result<BiasSwap> {
    check_dim(a.n(), b.n())?;
    let x = data.data().view();
    let mse = |sae: &Sae<T>| -> Result<f64> { batch_mse(x, sae.reconstruct_batch(x)?.view()) };
    let mut a_swapped = a.clone();
    a_swapped.dec_bias = b.dec_bias.clone();
    let mut b_swapped = b.clone();
    b_swapped.dec_bias = a.dec_bias.clone();
    Ok(BiasSwap {
        mse_a: mse(a)?,
        mse_b: mse(b)?,
        mse_a_with_b_bias: mse(&a_swapped)?,
        mse_b_with_a_bias: mse(&b_swapped)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSimilarity {
    pub value: f64,
    /// Set when either latent never fires, in which case `value` is 0.
    pub degenerate: bool,
}

/// Cosine similarity between the activation vectors of latent `i` of `a` and
/// latent `j` of `b` over the data.
pub fn activation_similarity<T: Scalar>(
    a: &Sae<T>,
    i: usize,
    b: &Sae<T>,
    j: usize,
    data: &ActivationBatch<T>,
) -> Result<ActivationSimilarity> {
    if i >= a.m() {
        return Err(Error::IndexOutOfRange { index: i, len: a.m() });
    }
    if j >= b.m() {
        return Err(Error::IndexOutOfRange { index: j, len: b.m() });
    }
    if data.is_empty() {
        return Err(Error::Empty("activation similarity data"));
    }
    let x = data.data().view();
    let (_, fa) = a.encode_batch(x)?;
    let (_, fb) = b.encode_batch(x)?;
    Ok(match cosine(fa.column(i), fb.column(j)) {
        Some(value) => ActivationSimilarity {
            value,
            degenerate: false,
        },
        None => ActivationSimilarity {
            value: 0.0,
            degenerate: true,
        },
    })
}

/// Fraction of `b`'s latents that are reconstruction latents relative to `a`.
pub fn same_size_reconstruction_fraction<T: Scalar>(a: &Sae<T>, b: &Sae<T>, theta: f64) -> Result<f64> {
    let cls = classify_latents(a, b, theta)?;
    Ok(cls.reconstruction().len() as f64 / b.m() as f64)
}
