//! Reconstruction error, sparsity, cosine similarity and ROC utilities shared
//! by the analysis modules.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Mean over rows of the squared L2 distance between `x` and `x_hat`.
pub fn batch_mse<T: Scalar>(x: ArrayView2<'_, T>, x_hat: ArrayView2<'_, T>) -> Result<f64> {
    check_dim(x.nrows(), x_hat.nrows())?;
    check_dim(x.ncols(), x_hat.ncols())?;
    if x.nrows() == 0 {
        return Err(Error::Empty("mse data"));
    }
    let total: f64 = per_row_sq_error(x, x_hat).iter().sum();
    Ok(total / x.nrows() as f64)
}

/// Squared L2 reconstruction error of each row.
pub fn per_row_sq_error<T: Scalar>(x: ArrayView2<'_, T>, x_hat: ArrayView2<'_, T>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .zip(x_hat.rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(p, q)| {
                    let d = (*p - *q).to_f64_lossy();
                    d * d
                })
                .sum()
        })
        .collect()
}

/// Mean number of nonzero entries per row.
pub fn mean_l0<T: Scalar>(acts: ArrayView2<'_, T>) -> f64 {
    if acts.nrows() == 0 {
        return 0.0;
    }
    let nnz = acts.iter().filter(|v| **v != T::zero()).count();
    nnz as f64 / acts.nrows() as f64
}

/// Cosine of every row of `a` against every row of `b` (`a.nrows() × b.nrows()`).
///
/// A zero-norm row in either input is an error naming its row index (rows of
/// `b` are reported offset by `a.nrows()`).
pub fn row_cosine_matrix<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_dim(a.ncols(), b.ncols())?;
    let unit = |m: ArrayView2<'_, T>, offset: usize| -> Result<Array2<T>> {
        let mut out = m.to_owned();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm > T::zero()) {
                return Err(Error::DegenerateDirection { index: i + offset });
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(out)
    };
    let ua = unit(a, 0)?;
    let ub = unit(b, a.nrows())?;
    let mut c = ua.dot(&ub.t());
    c.mapv_inplace(|v| v.max(-T::one()).min(T::one()));
    Ok(c)
}

/// Cosine similarity of two vectors; `None` when either is zero.
pub fn cosine<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Option<f64> {
    let na = a.dot(&a).to_f64_lossy().sqrt();
    let nb = b.dot(&b).to_f64_lossy().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(&b).to_f64_lossy() / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise maximum of a matrix, with its argmax. Empty rows give `(-inf, None)`.
pub fn row_max<T: Scalar>(c: ArrayView2<'_, T>) -> Vec<(f64, Option<usize>)> {
    c.rows()
        .into_iter()
        .map(|r| {
            r.iter().enumerate().fold((f64::NEG_INFINITY, None), |acc, (j, v)| {
                let v = v.to_f64_lossy();
                if v > acc.0 {
                    (v, Some(j))
                } else {
                    acc
                }
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Points with score `>= threshold` are predicted positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC sweep over every distinct score, highest first.
///
/// Tied scores enter together, so the trapezoidal AUC equals the
/// Mann-Whitney statistic with ties counted as one half.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    check_dim(scores.len(), labels.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::UndefinedRoc("no positive labels"));
    }
    if neg == 0 {
        return Err(Error::UndefinedRoc("no negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(Roc {
        points,
        auc: auc / (pos as f64 * neg as f64),
    })
}
