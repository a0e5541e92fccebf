use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::Sae;
use crate::data::{batch_iter, ActivationBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Descending by value, ties by ascending index.
fn rank<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Indices of the `keep` best positive candidates.
fn select_positive<T: Scalar>(mut cand: Vec<(T, usize)>, keep: usize) -> Vec<(T, usize)> {
    if cand.len() > keep {
        if keep == 0 {
            return Vec::new();
        }
        cand.select_nth_unstable_by(keep - 1, rank);
        cand.truncate(keep);
    }
    cand
}

/// Keeps the `k` largest positive entries of one row; ties go to the lower index.
pub fn topk_row<T: Scalar>(z: ArrayView1<'_, T>, k: usize) -> Array1<T> {
    let cand: Vec<(T, usize)> = z
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > T::zero())
        .map(|(i, v)| (*v, i))
        .collect();
    let mut out = Array1::zeros(z.len());
    for (v, i) in select_positive(cand, k) {
        out[i] = v;
    }
    out
}

/// Keeps the `b·k` largest positive entries across the whole batch.
///
/// Ties are broken by row-major position, lowest first.
pub fn batchtopk_sparsify<T: Scalar>(z: ArrayView2<'_, T>, k: usize) -> Array2<T> {
    let (b, m) = z.dim();
    let cand: Vec<(T, usize)> = z
        .indexed_iter()
        .filter(|(_, v)| **v > T::zero())
        .map(|((r, c), v)| (*v, r * m + c))
        .collect();
    let mut out = Array2::zeros((b, m));
    for (v, flat) in select_positive(cand, b * k) {
        out[[flat / m, flat % m]] = v;
    }
    out
}

/// Running mean of the per-batch minimum kept activation.
#[derive(Clone, Debug, Default)]
pub struct ThresholdEstimator {
    sum: f64,
    batches: usize,
}

impl ThresholdEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one batch of post-sparsification activations. Batches with no
    /// positive entry do not contribute.
    pub fn push<T: Scalar>(&mut self, kept: ArrayView2<'_, T>) {
        let min = kept
            .iter()
            .filter(|v| **v > T::zero())
            .fold(None::<T>, |acc, &v| Some(acc.map_or(v, |a| a.min(v))));
        if let Some(v) = min {
            self.sum += v.to_f64_lossy();
            self.batches += 1;
        }
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn finish<T: Scalar>(&self) -> Result<T> {
        if self.batches == 0 {
            return Err(Error::DegenerateThreshold);
        }
        Ok(T::lit(self.sum / self.batches as f64))
    }
}

/// Mean over mini-batches of the smallest activation BatchTopK keeps.
pub fn estimate_batchtopk_threshold<T: Scalar>(
    sae: &Sae<T>,
    data: &ActivationBatch<T>,
    k: usize,
    batch_size: usize,
) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty("threshold estimation data"));
    }
    let mut est = ThresholdEstimator::new();
    for batch in batch_iter(data, batch_size, false, 0)? {
        let z = sae.pre_activations_batch(batch.data().view())?;
        est.push(batchtopk_sparsify(z.view(), k).view());
    }
    est.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn batch_of_one_is_topk() {
        let z = array![[0.3, 2.0, -1.0, 1.5, 0.9]];
        let kept = batchtopk_sparsify(z.view(), 2);
        assert_eq!(kept.row(0), topk_row(z.row(0), 2));
        assert_eq!(kept, array![[0.0, 2.0, 0.0, 1.5, 0.0]]);
    }

    #[test]
    fn global_selection_across_rows() {
        let z = array![[5.0, 0.0], [0.0, 1.0]];
        assert_eq!(batchtopk_sparsify(z.view(), 1), z);
        let z = array![[5.0, 4.0], [0.5, 1.0]];
        assert_eq!(batchtopk_sparsify(z.view(), 1), array![[5.0, 4.0], [0.0, 0.0]]);
    }

    #[test]
    fn fewer_positives_than_budget() {
        let z = array![[-1.0, 0.2], [0.0, -3.0]];
        assert_eq!(batchtopk_sparsify(z.view(), 2), array![[0.0, 0.2], [0.0, 0.0]]);
    }

    #[test]
    fn topk_ties_prefer_low_index() {
        assert_eq!(
            topk_row(array![1.0, 2.0, 2.0, 2.0].view(), 2),
            array![0.0, 2.0, 2.0, 0.0]
        );
    }

    #[test]
    fn threshold_is_mean_of_batch_minima() {
        let mut est = ThresholdEstimator::new();
        est.push(array![[0.5, 2.0], [1.0, 0.0]].view());
        assert_eq!(est.finish::<f64>().unwrap(), 0.5);
        let mut est = ThresholdEstimator::new();
        est.push(array![[0.4, 0.0]].view());
        est.push(array![[0.0, 0.6], [0.0, 0.0]].view());
        est.push(array![[0.0, 0.0]].view());
        assert!((est.finish::<f64>().unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            ThresholdEstimator::new().finish::<f64>(),
            Err(Error::DegenerateThreshold)
        ));
    }
}
