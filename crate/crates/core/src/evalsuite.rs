//! Core reconstruction metrics, sparse probing and targeted probe
//! perturbation (TPP).
//!
//! Probes are L2-regularized logistic regressions fitted by damped Newton
//! iterations in `f64`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::ActivationBatch;
use crate::error::{check_dim, Error, Result};
use crate::io::write_atomic;
use crate::metrics::{batch_mse, mean_l0};
use crate::rng::{self, streams};
use crate::sae::Sae;
use crate::scalar::Scalar;

pub const PROBE_L2: f64 = 1e-3;
pub const PROBE_MAX_ITERS: usize = 500;
pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub mse: f64,
    pub mean_l0: f64,
    pub fvu: f64,
}

/// MSE, mean L0 and fraction of variance unexplained on `data`.
pub fn core_metrics<T: Scalar>(sae: &Sae<T>, data: &ActivationBatch<T>) -> Result<CoreMetrics> {
    check_dim(sae.n(), data.n_dims())?;
    let x = data.data().view();
    let (_, f) = sae.encode_batch(x)?;
    let mse = batch_mse(x, sae.decode_batch(f.view())?.view())?;
    let var = data.total_variance().to_f64_lossy();
    Ok(CoreMetrics {
        mse,
        mean_l0: mean_l0(f.view()),
        fvu: if var > 0.0 { mse / var } else { f64::NAN },
    })
}

/// Binary logistic model `p(y=1|x) = sigmoid(w.x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    pub fn logit(&self, x: ArrayView1<'_, f64>) -> f64 {
        x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> bool {
        self.logit(x) >= 0.0
    }

    pub fn accuracy(&self, x: ArrayView2<'_, f64>, y: &[bool]) -> f64 {
        if y.is_empty() {
            return f64::NAN;
        }
        let hits = x
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(r, l)| self.predict(*r) == **l)
            .count();
        hits as f64 / y.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub probe: LogisticProbe,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean log loss plus `l2/2 |w|^2` (bias unregularized).
fn logistic_loss(x: &DMatrix<f64>, y: &[f64], theta: &DVector<f64>, l2: f64) -> f64 {
    let d = x.ncols();
    let z = x * theta.rows(0, d) + DVector::from_element(x.nrows(), theta[d]);
    let data: f64 = z.iter().zip(y).map(|(z, y)| log1p_exp(*z) - y * z).sum::<f64>() / x.nrows() as f64;
    data + 0.5 * l2 * theta.rows(0, d).norm_squared()
}

/// Fits an L2-regularized logistic regression by Newton's method with
/// backtracking, stopping when the gradient norm drops below 1e-6 or after
/// 500 iterations.
pub fn fit_logistic(x: ArrayView2<'_, f64>, y: &[bool], l2: f64) -> Result<LogisticFit> {
    check_dim(x.nrows(), y.len())?;
    if y.is_empty() {
        return Err(Error::Empty("probe training data"));
    }
    let (n, d) = x.dim();
    let xm = DMatrix::from_fn(n, d, |i, j| x[[i, j]]);
    let yv: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut theta = DVector::<f64>::zeros(d + 1);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..PROBE_MAX_ITERS {
        let z = &xm * theta.rows(0, d) + DVector::from_element(n, theta[d]);
        let p: Vec<f64> = z.iter().map(|v| sigmoid(*v)).collect();
        let r = DVector::from_iterator(n, p.iter().zip(&yv).map(|(p, y)| p - y));
        let mut g = DVector::zeros(d + 1);
        g.rows_mut(0, d)
            .copy_from(&(xm.transpose() * &r / n as f64 + theta.rows(0, d) * l2));
        g[d] = r.sum() / n as f64;
        grad_norm = g.norm();
        iterations = it;
        if !grad_norm.is_finite() {
            return Err(Error::ProbeDiverged);
        }
        if grad_norm < PROBE_GRAD_TOL {
            break;
        }

        let s: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
        let mut xa = DMatrix::from_element(n, d + 1, 1.0);
        xa.columns_mut(0, d).copy_from(&xm);
        let mut xs = xa.clone();
        for (i, si) in s.iter().enumerate() {
            xs.row_mut(i).scale_mut(*si);
        }
        let mut h = xa.transpose() * xs / n as f64;
        for k in 0..d {
            h[(k, k)] += l2;
        }
        for k in 0..=d {
            h[(k, k)] += 1e-12;
        }
        let step = match h.cholesky() {
            Some(ch) => ch.solve(&g),
            None => g.clone(),
        };
        let f0 = logistic_loss(&xm, &yv, &theta, l2);
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            if logistic_loss(&xm, &yv, &cand, l2) <= f0 - 1e-4 * t * slope || t < 1e-10 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
        iterations = it + 1;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::ProbeDiverged);
    }
    Ok(LogisticFit {
        probe: LogisticProbe {
            weights: theta.rows(0, d).iter().copied().collect(),
            bias: theta[d],
        },
        iterations,
        grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub selected: Vec<usize>,
    pub probe: LogisticProbe,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn split_indices(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::stream(seed, streams::PROBE));
    let n_test = (count as f64 * PROBE_TEST_FRACTION).round() as usize;
    let test = order[..n_test].to_vec();
    let train = order[n_test..].to_vec();
    (train, test)
}

fn class_means(acts: ArrayView2<'_, f64>, rows: &[usize], y: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let m = acts.ncols();
    let (mut pos, mut neg) = (vec![0.0; m], vec![0.0; m]);
    let (mut np, mut nn) = (0usize, 0usize);
    for &r in rows {
        let (acc, cnt) = if y[r] { (&mut pos, &mut np) } else { (&mut neg, &mut nn) };
        *cnt += 1;
        for (a, v) in acc.iter_mut().zip(acts.row(r)) {
            *a += v;
        }
    }
    pos.iter_mut().for_each(|v| *v /= np.max(1) as f64);
    neg.iter_mut().for_each(|v| *v /= nn.max(1) as f64);
    (pos, neg)
}

/// Logistic probe on the `top_n` latents whose class-conditional mean
/// activations differ most, fitted on an 80% split and scored on the rest.
pub fn sparse_probe<T: Scalar>(
    sae: &Sae<T>,
    data: &ActivationBatch<T>,
    labels: &[bool],
    top_n: usize,
    seed: u64,
) -> Result<ProbeResult> {
    check_dim(data.count(), labels.len())?;
    if top_n == 0 {
        return Err(Error::InvalidConfig("eval.top_n must be >= 1".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass("probe labels".into()));
    }
    let (_, f) = sae.encode_batch(data.data().view())?;
    let f = f.mapv(|v| v.to_f64_lossy());
    let (train, test) = split_indices(data.count(), seed);
    let (mp, mn) = class_means(f.view(), &train, labels);
    let mut ranked: Vec<(f64, usize)> = (0..sae.m())
        .filter(|&l| f.column(l).iter().any(|v| *v != 0.0))
        .map(|l| ((mp[l] - mn[l]).abs(), l))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut selected: Vec<usize> = ranked.into_iter().take(top_n).map(|(_, l)| l).collect();
    selected.sort_unstable();
    if selected.is_empty() {
        return Err(Error::Empty("active latents for probing"));
    }

    let sub = |rows: &[usize]| f.select(Axis(0), rows).select(Axis(1), &selected);
    let ys = |rows: &[usize]| rows.iter().map(|&r| labels[r]).collect::<Vec<_>>();
    let (xtr, ytr) = (sub(&train), ys(&train));
    let (xte, yte) = (sub(&test), ys(&test));
    let fit = fit_logistic(xtr.view(), &ytr, PROBE_L2)?;
    Ok(ProbeResult {
        selected,
        train_accuracy: fit.probe.accuracy(xtr.view(), &ytr),
        test_accuracy: fit.probe.accuracy(xte.view(), &yte),
        probe: fit.probe,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TppResult {
    /// `accuracy[i][j]`: probe `j` on reconstructions with `selected[i]` ablated.
    pub accuracy: Vec<Vec<f64>>,
    /// Probe `j` on unablated reconstructions.
    pub baseline: Vec<f64>,
    /// `baseline[j] - accuracy[i][j]`.
    pub drop: Vec<Vec<f64>>,
    /// Mean diagonal drop minus mean off-diagonal drop.
    pub s_tpp: f64,
    pub selected: Vec<Vec<usize>>,
}

/// Positive rows of class `c` plus an equal number of others drawn at random.
fn one_vs_rest(rows: &[usize], classes: &[usize], c: usize, rng: &mut impl rand::Rng) -> (Vec<usize>, Vec<bool>) {
    let pos: Vec<usize> = rows.iter().copied().filter(|&r| classes[r] == c).collect();
    let others: Vec<usize> = rows.iter().copied().filter(|&r| classes[r] != c).collect();
    let neg: Vec<usize> = others
        .choose_multiple(rng, pos.len().min(others.len()))
        .copied()
        .collect();
    let mut idx = pos.clone();
    idx.extend(&neg);
    let mut y = vec![true; pos.len()];
    y.extend(std::iter::repeat_n(false, neg.len()));
    (idx, y)
}

/// Reconstructions with the given latents zeroed before decoding.
pub fn ablated_reconstruction<T: Scalar>(sae: &Sae<T>, x: ArrayView2<'_, T>, ablate: &[usize]) -> Result<Array2<f64>> {
    let (_, mut f) = sae.encode_batch(x)?;
    for &l in ablate {
        if l >= sae.m() {
            return Err(Error::IndexOutOfRange { index: l, len: sae.m() });
        }
        f.column_mut(l).fill(T::zero());
    }
    Ok(sae.decode_batch(f.view())?.mapv(|v| v.to_f64_lossy()))
}

/// Targeted probe perturbation over `n_classes` classes.
///
/// One-vs-rest probes are trained on the input activations. For class `i`,
/// latent `l` scores `(mean_pos_l - mean_neg_l) * (d_l . P_i)`; the
/// `n_ablate` highest-scoring latents are zeroed and every probe is evaluated
/// on the resulting reconstructions.
pub fn tpp<T: Scalar>(
    sae: &Sae<T>,
    data: &ActivationBatch<T>,
    classes: &[usize],
    n_classes: usize,
    n_ablate: usize,
    seed: u64,
) -> Result<TppResult> {
    check_dim(data.count(), classes.len())?;
    check_dim(sae.n(), data.n_dims())?;
    if n_classes < 2 {
        return Err(Error::InvalidConfig("eval.tpp needs at least 2 classes".into()));
    }
    if n_ablate == 0 {
        return Err(Error::InvalidConfig("eval.n_ablate must be >= 1".into()));
    }
    for c in 0..n_classes {
        let n = classes.iter().filter(|&&k| k == c).count();
        if n < 2 {
            return Err(Error::SingleClass(format!("class {c} has {n} samples, need >= 2")));
        }
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= n_classes) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: n_classes,
        });
    }

    let x = data.data().view();
    let x64 = x.mapv(|v| v.to_f64_lossy());
    let (_, f) = sae.encode_batch(x)?;
    let f = f.mapv(|v| v.to_f64_lossy());
    let dec = sae.dec_rows.mapv(|v| v.to_f64_lossy());
    let (train, test) = split_indices(data.count(), seed);
    let mut rng = rng::stream(seed, streams::PROBE ^ 0x7070);

    let mut probes = Vec::with_capacity(n_classes);
    let mut test_sets = Vec::with_capacity(n_classes);
    let mut selected = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let (rows, y) = one_vs_rest(&train, classes, c, &mut rng);
        let fit = fit_logistic(x64.select(Axis(0), &rows).view(), &y, PROBE_L2)?;
        let p = ndarray::Array1::from(fit.probe.weights.clone());

        let mut yfull = vec![false; data.count()];
        for (r, l) in rows.iter().zip(&y) {
            yfull[*r] = *l;
        }
        let (mp, mn) = class_means(f.view(), &rows, &yfull);
        let dp = dec.dot(&p);
        let mut scored: Vec<(f64, usize)> = (0..sae.m()).map(|l| ((mp[l] - mn[l]) * dp[l], l)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut li: Vec<usize> = scored.into_iter().take(n_ablate).map(|(_, l)| l).collect();
        li.sort_unstable();
        selected.push(li);
        probes.push(fit.probe);
        test_sets.push(one_vs_rest(&test, classes, c, &mut rng));
    }

    let eval_all = |ablate: &[usize]| -> Result<Vec<f64>> {
        let recon = ablated_reconstruction(sae, x, ablate)?;
        Ok(probes
            .iter()
            .zip(&test_sets)
            .map(|(p, (rows, y))| p.accuracy(recon.select(Axis(0), rows).view(), y))
            .collect())
    };
    let baseline = eval_all(&[])?;
    let accuracy: Vec<Vec<f64>> = selected.iter().map(|li| eval_all(li)).collect::<Result<_>>()?;
    let drop: Vec<Vec<f64>> = accuracy
        .iter()
        .map(|row| row.iter().zip(&baseline).map(|(a, b)| b - a).collect())
        .collect();
    let (mut diag, mut off) = (0.0, 0.0);
    for (i, row) in drop.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let mm = n_classes as f64;
    Ok(TppResult {
        accuracy,
        baseline,
        drop,
        s_tpp: diag / mm - off / (mm * (mm - 1.0)),
        selected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedProbe {
    pub name: String,
    pub result: ProbeResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: CoreMetrics,
    pub probes: Vec<NamedProbe>,
    pub tpp: Option<TppResult>,
    pub notices: Vec<String>,
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(report)?)
}

/// Square matrix as CSV with `row` / `col_<j>` headers.
pub fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let width = rows.first().map_or(0, Vec::len);
    let mut out = String::from("row");
    for j in 0..width {
        let _ = write!(out, ",col_{j}");
    }
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in r {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
