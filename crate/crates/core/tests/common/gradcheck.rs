//! Central finite differences against the analytic gradient.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;

use saekit::sae::{loss, loss_and_grad, Sae, Variant};

use super::oracles::{gauss_matrix, oracle_top_positive, random_sae, rng};

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

/// Which entries survive sparsification, and which dead latents the
/// auxiliary term selects. A finite-difference step that changes this
/// crosses a kink of the loss.
fn masks(sae: &Sae<f64>, x: &Array2<f64>, dead: &[bool]) -> (Vec<bool>, Vec<BTreeSet<usize>>) {
    let (z, f) = sae.encode_train(x.view()).unwrap();
    let support = f.iter().map(|v| *v != 0.0).collect();
    let dead_idx: Vec<usize> = (0..sae.m()).filter(|&i| dead[i]).collect();
    let aux = z
        .rows()
        .into_iter()
        .map(|row| {
            let vals: Vec<f64> = dead_idx.iter().map(|&i| row[i]).collect();
            // aux keeps the k_aux largest, then drops non-positive ones
            let mut order: Vec<usize> = (0..vals.len()).collect();
            order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
            let top: Vec<f64> = order
                .iter()
                .take(sae.config.effective_k_aux())
                .map(|&i| vals[i])
                .collect();
            oracle_top_positive(&top, top.len())
                .into_iter()
                .map(|j| dead_idx[order[j]])
                .collect()
        })
        .collect();
    (support, aux)
}

pub struct GradReport {
    /// Worst per-group relative error `|g - fd| / max(|g|, |fd|)`.
    pub max_rel: f64,
    pub params: usize,
    pub resampled: usize,
}

/// One random instance of `variant`. Returns `None` when a perturbation
/// flips a mask, so the caller can draw a fresh instance.
fn instance(seed: u64, variant: Variant) -> Option<(f64, usize)> {
    let mut rng = rng(seed);
    let (n, m, b) = (rng.random_range(2..6), rng.random_range(2..7), rng.random_range(2..7));
    let mut sae = random_sae(&mut rng, variant, n, m);
    sae.config.alpha_aux = 1.0 / 32.0;
    let x = gauss_matrix(&mut rng, b, n);
    let mut dead: Vec<bool> = (0..m)
        .map(|_| variant != Variant::Relu && rng.random_bool(0.4))
        .collect();
    if variant != Variant::Relu {
        dead[rng.random_range(0..m)] = true;
    }

    let base = masks(&sae, &x, &dead);
    let (_, grads, _) = loss_and_grad(&sae, x.view(), &dead).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (g, group) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; group.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let eval = |delta: f64| -> Option<f64> {
                let mut s = sae.clone();
                s.param_slices_mut()[g][i] += delta;
                if masks(&s, &x, &dead) != base {
                    return None;
                }
                Some(loss(&s, x.view(), &dead).unwrap().total)
            };
            let (up, down) = (eval(STEP)?, eval(-STEP)?);
            *slot = (up - down) / (2.0 * STEP);
        }
        let diff = group.iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
        let scale = norm(group).max(norm(&fd));
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
        count += group.len();
    }
    Some((worst, count))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `instances` accepted instances of `variant`, resampling across kinks.
pub fn check_variant(variant: Variant, instances: usize, base_seed: u64) -> GradReport {
    let mut report = GradReport {
        max_rel: 0.0,
        params: 0,
        resampled: 0,
    };
    let mut seed = base_seed;
    let mut accepted = 0;
    while accepted < instances {
        seed += 1;
        match instance(seed, variant) {
            Some((rel, params)) => {
                report.max_rel = report.max_rel.max(rel);
                report.params += params;
                accepted += 1;
            }
            None => report.resampled += 1,
        }
        assert!(report.resampled < 10 * instances, "too many mask flips for {variant:?}");
    }
    report
}

pub const TRAINABLE: [Variant; 3] = [Variant::Relu, Variant::TopK, Variant::BatchTopK];
