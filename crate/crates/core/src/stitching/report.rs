//! Serialized stitching results: one JSON document plus a CSV trajectory.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{classify_latents, interpolate_with, LatentFamily, LatentRecord, StitchEval, TrajectoryPoint};
use crate::data::ActivationBatch;
use crate::error::Result;
use crate::io::write_atomic;
use crate::metrics::Roc;
use crate::sae::Sae;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchReport {
    pub threshold: f64,
    pub small_m: usize,
    pub large_m: usize,
    pub small_mse: f64,
    pub large_mse: f64,
    pub latents: Vec<LatentRecord>,
    pub families: Vec<LatentFamily>,
    /// `None` when every latent falls on the same side of zero ΔMSE.
    pub roc: Option<Roc>,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Classification, per-latent ΔMSE, ROC and interpolation trajectory in one pass.
pub fn build_report<T: Scalar>(
    small: &Sae<T>,
    large: &Sae<T>,
    data: &ActivationBatch<T>,
    theta: f64,
    order_seed: u64,
) -> Result<StitchReport> {
    let mut cls = classify_latents(small, large, theta)?;
    let eval = StitchEval::new(small, large, data)?;
    let deltas = eval.per_latent_add_effect()?;
    for (rec, d) in cls.latents.iter_mut().zip(&deltas) {
        rec.delta_mse = Some(*d);
    }
    let max_cos: Vec<f64> = cls.latents.iter().map(|r| r.max_cos).collect();
    let roc = super::roc_for_threshold(&deltas, &max_cos).ok();
    let trajectory = interpolate_with(&eval, &cls, order_seed)?;
    Ok(StitchReport {
        threshold: theta,
        small_m: small.m(),
        large_m: large.m(),
        small_mse: trajectory[0].mse,
        large_mse: eval.mse(&super::StitchState::all_large(large.m()))?,
        latents: cls.latents,
        families: cls.families,
        roc,
        trajectory,
    })
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut out = String::from("step,phase,mean_l0,mse,description\n");
    for p in points {
        let phase = serde_json::to_value(p.phase).ok();
        let phase = phase.as_ref().and_then(|v| v.as_str()).unwrap_or("");
        let _ = writeln!(
            out,
            "{},{},{},{},\"{}\"",
            p.step, phase, p.mean_l0, p.mse, p.description
        );
    }
    out
}

pub fn write_report(report: &StitchReport, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(report)?)
}

pub fn write_trajectory_csv(points: &[TrajectoryPoint], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, trajectory_csv(points).as_bytes())
}
