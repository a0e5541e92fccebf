use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optimizer hyperparameters consumed by [`adam_step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for a list of parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(group_lens: &[usize]) -> Self {
        Self {
            step: 0,
            first: group_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: group_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One bias-corrected Adam update over the groups whose `active` flag is set.
///
/// All gradients are checked before anything is mutated; a non-finite entry
/// aborts the step with [`Error::GradientOverflow`].
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    active: &[bool],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() || active.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: state.first.len(),
            got: params.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::DimensionMismatch {
                expected: m.len(),
                got: g.len(),
            });
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::GradientOverflow);
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !active[gi] {
            continue;
        }
        let m = &mut state.first[gi];
        let v = &mut state.second[gi];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [0.0f64];
        let mut st = AdamState::new(&[1]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut [&mut p[..]], &[&[1.0]], &[true], &mut st, &cfg).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = [1.0f64, -2.0];
        let mut st = AdamState::new(&[2]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p[..]], &[&[0.5, 0.5]], &[true], &mut st, &cfg).unwrap();
        let moved = p;
        let (m0, v0) = (st.first[0][0], st.second[0][0]);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0]], &[true], &mut st, &cfg).unwrap();
        assert!((st.first[0][0] - 0.9 * m0).abs() < 1e-15);
        assert!((st.second[0][0] - 0.99 * v0).abs() < 1e-15);
        // the zero-gradient step still applies the decayed momentum
        assert!(p[0] < moved[0]);

        let mut q = [3.0f64];
        let mut fresh = AdamState::new(&[1]);
        adam_step(&mut [&mut q[..]], &[&[0.0]], &[true], &mut fresh, &cfg).unwrap();
        assert_eq!(q[0], 3.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = [1.0f64, 2.0];
        let mut st = AdamState::new(&[2]);
        let err = adam_step(
            &mut [&mut p[..]],
            &[&[f64::NAN, 0.0]],
            &[true],
            &mut st,
            &AdamConfig::default(),
        );
        assert!(matches!(err, Err(Error::GradientOverflow)));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_groups_untouched() {
        let mut a = [1.0f64];
        let mut b = [1.0f64];
        let mut st = AdamState::new(&[1, 1]);
        adam_step(
            &mut [&mut a[..], &mut b[..]],
            &[&[1.0], &[1.0]],
            &[true, false],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert!(a[0] < 1.0);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(p) = sum_i c_i (p_i - t_i)^2, minimum at t
        let target = [1.5f64, -0.75, 0.25];
        let curv = [1.0f64, 3.0, 0.5];
        let mut p = [0.0f64; 3];
        let mut st = AdamState::new(&[3]);
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        };
        for _ in 0..2000 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * curv[i] * (p[i] - target[i])).collect();
            adam_step(&mut [&mut p[..]], &[&g], &[true], &mut st, &cfg).unwrap();
        }
        for i in 0..3 {
            assert!((p[i] - target[i]).abs() < 1e-2, "coord {i}: {} vs {}", p[i], target[i]);
        }
    }
}
