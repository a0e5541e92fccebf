//! Training objective and its hand-derived gradient.
//!
//! For a batch of `B` samples the loss is
//!
//! ```text
//! reconstruct = mean_b |x_b - x_hat_b|^2
//! sparsity    = lambda * mean_b |f_b|_1                  (Relu only)
//! aux         = alpha * mean_b |e_b - e_hat_b|^2         (TopK / BatchTopK)
//! ```
//!
//! where `e_b = x_b - x_hat_b` and `e_hat_b` decodes (without bias) the
//! `k_aux` largest pre-activations among latents flagged dead. Sparsity
//! masks are held fixed when differentiating, so gradients flow only through
//! kept entries. The residual inside the auxiliary term is differentiated
//! too, keeping the gradient exact for the loss as written.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{Sae, Variant};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub reconstruct: T,
    pub sparsity: T,
    pub aux: T,
    pub total: T,
}

impl<T: Scalar> LossParts<T> {
    pub fn to_f64(self) -> LossParts<f64> {
        LossParts {
            reconstruct: self.reconstruct.to_f64_lossy(),
            sparsity: self.sparsity.to_f64_lossy(),
            aux: self.aux.to_f64_lossy(),
            total: self.total.to_f64_lossy(),
        }
    }
}

/// Gradient (or any per-parameter quantity) shaped like the SAE parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeGrads<T> {
    pub enc_weights: Array2<T>,
    pub enc_bias: Array1<T>,
    pub dec_rows: Array2<T>,
    pub dec_bias: Array1<T>,
}

impl<T: Scalar> SaeGrads<T> {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            enc_weights: Array2::zeros((m, n)),
            enc_bias: Array1::zeros(m),
            dec_rows: Array2::zeros((m, n)),
            dec_bias: Array1::zeros(n),
        }
    }

    pub fn zeros_like(sae: &Sae<T>) -> Self {
        Self::zeros(sae.m(), sae.n())
    }

    /// Flat views in the fixed order encoder weights, encoder bias, decoder
    /// rows, decoder bias.
    pub fn slices(&self) -> [&[T]; 4] {
        [
            self.enc_weights.as_slice().expect("standard layout"),
            self.enc_bias.as_slice().expect("standard layout"),
            self.dec_rows.as_slice().expect("standard layout"),
            self.dec_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.enc_weights.as_slice_mut().expect("standard layout"),
            self.enc_bias.as_slice_mut().expect("standard layout"),
            self.dec_rows.as_slice_mut().expect("standard layout"),
            self.dec_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl<T: Scalar> Sae<T> {
    /// Mutable flat parameter views, same order as [`SaeGrads::slices`].
    pub fn param_slices_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.enc_weights.as_slice_mut().expect("standard layout"),
            self.enc_bias.as_slice_mut().expect("standard layout"),
            self.dec_rows.as_slice_mut().expect("standard layout"),
            self.dec_bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Per-sample auxiliary selection: `(latent, relu(z))` pairs.
fn aux_selection<T: Scalar>(z: &Array2<T>, dead: &[usize], k_aux: usize) -> Vec<Vec<(usize, T)>> {
    z.rows()
        .into_iter()
        .map(|row| {
            let mut cand: Vec<(usize, T)> = dead.iter().map(|&i| (i, row[i])).collect();
            cand.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            cand.truncate(k_aux);
            cand.into_iter().filter(|(_, v)| *v > T::zero()).collect()
        })
        .collect()
}

/// Loss parts, gradients, and the training-mode activations of the batch.
pub fn loss_and_grad<T: Scalar>(
    sae: &Sae<T>,
    x: ArrayView2<'_, T>,
    dead_mask: &[bool],
) -> Result<(LossParts<T>, SaeGrads<T>, Array2<T>)> {
    let (parts, grads, acts) = evaluate(sae, x, dead_mask, true)?;
    Ok((parts, grads.expect("requested"), acts))
}

pub fn loss<T: Scalar>(sae: &Sae<T>, x: ArrayView2<'_, T>, dead_mask: &[bool]) -> Result<LossParts<T>> {
    Ok(evaluate(sae, x, dead_mask, false)?.0)
}

pub fn grad<T: Scalar>(sae: &Sae<T>, x: ArrayView2<'_, T>, dead_mask: &[bool]) -> Result<SaeGrads<T>> {
    Ok(loss_and_grad(sae, x, dead_mask)?.1)
}

#[allow(clippy::type_complexity)]
fn evaluate<T: Scalar>(
    sae: &Sae<T>,
    x: ArrayView2<'_, T>,
    dead_mask: &[bool],
    want_grad: bool,
) -> Result<(LossParts<T>, Option<SaeGrads<T>>, Array2<T>)> {
    check_dim(sae.n(), x.ncols())?;
    check_dim(sae.m(), dead_mask.len())?;
    let b = x.nrows();
    if b == 0 {
        return Err(Error::Empty("loss batch"));
    }
    let bt = T::lit(b as f64);
    let variant = sae.variant();
    let (z, f) = sae.encode_train(x)?;
    let x_hat = sae.decode_batch(f.view())?;
    let resid = &x_hat - &x; // r_b = x_hat_b - x_b

    let reconstruct = resid.iter().map(|v| *v * *v).sum::<T>() / bt;

    let lambda = T::lit(sae.config.lambda);
    let sparsity = if variant == Variant::Relu {
        lambda * f.iter().copied().sum::<T>() / bt
    } else {
        T::zero()
    };

    let alpha = T::lit(sae.config.alpha_aux);
    let dead: Vec<usize> = dead_mask
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.then_some(i))
        .collect();
    let use_aux = variant.uses_k() && !dead.is_empty();
    let selection = if use_aux {
        aux_selection(&z, &dead, sae.config.effective_k_aux())
    } else {
        Vec::new()
    };
    // a_b = e_b - e_hat_b = -r_b - e_hat_b
    let aux_resid = if use_aux {
        let mut a = resid.mapv(|v| -v);
        for (mut row, sel) in a.rows_mut().into_iter().zip(&selection) {
            for &(i, g) in sel {
                row.scaled_add(-g, &sae.dec_rows.row(i));
            }
        }
        Some(a)
    } else {
        None
    };
    let aux = aux_resid
        .as_ref()
        .map(|a| alpha * a.iter().map(|v| *v * *v).sum::<T>() / bt)
        .unwrap_or_else(T::zero);

    let parts = LossParts {
        reconstruct,
        sparsity,
        aux,
        total: reconstruct + sparsity + aux,
    };
    if !want_grad {
        return Ok((parts, None, f));
    }

    let two_over_b = T::lit(2.0) / bt;
    // dL/dx_hat_b = (2/B) r_b - (2 alpha / B) a_b ; dL/de_hat_b = -(2 alpha / B) a_b
    let mut g_xhat = resid.mapv(|v| two_over_b * v);
    let g_ehat = aux_resid.as_ref().map(|a| a.mapv(|v| -alpha * two_over_b * v));
    if let Some(ge) = &g_ehat {
        g_xhat += ge;
    }

    let mut grads = SaeGrads::zeros_like(sae);
    grads.dec_bias = g_xhat.sum_axis(Axis(0));
    grads.dec_rows = f.t().dot(&g_xhat);

    // dL/df = g_xhat · D^T (+ lambda/B on active entries for Relu)
    let g_f = g_xhat.dot(&sae.dec_rows.t());
    let l1 = if variant == Variant::Relu {
        lambda / bt
    } else {
        T::zero()
    };
    let mut g_z = Array2::<T>::zeros(z.dim());
    for ((gz, gf), fv) in g_z.iter_mut().zip(g_f.iter()).zip(f.iter()) {
        if *fv > T::zero() {
            *gz = *gf + l1;
        }
    }
    if let Some(ge) = &g_ehat {
        for (bi, sel) in selection.iter().enumerate() {
            let ge_b = ge.row(bi);
            for &(i, g) in sel {
                grads.dec_rows.row_mut(i).scaled_add(g, &ge_b);
                g_z[[bi, i]] += sae.dec_rows.row(i).dot(&ge_b);
            }
        }
    }
    grads.enc_weights = g_z.t().dot(&x);
    grads.enc_bias = g_z.sum_axis(Axis(0));
    Ok((parts, Some(grads), f))
}

/// Removes from each decoder-row gradient its component along the (unit) row.
pub fn remove_radial_component<T: Scalar>(dec_rows: &Array2<T>, grad_dec: &mut Array2<T>) {
    for (d, mut g) in dec_rows.rows().into_iter().zip(grad_dec.rows_mut()) {
        let dd = d.dot(&d);
        if dd > T::zero() {
            let coef = d.dot(&g) / dd;
            g.scaled_add(-coef, &d);
        }
    }
}
