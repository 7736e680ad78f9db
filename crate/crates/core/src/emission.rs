//! Per-category diagonal Gaussians over latent embeddings.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{view, view_mut, Group, TensorView, TensorViewMut, Tensors};

/// Added to `exp(log_var)` so no variance can collapse to zero.
pub const VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionParams {
    /// `K x D`
    pub means: Array2<f64>,
    /// `K x D`; effective variance is `exp(log_var) + VARIANCE_FLOOR`.
    pub log_vars: Array2<f64>,
}

impl EmissionParams {
    pub fn zeros(num_categories: usize, dim: usize) -> Self {
        EmissionParams {
            means: Array2::zeros((num_categories, dim)),
            log_vars: Array2::zeros((num_categories, dim)),
        }
    }

    /// Means drawn from `N(0, 0.01^2)`, unit log-variance parameters.
    pub fn init<R: Rng + ?Sized>(num_categories: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).unwrap();
        EmissionParams {
            means: Array2::from_shape_fn((num_categories, dim), |_| normal.sample(rng)),
            log_vars: Array2::zeros((num_categories, dim)),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_categories(), self.dim())
    }

    pub fn variance(&self, k: usize, d: usize) -> f64 {
        self.log_vars[[k, d]].exp() + VARIANCE_FLOOR
    }

    fn check(&self, e: ArrayView2<f64>) -> Result<()> {
        if e.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "emission dimension is {}, latents have {} columns",
                self.dim(),
                e.ncols()
            )));
        }
        Ok(())
    }

    /// `l x K` log densities of each latent row under each category.
    pub fn loglikes(&self, e: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(e)?;
        let (k_n, d_n) = self.means.dim();
        let var = self.log_vars.mapv(|lv| lv.exp() + VARIANCE_FLOOR);
        let consts: Vec<f64> = (0..k_n)
            .map(|k| {
                -0.5 * (d_n as f64) * (2.0 * PI).ln()
                    - 0.5 * var.row(k).iter().map(|v| v.ln()).sum::<f64>()
            })
            .collect();
        let mut out = Array2::zeros((e.nrows(), k_n));
        for (i, row) in e.rows().into_iter().enumerate() {
            for k in 0..k_n {
                let mut quad = 0.0;
                for d in 0..d_n {
                    let diff = row[d] - self.means[[k, d]];
                    quad += diff * diff / var[[k, d]];
                }
                out[[i, k]] = consts[k] - 0.5 * quad;
            }
        }
        Ok(out)
    }

    /// Gradient of `sum_ik weights[i][k] * loglike[i][k]`.
    ///
    /// Parameter gradients are added into `grads`; the gradient with respect
    /// to `e` is returned.
    pub fn backward_into(
        &self,
        e: ArrayView2<f64>,
        weights: ArrayView2<f64>,
        grads: &mut EmissionParams,
    ) -> Result<Array2<f64>> {
        self.check(e)?;
        let (k_n, d_n) = self.means.dim();
        if weights.dim() != (e.nrows(), k_n) {
            return Err(Error::shape(format!(
                "weights are {:?}, expected ({}, {k_n})",
                weights.dim(),
                e.nrows()
            )));
        }
        let mut grad_e = Array2::zeros(e.raw_dim());
        for (i, row) in e.rows().into_iter().enumerate() {
            for k in 0..k_n {
                let w = weights[[i, k]];
                if w == 0.0 {
                    continue;
                }
                for d in 0..d_n {
                    let ev = self.log_vars[[k, d]].exp();
                    let v = ev + VARIANCE_FLOOR;
                    let diff = row[d] - self.means[[k, d]];
                    let scaled = w * diff / v;
                    grads.means[[k, d]] += scaled;
                    grad_e[[i, d]] -= scaled;
                    // d/dv [-ln v / 2 - diff^2 / (2v)] times dv/dlog_var
                    grads.log_vars[[k, d]] += w * 0.5 * (diff * diff / (v * v) - 1.0 / v) * ev;
                }
            }
        }
        Ok(grad_e)
    }

    pub fn backward(
        &self,
        e: ArrayView2<f64>,
        weights: ArrayView2<f64>,
    ) -> Result<(EmissionParams, Array2<f64>)> {
        let mut grads = self.zeros_like();
        let ge = self.backward_into(e, weights, &mut grads)?;
        Ok((grads, ge))
    }
}

impl Tensors for EmissionParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            view("emission.means", Group::Emission, &self.means),
            view("emission.log_vars", Group::Emission, &self.log_vars),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![
            view_mut("emission.means", Group::Emission, &mut self.means),
            view_mut("emission.log_vars", Group::Emission, &mut self.log_vars),
        ]
    }
}
