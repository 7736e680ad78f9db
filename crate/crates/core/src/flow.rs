//! Invertible projections between latent embeddings `e` and observations `x`.
//!
//! Three kinds are supported:
//!
//! - `Nice`: a stack of additive coupling layers. Each layer keeps one half of
//!   the coordinates and shifts the other half by a ReLU network of the kept
//!   half. The Jacobian determinant is exactly one.
//! - `Linear`: a single matrix `W` that maps observations to latents
//!   (`e = W x`), so the likelihood never needs a matrix inverse.
//! - `Identity`: `e = x`.
//!
//! Gradients are hand-derived. [`FlowParams::inverse`] returns a
//! [`FlowCache`] that the caller hands back to [`FlowParams::backward`].

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{view, view_mut, Group, TensorView, TensorViewMut, Tensors};

/// Smallest |det W| accepted for the linear kind.
pub const MIN_ABS_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Nice,
    Linear,
    Identity,
}

/// Which half of the coordinates a coupling layer transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    LowHalf,
    HighHalf,
}

impl Parity {
    pub fn for_layer(index: usize) -> Parity {
        if index % 2 == 0 {
            Parity::LowHalf
        } else {
            Parity::HighHalf
        }
    }
}

/// `m(a) = W2 relu(W1 a + b1) + b2`, applied to the transformed half.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub parity: Parity,
}

impl CouplingLayer {
    fn zeros(half: usize, hidden: usize, parity: Parity) -> Self {
        CouplingLayer {
            w1: Array2::zeros((hidden, half)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((half, hidden)),
            b2: Array1::zeros(half),
            parity,
        }
    }

    fn half(&self) -> usize {
        self.w1.ncols()
    }

    /// Column ranges of (kept, transformed) halves.
    fn split(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let h = self.half();
        match self.parity {
            Parity::LowHalf => (h..2 * h, 0..h),
            Parity::HighHalf => (0..h, h..2 * h),
        }
    }

    /// Returns (pre-activations, shift) for each row of `kept`.
    fn shift(&self, kept: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let pre = kept.dot(&self.w1.t()) + &self.b1;
        let act = pre.mapv(|v| v.max(0.0));
        let shift = act.dot(&self.w2.t()) + &self.b2;
        (pre, shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowParams {
    Identity { dim: usize },
    Linear { weight: Array2<f64> },
    Nice { dim: usize, layers: Vec<CouplingLayer> },
}

/// Intermediates recorded by [`FlowParams::inverse`] for the backward pass.
#[derive(Debug, Clone)]
pub enum FlowCache {
    Identity { rows: usize },
    Linear { x: Array2<f64> },
    /// Kept-half inputs and hidden pre-activations, indexed by layer.
    Nice { kept: Vec<Array2<f64>>, pre: Vec<Array2<f64>> },
}

#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub e: Array2<f64>,
    pub logdet_per_token: f64,
    pub cache: FlowCache,
}

fn check_finite(a: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite values in {}", what())))
    }
}

fn to_nalgebra(w: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(w.nrows(), w.ncols(), w.iter().copied())
}

fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

impl FlowParams {
    pub fn identity(dim: usize) -> Self {
        FlowParams::Identity { dim }
    }

    pub fn linear(weight: Array2<f64>) -> Result<Self> {
        if weight.nrows() != weight.ncols() || weight.nrows() == 0 {
            return Err(Error::shape(format!(
                "linear flow needs a non-empty square matrix, got {}x{}",
                weight.nrows(),
                weight.ncols()
            )));
        }
        let flow = FlowParams::Linear { weight };
        flow.check_invertible()?;
        Ok(flow)
    }

    /// Coupling stack that starts as the identity map: `W1` is uniform in
    /// `±1/sqrt(D/2)`, the output layer is zero. Hidden width is `dim`.
    pub fn nice<R: Rng + ?Sized>(dim: usize, num_layers: usize, rng: &mut R) -> Result<Self> {
        let mut flow = Self::nice_zeros(dim, num_layers, dim)?;
        let bound = 1.0 / ((dim / 2) as f64).sqrt();
        if let FlowParams::Nice { layers, .. } = &mut flow {
            for layer in layers {
                layer.w1.mapv_inplace(|_| rng.random_range(-bound..bound));
            }
        }
        Ok(flow)
    }

    pub fn nice_zeros(dim: usize, num_layers: usize, hidden: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "coupling layers need an even, positive dimension (got {dim})"
            )));
        }
        if num_layers == 0 {
            return Err(Error::Config("coupling stack needs at least one layer".into()));
        }
        let layers = (0..num_layers)
            .map(|i| CouplingLayer::zeros(dim / 2, hidden, Parity::for_layer(i)))
            .collect();
        Ok(FlowParams::Nice { dim, layers })
    }

    /// Builds the default parameters for `kind`.
    pub fn init<R: Rng + ?Sized>(
        kind: FlowKind,
        dim: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            FlowKind::Identity => Ok(Self::identity(dim)),
            FlowKind::Linear => Self::linear(Array2::eye(dim)),
            FlowKind::Nice => Self::nice(dim, num_layers, rng),
        }
    }

    pub fn kind(&self) -> FlowKind {
        match self {
            FlowParams::Identity { .. } => FlowKind::Identity,
            FlowParams::Linear { .. } => FlowKind::Linear,
            FlowParams::Nice { .. } => FlowKind::Nice,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FlowParams::Identity { dim } | FlowParams::Nice { dim, .. } => *dim,
            FlowParams::Linear { weight } => weight.nrows(),
        }
    }

    pub fn num_layers(&self) -> usize {
        match self {
            FlowParams::Nice { layers, .. } => layers.len(),
            _ => 0,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            FlowParams::Nice { layers, .. } => layers.first().map_or(0, |l| l.w1.nrows()),
            _ => 0,
        }
    }

    /// Same layout, all values zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// `log|det W|` for the linear kind, 0 otherwise.
    pub fn logdet_per_token(&self) -> Result<f64> {
        match self {
            FlowParams::Linear { weight } => {
                let det = to_nalgebra(weight).lu().determinant();
                if !det.is_finite() || det.abs() <= MIN_ABS_DET {
                    return Err(Error::numerical(format!(
                        "linear flow is singular (|det W| = {:e})",
                        det.abs()
                    )));
                }
                Ok(det.abs().ln())
            }
            _ => Ok(0.0),
        }
    }

    pub fn check_invertible(&self) -> Result<()> {
        self.logdet_per_token().map(|_| ())
    }

    fn check_dim(&self, rows: ArrayView2<f64>) -> Result<()> {
        if rows.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "flow dimension is {}, input has {} columns",
                self.dim(),
                rows.ncols()
            )));
        }
        Ok(())
    }

    /// Maps observations to latents, one token per row.
    pub fn inverse(&self, x: ArrayView2<f64>) -> Result<FlowOutput> {
        self.check_dim(x)?;
        match self {
            FlowParams::Identity { .. } => Ok(FlowOutput {
                e: x.to_owned(),
                logdet_per_token: 0.0,
                cache: FlowCache::Identity { rows: x.nrows() },
            }),
            FlowParams::Linear { weight } => {
                let logdet = self.logdet_per_token()?;
                let e = x.dot(&weight.t());
                check_finite(&e, || "linear flow output".into())?;
                Ok(FlowOutput {
                    e,
                    logdet_per_token: logdet,
                    cache: FlowCache::Linear { x: x.to_owned() },
                })
            }
            FlowParams::Nice { layers, .. } => {
                let mut state = x.to_owned();
                let mut kept_cache = vec![Array2::zeros((0, 0)); layers.len()];
                let mut pre_cache = vec![Array2::zeros((0, 0)); layers.len()];
                for (idx, layer) in layers.iter().enumerate().rev() {
                    let (keep, change) = layer.split();
                    let kept = state.slice(s![.., keep]).to_owned();
                    let (pre, shift) = layer.shift(kept.view());
                    let mut target = state.slice_mut(s![.., change]);
                    target -= &shift;
                    check_finite(&state, || format!("coupling layer {idx}"))?;
                    kept_cache[idx] = kept;
                    pre_cache[idx] = pre;
                }
                Ok(FlowOutput {
                    e: state,
                    logdet_per_token: 0.0,
                    cache: FlowCache::Nice {
                        kept: kept_cache,
                        pre: pre_cache,
                    },
                })
            }
        }
    }

    /// Maps latents to observations; exact inverse of [`FlowParams::inverse`].
    pub fn forward(&self, e: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(e)?;
        match self {
            FlowParams::Identity { .. } => Ok(e.to_owned()),
            FlowParams::Linear { weight } => {
                self.check_invertible()?;
                let lu = to_nalgebra(weight).lu();
                let rhs = DMatrix::from_row_iterator(e.nrows(), e.ncols(), e.iter().copied())
                    .transpose();
                let sol = lu
                    .solve(&rhs)
                    .ok_or_else(|| Error::numerical("linear flow is singular"))?;
                Ok(from_nalgebra(&sol.transpose()))
            }
            FlowParams::Nice { layers, .. } => {
                let mut state = e.to_owned();
                for (idx, layer) in layers.iter().enumerate() {
                    let (keep, change) = layer.split();
                    let (_, shift) = layer.shift(state.slice(s![.., keep]));
                    let mut target = state.slice_mut(s![.., change]);
                    target += &shift;
                    check_finite(&state, || format!("coupling layer {idx}"))?;
                }
                Ok(state)
            }
        }
    }

    /// Reverse pass for `sum(grad_e * e) + grad_logdet * logdet_per_token`.
    ///
    /// Parameter gradients are added into `grads`; the gradient with respect
    /// to `x` is returned.
    pub fn backward_into(
        &self,
        cache: &FlowCache,
        grad_e: ArrayView2<f64>,
        grad_logdet: f64,
        grads: &mut FlowParams,
    ) -> Result<Array2<f64>> {
        self.check_dim(grad_e)?;
        let rows = grad_e.nrows();
        match (self, cache, grads) {
            (FlowParams::Identity { .. }, FlowCache::Identity { rows: r }, FlowParams::Identity { .. })
                if *r == rows =>
            {
                Ok(grad_e.to_owned())
            }
            (FlowParams::Linear { weight }, FlowCache::Linear { x }, FlowParams::Linear { weight: gw })
                if x.nrows() == rows =>
            {
                *gw += &grad_e.t().dot(x);
                if grad_logdet != 0.0 {
                    let inv = to_nalgebra(weight)
                        .try_inverse()
                        .ok_or_else(|| Error::numerical("linear flow is singular"))?;
                    // d log|det W| / dW = W^{-T}
                    let inv_t = from_nalgebra(&inv.transpose());
                    gw.scaled_add(grad_logdet, &inv_t);
                }
                Ok(grad_e.dot(weight))
            }
            (
                FlowParams::Nice { layers, .. },
                FlowCache::Nice { kept, pre },
                FlowParams::Nice { layers: glayers, .. },
            ) if kept.len() == layers.len() && kept.iter().all(|k| k.nrows() == rows) => {
                let mut grad = grad_e.to_owned();
                // The inverse ran layers last-to-first, so the reverse pass runs first-to-last.
                for (idx, layer) in layers.iter().enumerate() {
                    let g = &mut glayers[idx];
                    let (keep, change) = layer.split();
                    let grad_shift = grad.slice(s![.., change]).mapv(|v| -v);
                    let pre = &pre[idx];
                    let act = pre.mapv(|v| v.max(0.0));
                    g.w2 += &grad_shift.t().dot(&act);
                    g.b2 += &grad_shift.sum_axis(Axis(0));
                    let mut grad_pre = grad_shift.dot(&layer.w2);
                    Zip::from(&mut grad_pre).and(pre).for_each(|gp, &p| {
                        if p <= 0.0 {
                            *gp = 0.0;
                        }
                    });
                    g.w1 += &grad_pre.t().dot(&kept[idx]);
                    g.b1 += &grad_pre.sum_axis(Axis(0));
                    let mut grad_kept = grad.slice_mut(s![.., keep]);
                    grad_kept += &grad_pre.dot(&layer.w1);
                }
                Ok(grad)
            }
            _ => Err(Error::data(
                "flow cache does not match the parameters it is used with",
            )),
        }
    }

    /// Convenience wrapper returning fresh `(grad_params, grad_x)`.
    pub fn backward(
        &self,
        cache: &FlowCache,
        grad_e: ArrayView2<f64>,
        grad_logdet: f64,
    ) -> Result<(FlowParams, Array2<f64>)> {
        let mut grads = self.zeros_like();
        let gx = self.backward_into(cache, grad_e, grad_logdet, &mut grads)?;
        Ok((grads, gx))
    }
}

impl Tensors for FlowParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        match self {
            FlowParams::Identity { .. } => Vec::new(),
            FlowParams::Linear { weight } => vec![view("flow.linear.weight", Group::Flow, weight)],
            FlowParams::Nice { layers, .. } => layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        view(format!("flow.nice.{i}.w1"), Group::Flow, &l.w1),
                        view(format!("flow.nice.{i}.b1"), Group::Flow, &l.b1),
                        view(format!("flow.nice.{i}.w2"), Group::Flow, &l.w2),
                        view(format!("flow.nice.{i}.b2"), Group::Flow, &l.b2),
                    ]
                })
                .collect(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        match self {
            FlowParams::Identity { .. } => Vec::new(),
            FlowParams::Linear { weight } => {
                vec![view_mut("flow.linear.weight", Group::Flow, weight)]
            }
            FlowParams::Nice { layers, .. } => layers
                .iter_mut()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        view_mut(format!("flow.nice.{i}.w1"), Group::Flow, &mut l.w1),
                        view_mut(format!("flow.nice.{i}.b1"), Group::Flow, &mut l.b1),
                        view_mut(format!("flow.nice.{i}.w2"), Group::Flow, &mut l.w2),
                        view_mut(format!("flow.nice.{i}.b2"), Group::Flow, &mut l.b2),
                    ]
                })
                .collect(),
        }
    }
}
