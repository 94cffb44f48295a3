//! Dense primitives with their reverse-mode rules.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::params::ParamSet;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-6;

/// Multiplication counts of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Multiplies inside dense layers.
    pub matmul: u64,
    /// Elementwise multiplies outside routing (norms, gates, activations).
    pub elementwise: u64,
    /// Elementwise multiplies spent applying routing masks.
    pub routing: u64,
}

impl OpCounter {
    pub fn total(&self) -> u64 {
        self.matmul + self.elementwise + self.routing
    }
}

pub(crate) fn linear(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
    ops: &mut OpCounter,
) -> Array2<f64> {
    ops.matmul += (x.nrows() * w.nrows() * w.ncols()) as u64;
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `x^T dy` and `sum(dy)` into the gradient slots and returns
/// `dy w^T`.
pub(crate) fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    grads: &mut ParamSet,
    (w_idx, b_idx): (usize, usize),
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grads.mat_mut(w_idx));
    let mut gb = grads.vector_mut(b_idx);
    gb += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

/// Row-wise normalisation without affine parameters. Returns the normalised
/// rows and `1 / sqrt(var + eps)` per row.
pub(crate) fn layer_norm(x: ArrayView2<f64>, ops: &mut OpCounter) -> (Array2<f64>, Array1<f64>) {
    let c = x.ncols() as f64;
    let mut out = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in out.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / c;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / c;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    ops.elementwise += 2 * x.len() as u64;
    (out, inv_std)
}

pub(crate) fn layer_norm_backward(
    d_norm: ArrayView2<f64>,
    norm: ArrayView2<f64>,
    inv_std: ArrayView1<f64>,
) -> Array2<f64> {
    let c = norm.ncols() as f64;
    let mut dx = Array2::zeros(norm.dim());
    for (((mut dxr, dn), n), &s) in dx
        .outer_iter_mut()
        .zip(d_norm.outer_iter())
        .zip(norm.outer_iter())
        .zip(inv_std)
    {
        let mean_dn = dn.sum() / c;
        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / c;
        Zip::from(&mut dxr)
            .and(&dn)
            .and(&n)
            .for_each(|o, &g, &v| *o = s * (g - mean_dn - v * mean_dn_n));
    }
    dx
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

pub(crate) fn silu(a: ArrayView2<f64>, ops: &mut OpCounter) -> Array2<f64> {
    ops.elementwise += a.len() as u64;
    a.mapv(|v| v * sigmoid(v))
}

/// `d_out * silu'(a)`.
pub(crate) fn silu_backward(a: ArrayView2<f64>, d_out: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    Zip::from(&mut out).and(&a).and(&d_out).for_each(|o, &v, &g| {
        let s = sigmoid(v);
        *o = g * s * (1.0 + v * (1.0 - s));
    });
    out
}
