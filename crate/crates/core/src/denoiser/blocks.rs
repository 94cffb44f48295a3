//! Residual blocks with timestep routing.
//!
//! ADM placement: `z + F(m * norm(z), temb)`, the mask sits right after the
//! normalisation, `F = fc1 (+ temb projection) -> SiLU -> fc2` with `fc2`
//! zero-initialised.
//!
//! DiT placement: `(1 - m) * z + Inner(m * z)` with
//! `Inner(u) = u' + gate2 * Mlp(mod2(norm(u')))`, `u' = u + gate1 * Mix(mod1(norm(u)))`.
//! Shift, scale and gate of both sub-layers are regressed from the timestep
//! embedding by a zero-initialised projection (adaLN-Zero), so the block is
//! the identity at initialisation.

use ndarray::{s, Array1, Array2, ArrayView2, Zip};

use super::ops::{
    layer_norm, layer_norm_backward, linear, linear_backward, silu, silu_backward, OpCounter,
};
use crate::params::ParamSet;

/// Indices of a dense layer's weight (`in x out`) and bias in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSlots {
    pub w: usize,
    pub b: usize,
}

impl DenseSlots {
    pub(crate) fn pair(self) -> (usize, usize) {
        (self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdmSlots {
    pub norm_gain: usize,
    pub norm_bias: usize,
    pub fc1: DenseSlots,
    pub temb: DenseSlots,
    pub fc2: DenseSlots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DitSlots {
    /// `C -> 6C`: shift1, scale1, gate1, shift2, scale2, gate2.
    pub modulation: DenseSlots,
    pub mix: DenseSlots,
    pub mlp_in: DenseSlots,
    pub mlp_out: DenseSlots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSlots {
    Adm(AdmSlots),
    Dit(DitSlots),
}

pub(crate) enum BlockCache {
    Adm(AdmCache),
    Dit(DitCache),
}

pub(crate) struct AdmCache {
    norm: Array2<f64>,
    inv_std: Array1<f64>,
    routed: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

pub(crate) struct DitCache {
    modulation: Array2<f64>,
    norm1: Array2<f64>,
    inv1: Array2<f64>,
    mod1: Array2<f64>,
    mix: Array2<f64>,
    norm2: Array2<f64>,
    inv2: Array2<f64>,
    mod2: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    mlp: Array2<f64>,
}

fn col(v: Array1<f64>) -> Array2<f64> {
    let n = v.len();
    v.into_shape_with_order((n, 1)).expect("column")
}

fn mul_mask(x: ArrayView2<f64>, mask: Option<ArrayView2<f64>>, ops: &mut OpCounter) -> Array2<f64> {
    match mask {
        Some(m) => {
            ops.routing += x.len() as u64;
            &x * &m
        }
        None => x.to_owned(),
    }
}

pub(crate) struct AdmBranch {
    pub(crate) out: Array2<f64>,
    routed: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

/// Residual branch `F(m * h, temb)` evaluated on an already normalised `h`.
pub(crate) fn adm_branch(
    p: &ParamSet,
    slots: &AdmSlots,
    normalized: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
    ops: &mut OpCounter,
) -> AdmBranch {
    let routed = mul_mask(normalized, mask, ops);
    let mut pre = linear(routed.view(), p.mat(slots.fc1.w), p.vector(slots.fc1.b), ops);
    pre += &linear(cond, p.mat(slots.temb.w), p.vector(slots.temb.b), ops);
    let hidden = silu(pre.view(), ops);
    let out = linear(hidden.view(), p.mat(slots.fc2.w), p.vector(slots.fc2.b), ops);
    AdmBranch {
        out,
        routed,
        pre,
        hidden,
    }
}

/// Learned-affine layer norm of the block input.
pub(crate) fn adm_norm(
    p: &ParamSet,
    slots: &AdmSlots,
    z: ArrayView2<f64>,
    ops: &mut OpCounter,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let (norm, inv_std) = layer_norm(z, ops);
    let mut affine = &norm * &p.vector(slots.norm_gain);
    affine += &p.vector(slots.norm_bias);
    ops.elementwise += norm.len() as u64;
    (norm, inv_std, affine)
}

pub(crate) fn adm_forward(
    p: &ParamSet,
    slots: &AdmSlots,
    z: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
    ops: &mut OpCounter,
) -> (Array2<f64>, AdmCache) {
    let (norm, inv_std, affine) = adm_norm(p, slots, z, ops);
    let branch = adm_branch(p, slots, affine.view(), cond, mask, ops);
    let mut out = branch.out;
    out += &z;
    let cache = AdmCache {
        norm,
        inv_std,
        routed: branch.routed,
        pre: branch.pre,
        hidden: branch.hidden,
    };
    (out, cache)
}

/// Returns `(dz, dcond)` and accumulates parameter gradients.
pub(crate) fn adm_backward(
    p: &ParamSet,
    slots: &AdmSlots,
    cache: &AdmCache,
    cond: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
    d_out: ArrayView2<f64>,
    grads: &mut ParamSet,
) -> (Array2<f64>, Array2<f64>) {
    let d_hidden = linear_backward(
        cache.hidden.view(),
        p.mat(slots.fc2.w),
        d_out,
        grads,
        slots.fc2.pair(),
    );
    let d_pre = silu_backward(cache.pre.view(), d_hidden.view());
    let d_cond = linear_backward(cond, p.mat(slots.temb.w), d_pre.view(), grads, slots.temb.pair());
    let d_routed = linear_backward(
        cache.routed.view(),
        p.mat(slots.fc1.w),
        d_pre.view(),
        grads,
        slots.fc1.pair(),
    );
    let d_affine = match mask {
        Some(m) => &d_routed * &m,
        None => d_routed,
    };
    {
        let mut gg = grads.vector_mut(slots.norm_gain);
        gg += &(&d_affine * &cache.norm).sum_axis(ndarray::Axis(0));
    }
    {
        let mut gb = grads.vector_mut(slots.norm_bias);
        gb += &d_affine.sum_axis(ndarray::Axis(0));
    }
    let d_norm = &d_affine * &p.vector(slots.norm_gain);
    let mut dz = layer_norm_backward(d_norm.view(), cache.norm.view(), cache.inv_std.view());
    dz += &d_out;
    (dz, d_cond)
}

fn chunk(m: &Array2<f64>, k: usize, c: usize) -> ArrayView2<'_, f64> {
    m.slice(s![.., k * c..(k + 1) * c])
}

/// `n * (1 + scale) + shift`.
fn modulate(
    n: &Array2<f64>,
    shift: ArrayView2<f64>,
    scale: ArrayView2<f64>,
    ops: &mut OpCounter,
) -> Array2<f64> {
    ops.elementwise += n.len() as u64;
    let mut out = Array2::zeros(n.dim());
    Zip::from(&mut out)
        .and(n)
        .and(shift)
        .and(scale)
        .for_each(|o, &v, &sh, &sc| *o = v * (1.0 + sc) + sh);
    out
}

pub(crate) fn dit_forward(
    p: &ParamSet,
    slots: &DitSlots,
    z: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
    ops: &mut OpCounter,
) -> (Array2<f64>, DitCache) {
    let c = z.ncols();
    let modulation = linear(
        cond,
        p.mat(slots.modulation.w),
        p.vector(slots.modulation.b),
        ops,
    );
    let routed = mul_mask(z, mask, ops);

    let (norm1, inv1) = layer_norm(routed.view(), ops);
    let mod1 = modulate(&norm1, chunk(&modulation, 0, c), chunk(&modulation, 1, c), ops);
    let mix = linear(mod1.view(), p.mat(slots.mix.w), p.vector(slots.mix.b), ops);
    let mid = &routed + &(&chunk(&modulation, 2, c) * &mix);

    let (norm2, inv2) = layer_norm(mid.view(), ops);
    let mod2 = modulate(&norm2, chunk(&modulation, 3, c), chunk(&modulation, 4, c), ops);
    let pre = linear(mod2.view(), p.mat(slots.mlp_in.w), p.vector(slots.mlp_in.b), ops);
    let hidden = silu(pre.view(), ops);
    let mlp = linear(hidden.view(), p.mat(slots.mlp_out.w), p.vector(slots.mlp_out.b), ops);
    let mut out = &mid + &(&chunk(&modulation, 5, c) * &mlp);
    ops.elementwise += 2 * z.len() as u64;

    if let Some(m) = mask {
        ops.routing += z.len() as u64;
        Zip::from(&mut out)
            .and(z)
            .and(m)
            .for_each(|o, &zv, &mv| *o += (1.0 - mv) * zv);
    }
    let cache = DitCache {
        modulation,
        norm1,
        inv1: col(inv1),
        mod1,
        mix,
        norm2,
        inv2: col(inv2),
        mod2,
        pre,
        hidden,
        mlp,
    };
    (out, cache)
}

pub(crate) fn dit_backward(
    p: &ParamSet,
    slots: &DitSlots,
    cache: &DitCache,
    cond: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
    d_out: ArrayView2<f64>,
    grads: &mut ParamSet,
) -> (Array2<f64>, Array2<f64>) {
    let c = d_out.ncols();
    let modulation = &cache.modulation;
    let mut d_mod = Array2::zeros(modulation.dim());

    // out = mid + gate2 * mlp (+ skip)
    let mut d_mid = d_out.to_owned();
    d_mod
        .slice_mut(s![.., 5 * c..6 * c])
        .assign(&(&d_out * &cache.mlp));
    let d_mlp = &d_out * &chunk(modulation, 5, c);
    let d_hidden = linear_backward(
        cache.hidden.view(),
        p.mat(slots.mlp_out.w),
        d_mlp.view(),
        grads,
        slots.mlp_out.pair(),
    );
    let d_pre = silu_backward(cache.pre.view(), d_hidden.view());
    let d_mod2 = linear_backward(
        cache.mod2.view(),
        p.mat(slots.mlp_in.w),
        d_pre.view(),
        grads,
        slots.mlp_in.pair(),
    );
    d_mod.slice_mut(s![.., 3 * c..4 * c]).assign(&d_mod2);
    d_mod
        .slice_mut(s![.., 4 * c..5 * c])
        .assign(&(&d_mod2 * &cache.norm2));
    let d_norm2 = &d_mod2 * &chunk(modulation, 4, c).mapv(|v| 1.0 + v);
    let inv2 = cache.inv2.column(0);
    d_mid += &layer_norm_backward(d_norm2.view(), cache.norm2.view(), inv2);

    // mid = routed + gate1 * mix
    let mut d_routed = d_mid.clone();
    d_mod
        .slice_mut(s![.., 2 * c..3 * c])
        .assign(&(&d_mid * &cache.mix));
    let d_mix = &d_mid * &chunk(modulation, 2, c);
    let d_mod1 = linear_backward(
        cache.mod1.view(),
        p.mat(slots.mix.w),
        d_mix.view(),
        grads,
        slots.mix.pair(),
    );
    d_mod.slice_mut(s![.., 0..c]).assign(&d_mod1);
    d_mod
        .slice_mut(s![.., c..2 * c])
        .assign(&(&d_mod1 * &cache.norm1));
    let d_norm1 = &d_mod1 * &chunk(modulation, 1, c).mapv(|v| 1.0 + v);
    let inv1 = cache.inv1.column(0);
    d_routed += &layer_norm_backward(d_norm1.view(), cache.norm1.view(), inv1);

    let d_cond = linear_backward(
        cond,
        p.mat(slots.modulation.w),
        d_mod.view(),
        grads,
        slots.modulation.pair(),
    );

    let dz = match mask {
        Some(m) => {
            let mut dz = &d_routed * &m;
            Zip::from(&mut dz)
                .and(d_out)
                .and(m)
                .for_each(|o, &g, &mv| *o += (1.0 - mv) * g);
            dz
        }
        None => d_routed,
    };
    (dz, d_cond)
}
