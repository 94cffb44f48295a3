//! Small residual noise-prediction network with per-block timestep routing.
//!
//! Layout: `x -> input (d -> C) -> L residual blocks -> norm -> output (C -> d)`,
//! conditioned on a sinusoidal timestep embedding passed through a two-layer
//! MLP. Every block's last layer (ADM) or modulation projection (DiT) and the
//! output layer start at zero, so the untrained network predicts zero noise
//! and every block is the identity map.

mod blocks;
pub mod gradcheck;
mod ops;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use blocks::{AdmSlots, BlockSlots, DenseSlots, DitSlots};
pub use ops::{OpCounter, LN_EPS};

use blocks::BlockCache;
use ops::{layer_norm, layer_norm_backward, linear, linear_backward, silu, silu_backward};

use crate::diffusion::NoisePredictor;
use crate::masks::MaskBank;
use crate::params::{ParamSet, Tensor};
use crate::{Error, Result};

/// Residual block architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Adm,
    Dit,
}

/// Where the routing mask is applied, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoutingVariant {
    None,
    AdmStyle,
    DitStyle,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Adm => "adm",
            BlockKind::Dit => "dit",
        }
    }

    /// The routed variant that fits this block architecture.
    pub fn routed_variant(self) -> RoutingVariant {
        match self {
            BlockKind::Adm => RoutingVariant::AdmStyle,
            BlockKind::Dit => RoutingVariant::DitStyle,
        }
    }
}

impl RoutingVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingVariant::None => "none",
            RoutingVariant::AdmStyle => "adm_style",
            RoutingVariant::DitStyle => "dit_style",
        }
    }

    pub fn is_routed(self) -> bool {
        self != RoutingVariant::None
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for RoutingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adm" => Ok(BlockKind::Adm),
            "dit" => Ok(BlockKind::Dit),
            other => Err(Error::invalid(
                "block kind",
                format!("unknown block {other:?} (expected adm or dit)"),
            )),
        }
    }
}

impl FromStr for RoutingVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RoutingVariant::None),
            "adm_style" => Ok(RoutingVariant::AdmStyle),
            "dit_style" => Ok(RoutingVariant::DitStyle),
            other => Err(Error::invalid(
                "routing variant",
                format!("unknown variant {other:?} (expected none, adm_style or dit_style)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    /// Hidden channel count `C`; the masked dimension.
    pub width: usize,
    pub n_blocks: usize,
    pub block: BlockKind,
    pub routing: RoutingVariant,
    pub temb_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            data_dim: 2,
            width: 64,
            n_blocks: 4,
            block: BlockKind::Adm,
            routing: RoutingVariant::AdmStyle,
            temb_dim: 32,
        }
    }
}

impl DenoiserConfig {
    /// Config with the routed variant matching `block`.
    pub fn routed(data_dim: usize, width: usize, n_blocks: usize, block: BlockKind) -> Self {
        DenoiserConfig {
            data_dim,
            width,
            n_blocks,
            block,
            routing: block.routed_variant(),
            temb_dim: 16,
        }
    }

    pub fn with_routing(mut self, routing: RoutingVariant) -> Self {
        self.routing = routing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("data_dim", self.data_dim),
            ("width", self.width),
            ("n_blocks", self.n_blocks),
            ("temb_dim", self.temb_dim),
        ] {
            if v < 1 {
                return Err(Error::invalid("denoiser config", format!("{name} must be at least 1")));
            }
        }
        let consistent = match self.routing {
            RoutingVariant::None => true,
            RoutingVariant::AdmStyle => self.block == BlockKind::Adm,
            RoutingVariant::DitStyle => self.block == BlockKind::Dit,
        };
        if !consistent {
            return Err(Error::invalid(
                "denoiser config",
                format!("routing {} does not fit {} blocks", self.routing, self.block),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slots {
    pub input: DenseSlots,
    pub time_fc1: DenseSlots,
    pub time_fc2: DenseSlots,
    pub blocks: Vec<BlockSlots>,
    pub out_gain: usize,
    pub out_bias: usize,
    pub output: DenseSlots,
}

/// Per-block post-block activations `z^{l+1}` of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub timesteps: Vec<usize>,
    /// `blocks[l]` has shape `(batch, width)`.
    pub blocks: Vec<Array2<f64>>,
}

impl ActivationTrace {
    /// CSV rows `block,timestep,a_1,...,a_C`, one per (block, sample), in
    /// block-major then row-major order.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (l, acts) in self.blocks.iter().enumerate() {
            for (row, t) in acts.outer_iter().zip(&self.timesteps) {
                out.push_str(&format!("{l},{t}"));
                for v in row {
                    out.push_str(&format!(",{v:e}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

struct ForwardCache {
    emb: Array2<f64>,
    time_pre: Array2<f64>,
    time_hidden: Array2<f64>,
    temb: Array2<f64>,
    cond: Array2<f64>,
    /// Input of every block plus the final residual stream.
    stream: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
    out_norm: Array2<f64>,
    out_inv: Array1<f64>,
    out_affine: Array2<f64>,
    masks: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamSet,
    slots: Slots,
}

fn dense(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> DenseSlots {
    DenseSlots {
        w: params.push(Tensor::zeros(format!("{name}.w"), &[fan_in, fan_out])),
        b: params.push(Tensor::zeros(format!("{name}.b"), &[fan_out])),
    }
}

/// Zero-filled parameter set and slot table for `config`.
fn layout(config: &DenoiserConfig) -> (ParamSet, Slots) {
    let c = config.width;
    let mut p = ParamSet::new();
    let input = dense(&mut p, "input", config.data_dim, c);
    let time_fc1 = dense(&mut p, "time.fc1", config.temb_dim, c);
    let time_fc2 = dense(&mut p, "time.fc2", c, c);
    let blocks = (0..config.n_blocks)
        .map(|l| match config.block {
            BlockKind::Adm => BlockSlots::Adm(AdmSlots {
                norm_gain: p.push(Tensor::zeros(format!("blocks.{l}.norm.gain"), &[c])),
                norm_bias: p.push(Tensor::zeros(format!("blocks.{l}.norm.bias"), &[c])),
                fc1: dense(&mut p, &format!("blocks.{l}.fc1"), c, c),
                temb: dense(&mut p, &format!("blocks.{l}.temb"), c, c),
                fc2: dense(&mut p, &format!("blocks.{l}.fc2"), c, c),
            }),
            BlockKind::Dit => BlockSlots::Dit(DitSlots {
                modulation: dense(&mut p, &format!("blocks.{l}.modulation"), c, 6 * c),
                mix: dense(&mut p, &format!("blocks.{l}.mix"), c, c),
                mlp_in: dense(&mut p, &format!("blocks.{l}.mlp_in"), c, c),
                mlp_out: dense(&mut p, &format!("blocks.{l}.mlp_out"), c, c),
            }),
        })
        .collect();
    let out_gain = p.push(Tensor::zeros("out.norm.gain", &[c]));
    let out_bias = p.push(Tensor::zeros("out.norm.bias", &[c]));
    let output = dense(&mut p, "out.fc", c, config.data_dim);
    let slots = Slots {
        input,
        time_fc1,
        time_fc2,
        blocks,
        out_gain,
        out_bias,
        output,
    };
    (p, slots)
}

fn init_uniform(params: &mut ParamSet, slots: DenseSlots, rng: &mut ChaCha8Rng) {
    let fan_in = params.tensors()[slots.w].shape[0];
    let bound = 1.0 / (fan_in as f64).sqrt();
    for idx in [slots.w, slots.b] {
        for v in params.tensors_mut()[idx].data.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
}

/// Builds and initialises a denoiser. Dense layers draw from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; norm gains start at one; each
/// block's final projection and the output layer start at zero.
pub fn build_denoiser(config: DenoiserConfig, seed: u64) -> Result<Denoiser> {
    config.validate()?;
    let (mut params, slots) = layout(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_uniform(&mut params, slots.input, &mut rng);
    init_uniform(&mut params, slots.time_fc1, &mut rng);
    init_uniform(&mut params, slots.time_fc2, &mut rng);
    for block in &slots.blocks {
        match block {
            BlockSlots::Adm(s) => {
                params.tensors_mut()[s.norm_gain].data.fill(1.0);
                init_uniform(&mut params, s.fc1, &mut rng);
                init_uniform(&mut params, s.temb, &mut rng);
            }
            BlockSlots::Dit(s) => {
                init_uniform(&mut params, s.mix, &mut rng);
                init_uniform(&mut params, s.mlp_in, &mut rng);
                init_uniform(&mut params, s.mlp_out, &mut rng);
            }
        }
    }
    params.tensors_mut()[slots.out_gain].data.fill(1.0);
    Ok(Denoiser {
        config,
        params,
        slots,
    })
}

/// Sinusoidal embedding `[cos(t f_i), sin(t f_i)]` with
/// `f_i = 10000^(-i / half)`; odd widths get a trailing zero.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((timesteps.len(), dim));
    for (mut row, &t) in out.outer_iter_mut().zip(timesteps) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.cos();
            row[half + i] = arg.sin();
        }
    }
    out
}

/// `batch x C` matrix whose row `i` is the bank row of `timesteps[i]`.
pub fn mask_rows(bank: &MaskBank, timesteps: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((timesteps.len(), bank.channels()));
    for (mut row, &t) in out.outer_iter_mut().zip(timesteps) {
        for (o, &b) in row.iter_mut().zip(bank.row_for_timestep(t)?) {
            *o = b as f64;
        }
    }
    Ok(out)
}

impl Denoiser {
    /// Wraps an existing parameter set; its names and shapes must match the
    /// layout of `config`.
    pub fn from_params(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let (template, slots) = layout(&config);
        template.check_layout(&params, "denoiser parameters")?;
        Ok(Denoiser {
            config,
            params,
            slots,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn slots(&self) -> &Slots {
        &self.slots
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Same network with a different parameter set (e.g. EMA weights).
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        Denoiser::from_params(self.config, params)
    }

    fn check_inputs(&self, x: ArrayView2<f64>, timesteps: &[usize], bank: &MaskBank) -> Result<()> {
        if x.ncols() != self.config.data_dim {
            return Err(Error::shape("denoiser input width", self.config.data_dim, x.ncols()));
        }
        if timesteps.len() != x.nrows() {
            return Err(Error::shape("denoiser timesteps", x.nrows(), timesteps.len()));
        }
        if self.config.routing.is_routed() && bank.channels() != self.config.width {
            return Err(Error::shape("mask bank channels", self.config.width, bank.channels()));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t < 1 || t > bank.tasks()) {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                lo: 1,
                hi: bank.tasks(),
            });
        }
        Ok(())
    }

    /// Conditioning signal fed to every block: `SiLU(temb)`, where `temb` is
    /// the timestep MLP applied to the sinusoidal embedding.
    pub fn conditioning(&self, timesteps: &[usize]) -> Array2<f64> {
        let mut ops = OpCounter::default();
        let emb = timestep_embedding(timesteps, self.config.temb_dim);
        let (_, _, temb) = self.time_mlp(&emb, &mut ops);
        silu(temb.view(), &mut ops)
    }

    fn time_mlp(
        &self,
        emb: &Array2<f64>,
        ops: &mut OpCounter,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let p = &self.params;
        let s = &self.slots;
        let pre = linear(emb.view(), p.mat(s.time_fc1.w), p.vector(s.time_fc1.b), ops);
        let hidden = silu(pre.view(), ops);
        let temb = linear(hidden.view(), p.mat(s.time_fc2.w), p.vector(s.time_fc2.b), ops);
        (pre, hidden, temb)
    }

    /// Applies block `l` to `z` given the conditioning signal and an optional
    /// per-row mask (`None` runs the block unrouted).
    pub fn apply_block(
        &self,
        l: usize,
        z: ArrayView2<f64>,
        cond: ArrayView2<f64>,
        mask: Option<ArrayView2<f64>>,
    ) -> Result<Array2<f64>> {
        self.check_block_args(l, z, cond, mask)?;
        Ok(self.block_forward(l, z, cond, mask, &mut OpCounter::default()).0)
    }

    /// Normalised input `gain * norm(z) + bias` of ADM block `l`, i.e. the
    /// tensor the routing mask multiplies.
    pub fn adm_normalized(&self, l: usize, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let slots = self.adm_slots(l)?;
        self.check_block_args(l, z, z, None)?;
        Ok(blocks::adm_norm(&self.params, &slots, z, &mut OpCounter::default()).2)
    }

    /// Residual (non-skip) branch `F(m * h, temb)` of ADM block `l` for a
    /// given normalised input `h`.
    pub fn adm_branch(
        &self,
        l: usize,
        normalized: ArrayView2<f64>,
        cond: ArrayView2<f64>,
        mask: Option<ArrayView2<f64>>,
    ) -> Result<Array2<f64>> {
        let slots = self.adm_slots(l)?;
        self.check_block_args(l, normalized, cond, mask)?;
        Ok(blocks::adm_branch(&self.params, &slots, normalized, cond, mask, &mut OpCounter::default()).out)
    }

    fn adm_slots(&self, l: usize) -> Result<AdmSlots> {
        match self.slots.blocks.get(l) {
            Some(BlockSlots::Adm(s)) => Ok(*s),
            Some(BlockSlots::Dit(_)) => Err(Error::invalid("block", format!("block {l} is not an ADM block"))),
            None => Err(Error::OutOfRange {
                what: "block",
                index: l,
                lo: 0,
                hi: self.config.n_blocks - 1,
            }),
        }
    }

    /// Vector-Jacobian product of block `l`: returns `(dL/dz, dL/dparams)`
    /// for an upstream gradient `d_out`, with `cond` held fixed.
    pub fn block_vjp(
        &self,
        l: usize,
        z: ArrayView2<f64>,
        cond: ArrayView2<f64>,
        mask: Option<ArrayView2<f64>>,
        d_out: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ParamSet)> {
        self.check_block_args(l, z, cond, mask)?;
        if d_out.dim() != z.dim() {
            return Err(Error::shape("block upstream gradient", format!("{:?}", z.dim()), format!("{:?}", d_out.dim())));
        }
        let (_, cache) = self.block_forward(l, z, cond, mask, &mut OpCounter::default());
        let mut grads = self.params.zeros_like();
        let (dz, _) = self.block_backward(l, &cache, cond, mask, d_out, &mut grads);
        Ok((dz, grads))
    }

    fn check_block_args(
        &self,
        l: usize,
        z: ArrayView2<f64>,
        cond: ArrayView2<f64>,
        mask: Option<ArrayView2<f64>>,
    ) -> Result<()> {
        if l >= self.config.n_blocks {
            return Err(Error::OutOfRange {
                what: "block",
                index: l,
                lo: 0,
                hi: self.config.n_blocks - 1,
            });
        }
        let want = (z.nrows(), self.config.width);
        for (what, dim) in [("block input", z.dim()), ("block conditioning", cond.dim())] {
            if dim != want {
                return Err(Error::shape(what, format!("{want:?}"), format!("{dim:?}")));
            }
        }
        if let Some(m) = mask {
            if m.dim() != want {
                return Err(Error::shape("block mask", format!("{want:?}"), format!("{:?}", m.dim())));
            }
        }
        Ok(())
    }

    fn block_forward(
        &self,
        l: usize,
        z: ArrayView2<f64>,
        cond: ArrayView2<f64>,
        mask: Option<ArrayView2<f64>>,
        ops: &mut OpCounter,
    ) -> (Array2<f64>, BlockCache) {
        match &self.slots.blocks[l] {
            BlockSlots::Adm(s) => {
                let (out, c) = blocks::adm_forward(&self.params, s, z, cond, mask, ops);
                (out, BlockCache::Adm(c))
            }
            BlockSlots::Dit(s) => {
                let (out, c) = blocks::dit_forward(&self.params, s, z, cond, mask, ops);
                (out, BlockCache::Dit(c))
            }
        }
    }

    fn block_backward(
        &self,
        l: usize,
        cache: &BlockCache,
        cond: ArrayView2<f64>,
        mask: Option<ArrayView2<f64>>,
        d_out: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> (Array2<f64>, Array2<f64>) {
        match (&self.slots.blocks[l], cache) {
            (BlockSlots::Adm(s), BlockCache::Adm(c)) => {
                blocks::adm_backward(&self.params, s, c, cond, mask, d_out, grads)
            }
            (BlockSlots::Dit(s), BlockCache::Dit(c)) => {
                blocks::dit_backward(&self.params, s, c, cond, mask, d_out, grads)
            }
            _ => unreachable!("cache kind follows the block layout"),
        }
    }

    fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        timesteps: &[usize],
        bank: &MaskBank,
        ops: &mut OpCounter,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_inputs(x, timesteps, bank)?;
        let p = &self.params;
        let s = &self.slots;
        let masks = if self.config.routing.is_routed() {
            Some(mask_rows(bank, timesteps)?)
        } else {
            None
        };

        let emb = timestep_embedding(timesteps, self.config.temb_dim);
        let (time_pre, time_hidden, temb) = self.time_mlp(&emb, ops);
        let cond = silu(temb.view(), ops);

        let mut stream = Vec::with_capacity(self.config.n_blocks + 1);
        stream.push(linear(x, p.mat(s.input.w), p.vector(s.input.b), ops));
        let mut caches = Vec::with_capacity(self.config.n_blocks);
        for l in 0..self.config.n_blocks {
            let (next, cache) = self.block_forward(
                l,
                stream[l].view(),
                cond.view(),
                masks.as_ref().map(|m| m.view()),
                ops,
            );
            stream.push(next);
            caches.push(cache);
        }

        let last = stream.last().expect("at least one block");
        let (out_norm, out_inv) = layer_norm(last.view(), ops);
        let mut out_affine = &out_norm * &p.vector(s.out_gain);
        out_affine += &p.vector(s.out_bias);
        ops.elementwise += out_norm.len() as u64;
        let eps = linear(out_affine.view(), p.mat(s.output.w), p.vector(s.output.b), ops);

        let cache = ForwardCache {
            emb,
            time_pre,
            time_hidden,
            temb,
            cond,
            stream,
            blocks: caches,
            out_norm,
            out_inv,
            out_affine,
            masks,
        };
        Ok((eps, cache))
    }

    /// Predicted noise for a batch `x` at per-row timesteps (1-based). The
    /// bank supplies row `t - 1` as the mask of each sample; it also bounds
    /// the valid timesteps when routing is disabled.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        timesteps: &[usize],
        bank: &MaskBank,
    ) -> Result<Array2<f64>> {
        Ok(self
            .forward_cached(x, timesteps, bank, &mut OpCounter::default())?
            .0)
    }

    /// [`forward`](Self::forward) that also records every block output.
    pub fn forward_traced(
        &self,
        x: ArrayView2<f64>,
        timesteps: &[usize],
        bank: &MaskBank,
    ) -> Result<(Array2<f64>, ActivationTrace)> {
        let (eps, cache) = self.forward_cached(x, timesteps, bank, &mut OpCounter::default())?;
        let trace = ActivationTrace {
            timesteps: timesteps.to_vec(),
            blocks: cache.stream.into_iter().skip(1).collect(),
        };
        Ok((eps, trace))
    }

    /// [`forward`](Self::forward) that also reports multiplication counts.
    pub fn forward_counted(
        &self,
        x: ArrayView2<f64>,
        timesteps: &[usize],
        bank: &MaskBank,
    ) -> Result<(Array2<f64>, OpCounter)> {
        let mut ops = OpCounter::default();
        let (eps, _) = self.forward_cached(x, timesteps, bank, &mut ops)?;
        Ok((eps, ops))
    }

    /// Weighted noise-prediction loss and its exact gradient with respect to
    /// every parameter.
    ///
    /// `loss = mean_i w_i * mean_j (eps_pred_ij - eps_ij)^2`.
    pub fn backward(
        &self,
        x_t: ArrayView2<f64>,
        timesteps: &[usize],
        eps: ArrayView2<f64>,
        bank: &MaskBank,
        weights: &[f64],
    ) -> Result<(f64, ParamSet)> {
        if eps.dim() != x_t.dim() {
            return Err(Error::shape("noise target", format!("{:?}", x_t.dim()), format!("{:?}", eps.dim())));
        }
        if weights.len() != x_t.nrows() {
            return Err(Error::shape("loss weights", x_t.nrows(), weights.len()));
        }
        let (pred, cache) = self.forward_cached(x_t, timesteps, bank, &mut OpCounter::default())?;
        let weights = Array1::from(weights.to_vec());
        let loss = crate::diffusion::ddpm_loss(eps, pred.view(), weights.view())?;

        let (n, d) = pred.dim();
        let scale = 2.0 / (n * d) as f64;
        let mut d_pred = &pred - &eps;
        for (mut row, w) in d_pred.outer_iter_mut().zip(&weights) {
            row *= scale * w;
        }

        let p = &self.params;
        let s = &self.slots;
        let mut grads = p.zeros_like();

        let d_affine = linear_backward(
            cache.out_affine.view(),
            p.mat(s.output.w),
            d_pred.view(),
            &mut grads,
            s.output.pair(),
        );
        {
            let mut gg = grads.vector_mut(s.out_gain);
            gg += &(&d_affine * &cache.out_norm).sum_axis(Axis(0));
        }
        {
            let mut gb = grads.vector_mut(s.out_bias);
            gb += &d_affine.sum_axis(Axis(0));
        }
        let d_norm = &d_affine * &p.vector(s.out_gain);
        let mut dz = layer_norm_backward(d_norm.view(), cache.out_norm.view(), cache.out_inv.view());

        let mut d_cond = Array2::zeros(cache.cond.dim());
        let masks = cache.masks.as_ref().map(|m| m.view());
        for l in (0..self.config.n_blocks).rev() {
            let (dz_in, dc) = self.block_backward(
                l,
                &cache.blocks[l],
                cache.cond.view(),
                masks,
                dz.view(),
                &mut grads,
            );
            d_cond += &dc;
            dz = dz_in;
        }
        linear_backward(x_t, p.mat(s.input.w), dz.view(), &mut grads, s.input.pair());

        let d_temb = silu_backward(cache.temb.view(), d_cond.view());
        let d_hidden = linear_backward(
            cache.time_hidden.view(),
            p.mat(s.time_fc2.w),
            d_temb.view(),
            &mut grads,
            s.time_fc2.pair(),
        );
        let d_pre = silu_backward(cache.time_pre.view(), d_hidden.view());
        linear_backward(
            cache.emb.view(),
            p.mat(s.time_fc1.w),
            d_pre.view(),
            &mut grads,
            s.time_fc1.pair(),
        );
        Ok((loss, grads))
    }

    /// Pairs the network with a mask bank as a [`NoisePredictor`].
    pub fn with_bank<'a>(&'a self, bank: &'a MaskBank) -> Routed<'a> {
        Routed { model: self, bank }
    }
}

/// A denoiser bound to its mask bank.
#[derive(Debug, Clone, Copy)]
pub struct Routed<'a> {
    pub model: &'a Denoiser,
    pub bank: &'a MaskBank,
}

impl NoisePredictor for Routed<'_> {
    fn data_dim(&self) -> usize {
        self.model.config.data_dim
    }

    fn predict_noise(&self, x: ArrayView2<f64>, timesteps: &[usize]) -> Result<Array2<f64>> {
        self.model.forward(x, timesteps, self.bank)
    }
}

/// Fills every parameter with small seeded noise around its current value,
/// including the zero-initialised ones. Used to leave the trivial
/// identity-at-init regime in gradient and routing checks.
pub fn jitter_params(params: &mut ParamSet, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.values_mut() {
        *v += rng.random_range(-scale..scale);
    }
}
