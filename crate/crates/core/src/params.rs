//! Named parameter tensors and the state carried through training.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::{Error, Result};

/// A dense row-major `f64` tensor with a name.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named tensors. Two sets are compatible when they
/// list the same names with the same shapes in the same order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, tensor: Tensor) -> usize {
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), &t.shape))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub(crate) fn check_layout(&self, other: &ParamSet, context: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(
                context,
                format!("{} tensors", self.tensors.len()),
                format!("{} tensors with different names or shapes", other.tensors.len()),
            ))
        }
    }

    pub fn mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        let t = &self.tensors[idx];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("rank-2 tensor")
    }

    pub fn mat_mut(&mut self, idx: usize) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.tensors[idx];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("rank-2 tensor")
    }

    pub fn vector(&self, idx: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[idx].data[..])
    }

    pub fn vector_mut(&mut self, idx: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.tensors[idx].data[..])
    }

    /// Iterates over every scalar in order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }
}

/// Adam moments. Defaults: `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`,
/// no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: ParamSet,
    pub second: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    /// Applies update number `step` (1-based, used for bias correction).
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, step: u64) -> Result<()> {
        params.check_layout(grads, "adam update")?;
        params.check_layout(&self.first, "adam update")?;
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let moments = self.first.values_mut().zip(self.second.values_mut());
        for ((p, g), (m, v)) in params.values_mut().zip(grads.values()).zip(moments) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Parameters, their EMA shadow, optimizer moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub ema: ParamSet,
    pub optimizer: Adam,
    pub step: u64,
}

impl TrainState {
    /// Fresh state at step 0; the EMA starts as an exact copy of `params`.
    pub fn new(params: ParamSet, lr: f64) -> Self {
        TrainState {
            ema: params.clone(),
            optimizer: Adam::new(&params, lr),
            params,
            step: 0,
        }
    }

    /// One optimizer step followed by the EMA update.
    pub fn apply_gradients(&mut self, grads: &ParamSet, ema_decay: f64) -> Result<()> {
        self.step += 1;
        self.optimizer.update(&mut self.params, grads, self.step)?;
        ema_update(self, ema_decay)
    }
}

/// `ema <- decay * ema + (1 - decay) * param`, elementwise over every tensor.
pub fn ema_update(state: &mut TrainState, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::invalid(
            "ema decay",
            format!("must lie in [0, 1), got {decay}"),
        ));
    }
    state.ema.check_layout(&state.params, "ema update")?;
    for (e, p) in state.ema.values_mut().zip(state.params.values()) {
        *e = decay * *e + (1.0 - decay) * p;
    }
    Ok(())
}
