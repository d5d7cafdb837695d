//! Parameter storage, the handful of layers the models need, and Adam.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchNormStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named tensors owned by a model: trainable weights plus buffers such as
/// batch-norm running statistics. Sharing a layer means sharing its ids.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<Entry>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn trainable_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::format("checkpoint", format!("unknown parameter {name}")))?;
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(Error::dim("assign", cur.shape(), value.shape()));
        }
        *self.get_mut(id) = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and values, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            h.update(e.value.to_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Fan-in scaled uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// One forward pass: binds parameters to tape leaves on first use and owns
/// the batch-norm mode.
pub struct Forward<'t, 'p> {
    pub tape: &'t Tape,
    params: &'p mut Params,
    vars: Vec<Option<Var<'t>>>,
    mode: BnMode,
    track_grad: bool,
}

impl<'t, 'p> Forward<'t, 'p> {
    /// Training pass: gradients tracked, batch statistics.
    pub fn train(tape: &'t Tape, params: &'p mut Params) -> Self {
        Self::with(tape, params, BnMode::Train, true)
    }

    /// Inference pass: no gradients, running statistics.
    pub fn eval(tape: &'t Tape, params: &'p mut Params) -> Self {
        Self::with(tape, params, BnMode::Eval, false)
    }

    pub fn with(tape: &'t Tape, params: &'p mut Params, mode: BnMode, track_grad: bool) -> Self {
        let n = params.len();
        Forward {
            tape,
            params,
            vars: vec![None; n],
            mode,
            track_grad,
        }
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn params(&self) -> &Params {
        self.params
    }

    /// Uses `v` wherever parameter `id` is read during this pass.
    pub fn bind(&mut self, id: ParamId, v: Var<'t>) {
        self.vars[id.0] = Some(v);
    }

    pub fn var(&mut self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let v = if self.track_grad && self.params.is_trainable(id) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter that was read and received one.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    fn bn_stats(&self, layer: &BatchNorm) -> BatchNormStats {
        let ch = self.params.get(layer.gamma).numel();
        let mut s = BatchNormStats::new(ch);
        s.mean = self.params.get(layer.running_mean).data().to_vec();
        s.var = self.params.get(layer.running_var).data().to_vec();
        s
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = uniform_fan_in(rng, &[c_out, c_in, k, k], c_in * k * k);
        Conv2d {
            weight: params.add(format!("{name}.weight"), w, true),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, f: &mut Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = f.var(self.weight);
        x.conv2d(w, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: params.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: params.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                false,
            ),
        }
    }

    pub fn forward<'t>(&self, f: &mut Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = f.var(self.gamma);
        let beta = f.var(self.beta);
        let mut stats = f.bn_stats(self);
        let y = x.batchnorm(gamma, beta, &mut stats, f.mode)?;
        if f.mode == BnMode::Train {
            f.params.get_mut(self.running_mean).data_mut().copy_from_slice(&stats.mean);
            f.params.get_mut(self.running_var).data_mut().copy_from_slice(&stats.var);
        }
        Ok(y)
    }
}

/// 3x3 convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new<R: Rng>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(params, rng, &format!("{name}.conv"), c_in, c_out, 3, stride, 1),
            bn: BatchNorm::new(params, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward<'t>(&self, f: &mut Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(f, x)?;
        Ok(self.bn.forward(f, y)?.relu())
    }
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut Params, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: params.add(
                format!("{name}.weight"),
                uniform_fan_in(rng, &[d_in, d_out], d_in),
                true,
            ),
            bias: params.add(format!("{name}.bias"), uniform_fan_in(rng, &[d_out], d_in), true),
        }
    }

    pub fn forward<'t>(&self, f: &mut Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = f.var(self.weight);
        let b = f.var(self.bias);
        x.matmul(w)?.add_row_bias(b)
    }
}

/// Adam with bias correction; parameters without a gradient are left alone.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params, grads: &[(ParamId, Tensor)]) {
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            if !params.is_trainable(*id) {
                continue;
            }
            let n = g.numel();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let p = params.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
