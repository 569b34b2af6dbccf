//! Parameter storage, layers and the AdamW optimiser.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Named weight tensors owned by one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Arc::new(t));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| t.as_ref()))
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Replace all tensors, keeping names; shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(invalid(format!("expected {} tensors, got {}", self.tensors.len(), tensors.len())));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(invalid(format!(
                    "parameter {}: shape {:?}, expected {:?}",
                    self.names[i],
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors = tensors.into_iter().map(Arc::new).collect();
        Ok(())
    }

    /// Bitwise equality of all weights.
    pub fn same_weights(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Register every weight as a graph leaf.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        Bound { vars: self.tensors.iter().map(|t| graph.leaf(Arc::clone(t), trainable)).collect() }
    }

    /// Concatenated gradient of the listed parameters, zeros where absent.
    pub fn flat_grad(&self, bound: &Bound<'_>, grads: &Gradients, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            match grads.get(bound.get(id)) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(self.get(id).len())),
            }
        }
        out
    }
}

/// Graph leaves for one [`ParamStore`].
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

/// He-normal init for a weight whose layer is followed by a rectifier.
pub(crate) fn he_normal<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = he_normal(vec![out_channels, in_channels, kernel, kernel], fan_in, rng).scale(gain);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_channels])));
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.stride, self.pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s: usize| (s + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.bias.map_or(0, |_| self.out_channels)
    }

    /// Multiply-accumulates for one sample producing an `oh x ow` map.
    pub fn macs(&self, oh: usize, ow: usize) -> u64 {
        (self.out_channels * self.in_channels * self.kernel * self.kernel * oh * ow) as u64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn([out_features, in_features], (1.0 / in_features as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_features])));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.linear(p.get(self.weight), self.bias.map(|b| p.get(b)))
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.bias.map_or(0, |_| self.out_features)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Decoupled-weight-decay Adam over a fixed list of stores.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<Tensor>>,
    v: Vec<Vec<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, stores: &[&ParamStore]) -> Self {
        let zeros = |s: &&ParamStore| s.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { cfg, step: 0, m: stores.iter().map(zeros).collect(), v: stores.iter().map(zeros).collect() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[s][p]` is the gradient of parameter `p` in store `s`;
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &[Vec<Option<Tensor>>]) -> Result<()> {
        if stores.len() != self.m.len() || grads.len() != stores.len() {
            return Err(invalid("optimizer/store count mismatch"));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (s, store) in stores.iter_mut().enumerate() {
            for (p, g) in grads[s].iter().enumerate() {
                let Some(g) = g else { continue };
                let m = &mut self.m[s][p];
                let v = &mut self.v[s][p];
                let w = Arc::make_mut(&mut store.tensors[p]);
                for i in 0..g.len() {
                    let gi = g.data()[i];
                    let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                    let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                    let wi = &mut w.data_mut()[i];
                    *wi -= c.lr * (update + c.weight_decay * *wi);
                }
            }
        }
        Ok(())
    }
}
