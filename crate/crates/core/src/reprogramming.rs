//! Trainable projectors mapping a teacher stage feature into the geometry of
//! the paired student stage.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::models::FeatureDims;
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    /// Flatten, one dense map, reshape.
    Linear,
    /// Bilinear resize then a 1x1 conv.
    #[serde(rename = "resize_1x1")]
    Resize1x1,
    /// 3x3 conv + ReLU + resize, then 1x1 conv.
    Conv2,
    /// 3x3 conv + ReLU, 3x3 conv + ReLU + resize, then 1x1 conv.
    Conv3Default,
    /// `Conv3Default` with four times the hidden width.
    WideConv3,
}

impl ProjectorKind {
    pub const ALL: [ProjectorKind; 5] = [Self::Linear, Self::Resize1x1, Self::Conv2, Self::Conv3Default, Self::WideConv3];
}

impl FromStr for ProjectorKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "resize_1x1" => Ok(Self::Resize1x1),
            "conv2" => Ok(Self::Conv2),
            "conv3_default" => Ok(Self::Conv3Default),
            "wide_conv3" => Ok(Self::WideConv3),
            other => Err(invalid(format!("unknown projector kind {other:?}"))),
        }
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Resize1x1 => "resize_1x1",
            Self::Conv2 => "conv2",
            Self::Conv3Default => "conv3_default",
            Self::WideConv3 => "wide_conv3",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub kind: ProjectorKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_hw: [usize; 2],
    pub out_hw: [usize; 2],
    /// Overrides the kind's default hidden width.
    #[serde(default)]
    pub hidden_width: Option<usize>,
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl ProjectorSpec {
    pub fn between(kind: ProjectorKind, from: FeatureDims, to: FeatureDims) -> Self {
        Self {
            kind,
            in_channels: from.channels,
            out_channels: to.channels,
            in_hw: [from.height, from.width],
            out_hw: [to.height, to.width],
            hidden_width: None,
            bias: true,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_width.unwrap_or(match self.kind {
            ProjectorKind::WideConv3 => 4 * self.out_channels,
            _ => self.out_channels,
        })
    }

    pub fn input_dims(&self) -> FeatureDims {
        FeatureDims { channels: self.in_channels, height: self.in_hw[0], width: self.in_hw[1] }
    }

    pub fn output_dims(&self) -> FeatureDims {
        FeatureDims { channels: self.out_channels, height: self.out_hw[0], width: self.out_hw[1] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid("projector channel counts must be positive"));
        }
        if self.in_hw.contains(&0) || self.out_hw.contains(&0) {
            return Err(invalid("projector spatial sizes must be positive"));
        }
        if self.hidden() == 0 {
            return Err(invalid("projector hidden width must be positive"));
        }
        Ok(())
    }

    /// Weight count implied by the spec.
    pub fn param_count(&self) -> u64 {
        let b = |n: usize| if self.bias { n as u64 } else { 0 };
        let (ci, co, h) = (self.in_channels as u64, self.out_channels as u64, self.hidden() as u64);
        match self.kind {
            ProjectorKind::Linear => {
                let din = self.input_dims().numel() as u64;
                let dout = self.output_dims().numel() as u64;
                din * dout + b(self.output_dims().numel())
            }
            ProjectorKind::Resize1x1 => ci * co + b(self.out_channels),
            ProjectorKind::Conv2 => ci * h * 9 + b(self.hidden()) + h * co + b(self.out_channels),
            ProjectorKind::Conv3Default | ProjectorKind::WideConv3 => {
                ci * h * 9 + b(self.hidden()) + h * h * 9 + b(self.hidden()) + h * co + b(self.out_channels)
            }
        }
    }
}

/// Multiply-accumulates of one forward pass for a single sample.
pub fn count_flops(spec: &ProjectorSpec) -> u64 {
    let (ci, co, h) = (spec.in_channels as u64, spec.out_channels as u64, spec.hidden() as u64);
    let in_px = (spec.in_hw[0] * spec.in_hw[1]) as u64;
    let out_px = (spec.out_hw[0] * spec.out_hw[1]) as u64;
    match spec.kind {
        ProjectorKind::Linear => spec.input_dims().numel() as u64 * spec.output_dims().numel() as u64,
        ProjectorKind::Resize1x1 => ci * co * out_px,
        ProjectorKind::Conv2 => ci * h * 9 * in_px + h * co * out_px,
        ProjectorKind::Conv3Default | ProjectorKind::WideConv3 => ci * h * 9 * in_px + h * h * 9 * in_px + h * co * out_px,
    }
}

#[derive(Clone, Debug)]
enum Layers {
    Linear(Linear),
    Resize1x1(Conv2d),
    Conv2 { c1: Conv2d, out: Conv2d },
    Conv3 { c1: Conv2d, c2: Conv2d, out: Conv2d },
}

#[derive(Clone, Debug)]
pub struct Projector {
    spec: ProjectorSpec,
    layers: Layers,
    params: ParamStore,
}

pub fn build_projector(spec: &ProjectorSpec, seed: u64) -> Result<Projector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let (ci, co, hid, b) = (spec.in_channels, spec.out_channels, spec.hidden(), spec.bias);
    let out_gain = std::f64::consts::FRAC_1_SQRT_2;
    let layers = match spec.kind {
        ProjectorKind::Linear => Layers::Linear(Linear::new(
            &mut params,
            "fc",
            spec.input_dims().numel(),
            spec.output_dims().numel(),
            b,
            &mut rng,
        )),
        ProjectorKind::Resize1x1 => Layers::Resize1x1(Conv2d::new(&mut params, "proj", ci, co, 1, 1, 0, b, out_gain, &mut rng)),
        ProjectorKind::Conv2 => Layers::Conv2 {
            c1: Conv2d::new(&mut params, "conv1", ci, hid, 3, 1, 1, b, 1.0, &mut rng),
            out: Conv2d::new(&mut params, "proj", hid, co, 1, 1, 0, b, out_gain, &mut rng),
        },
        ProjectorKind::Conv3Default | ProjectorKind::WideConv3 => Layers::Conv3 {
            c1: Conv2d::new(&mut params, "conv1", ci, hid, 3, 1, 1, b, 1.0, &mut rng),
            c2: Conv2d::new(&mut params, "conv2", hid, hid, 3, 1, 1, b, 1.0, &mut rng),
            out: Conv2d::new(&mut params, "proj", hid, co, 1, 1, 0, b, out_gain, &mut rng),
        },
    };
    Ok(Projector { spec: spec.clone(), layers, params })
}

impl Projector {
    /// A `resize_1x1` projector whose 1x1 kernel is the identity.
    pub fn identity(spec: &ProjectorSpec) -> Result<Self> {
        if spec.kind != ProjectorKind::Resize1x1 || spec.in_channels != spec.out_channels {
            return Err(invalid("identity projector needs resize_1x1 with equal channel counts"));
        }
        let mut p = build_projector(spec, 0)?;
        let Layers::Resize1x1(conv) = &p.layers else { unreachable!() };
        let (w, b) = (conv.weight, conv.bias);
        let c = spec.in_channels;
        *p.params.get_mut(w) = Tensor::eye(c).reshaped(vec![c, c, 1, 1]);
        if let Some(b) = b {
            *p.params.get_mut(b) = Tensor::zeros([c]);
        }
        Ok(p)
    }

    pub fn spec(&self) -> &ProjectorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Multiply the output layer's weight and bias by `factor`.
    pub fn scale_output(&mut self, factor: f64) {
        let (w, b) = match &self.layers {
            Layers::Linear(l) => (l.weight, l.bias),
            Layers::Resize1x1(c) | Layers::Conv2 { out: c, .. } | Layers::Conv3 { out: c, .. } => (c.weight, c.bias),
        };
        for id in std::iter::once(w).chain(b) {
            let t = self.params.get(id).scale(factor);
            *self.params.get_mut(id) = t;
        }
    }

    /// `f_teacher (B, C, H, W) -> (B, C', H', W')` inside a graph.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let d = self.spec.input_dims();
        if s.len() != 4 || s[1..] != [d.channels, d.height, d.width] {
            return Err(invalid(format!(
                "projector expects (B, {}, {}, {}), got {s:?}",
                d.channels, d.height, d.width
            )));
        }
        let [oh, ow] = self.spec.out_hw;
        match &self.layers {
            Layers::Linear(fc) => {
                let o = self.spec.output_dims();
                fc.forward(p, x.flatten_batch()?)?.reshape([s[0], o.channels, o.height, o.width])
            }
            Layers::Resize1x1(conv) => conv.forward(p, x.resize_bilinear(oh, ow)?),
            Layers::Conv2 { c1, out } => {
                let y = c1.forward(p, x)?.relu().resize_bilinear(oh, ow)?;
                out.forward(p, y)
            }
            Layers::Conv3 { c1, c2, out } => {
                let y = c1.forward(p, x)?.relu();
                let y = c2.forward(p, y)?.relu().resize_bilinear(oh, ow)?;
                out.forward(p, y)
            }
        }
    }
}

/// Gradient-free reprogramming of a teacher feature batch.
pub fn reprogram(projector: &Projector, f_teacher: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let p = projector.params.bind(&g, false);
    let out = projector.forward(&p, g.constant(f_teacher.clone()))?;
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamW, AdamWConfig};

    fn spec(kind: ProjectorKind, ci: usize, co: usize, ihw: usize, ohw: usize) -> ProjectorSpec {
        ProjectorSpec {
            kind,
            in_channels: ci,
            out_channels: co,
            in_hw: [ihw, ihw],
            out_hw: [ohw, ohw],
            hidden_width: None,
            bias: true,
        }
    }

    #[test]
    fn analytic_param_counts() {
        let lin = spec(ProjectorKind::Linear, 64, 32, 16, 8);
        assert_eq!(lin.param_count(), 16384 * 2048 + 2048);
        let r = spec(ProjectorKind::Resize1x1, 64, 32, 16, 8);
        assert_eq!(r.param_count(), 64 * 32 + 32);
    }

    #[test]
    fn flop_examples() {
        assert_eq!(count_flops(&spec(ProjectorKind::Resize1x1, 64, 32, 16, 8)), 131072);
        let lin = ProjectorSpec { in_channels: 10, out_channels: 10, in_hw: [1, 1], out_hw: [1, 1], ..spec(ProjectorKind::Linear, 1, 1, 1, 1) };
        assert_eq!(count_flops(&lin), 100);
        for kind in [ProjectorKind::Resize1x1, ProjectorKind::Conv2, ProjectorKind::Conv3Default] {
            let small = count_flops(&spec(kind, 8, 8, 8, 8));
            let big = count_flops(&spec(kind, 8, 8, 16, 16));
            assert_eq!(big, 4 * small, "{kind}");
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let s = spec(ProjectorKind::Conv3Default, 6, 4, 8, 4);
        let a = build_projector(&s, 3).unwrap();
        let b = build_projector(&s, 3).unwrap();
        assert!(a.params().same_weights(b.params()));
        let x = Tensor::full([2, 6, 8, 8], 0.3);
        let y = reprogram(&a, &x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        assert!(reprogram(&a, &Tensor::zeros([2, 5, 8, 8])).is_err());
    }

    #[test]
    fn identity_projector_is_exact() {
        let s = spec(ProjectorKind::Resize1x1, 3, 3, 5, 5);
        let p = Projector::identity(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([2, 3, 5, 5], 1.0, &mut rng);
        let y = reprogram(&p, &x).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bias_free_linear_kinds_map_zero_to_zero() {
        for kind in [ProjectorKind::Linear, ProjectorKind::Resize1x1] {
            let s = ProjectorSpec { bias: false, ..spec(kind, 4, 3, 4, 2) };
            let p = build_projector(&s, 0).unwrap();
            let y = reprogram(&p, &Tensor::zeros([2, 4, 4, 4])).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_channels_rejected() {
        assert!(build_projector(&spec(ProjectorKind::Conv2, 0, 3, 4, 4), 0).is_err());
    }

    #[test]
    fn one_step_changes_parameters() {
        let s = spec(ProjectorKind::Conv2, 2, 3, 4, 2);
        let mut p = build_projector(&s, 0).unwrap();
        let before = p.params().clone();
        let g = Graph::new();
        let bound = p.params().bind(&g, true);
        let x = g.constant(Tensor::full([2, 2, 4, 4], 1.0));
        let loss = p.forward(&bound, x).unwrap().mul(p.forward(&bound, x).unwrap()).unwrap().sum();
        let grads = bound.grads(&g.backward(loss).unwrap());
        drop(bound);
        let mut opt = AdamW::new(AdamWConfig::default(), &[p.params()]);
        opt.step(&mut [p.params_mut()], &[grads]).unwrap();
        assert!(!p.params().same_weights(&before));
    }
}
