//! Block-decomposable toy networks.
//!
//! Two families stand in for the architectures that matter here:
//!
//! * `conv_hierarchical`: a CNN-like stack whose blocks progressively
//!   downsample and widen, used for students.
//! * `patch_flat`: a ViT-like stack that patchifies once and then keeps a
//!   uniform token grid through residual blocks, used for teachers.
//!
//! Stage features of the two families differ in both channel count and
//! resolution, so every projector between them has real work to do.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ConvHierarchical,
    PatchFlat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Global average pool followed by a linear classifier.
    Classifier { classes: usize },
    /// A 3x3 conv to one foreground logit per feature cell, bilinearly
    /// upsampled to the input size.
    DenseMask,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Number of blocks.
    pub depth: usize,
    /// Base channel count.
    pub width: usize,
    pub head: HeadSpec,
    pub in_channels: usize,
    pub image_size: [usize; 2],
    /// Patch size of the `patch_flat` stem.
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Leading `conv_hierarchical` blocks that use stride 2.
    #[serde(default = "default_downsample")]
    pub downsample_blocks: usize,
}

fn default_patch() -> usize {
    4
}

fn default_downsample() -> usize {
    3
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(invalid("model depth, width and input channels must be positive"));
        }
        if self.image_size.iter().any(|&s| s == 0) {
            return Err(invalid("image size must be positive"));
        }
        if let HeadSpec::Classifier { classes } = self.head {
            if classes < 2 {
                return Err(invalid("classifier head needs at least two classes"));
            }
        }
        match self.family {
            Family::PatchFlat => {
                if self.patch == 0 || self.image_size.iter().any(|&s| s % self.patch != 0) {
                    return Err(invalid(format!(
                        "patch size {} must divide image size {:?}",
                        self.patch, self.image_size
                    )));
                }
            }
            Family::ConvHierarchical => {
                let min = self.image_size[0].min(self.image_size[1]);
                if min >> self.downsample_blocks.min(self.depth) == 0 {
                    return Err(invalid("too many downsampling blocks for the image size"));
                }
            }
        }
        Ok(())
    }
}

/// Channel and spatial size of one feature map (per sample).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureDims {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug)]
enum Block {
    /// conv + ReLU
    Conv(Conv2d),
    /// `x + proj(relu(mix(x)))`
    Residual { mix: Conv2d, proj: Conv2d },
}

#[derive(Clone, Debug)]
enum Head {
    Classifier(Linear),
    DenseMask { conv: Conv2d, out_hw: [usize; 2] },
}

/// A network as an ordered list of blocks plus an optional output head.
#[derive(Clone, Debug)]
pub struct BlockSequence {
    spec: ModelSpec,
    blocks: Vec<Block>,
    head: Option<Head>,
    params: ParamStore,
    block_params: Vec<Vec<ParamId>>,
    dims: Vec<FeatureDims>,
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<BlockSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut blocks = Vec::with_capacity(spec.depth);
    let mut block_params = Vec::with_capacity(spec.depth);
    let mut dims = Vec::with_capacity(spec.depth);
    let [mut h, mut w] = spec.image_size;
    let mut c = spec.in_channels;
    for j in 0..spec.depth {
        let first = params.len();
        let name = format!("block{j}");
        let block = match spec.family {
            Family::ConvHierarchical => {
                let out = spec.width << j.min(2);
                let stride = if j < spec.downsample_blocks { 2 } else { 1 };
                let conv = Conv2d::new(&mut params, &name, c, out, 3, stride, 1, true, 1.0, &mut rng);
                (h, w) = conv.out_hw(h, w);
                c = out;
                Block::Conv(conv)
            }
            Family::PatchFlat if j == 0 => {
                let p = spec.patch;
                let conv = Conv2d::new(&mut params, &name, c, spec.width, p, p, 0, true, 1.0, &mut rng);
                (h, w) = conv.out_hw(h, w);
                c = spec.width;
                Block::Conv(conv)
            }
            Family::PatchFlat => {
                let gain = 1.0 / (spec.depth as f64).sqrt();
                let mix = Conv2d::new(&mut params, &format!("{name}.mix"), c, c, 3, 1, 1, true, 1.0, &mut rng);
                let proj = Conv2d::new(&mut params, &format!("{name}.proj"), c, c, 1, 1, 0, true, gain, &mut rng);
                Block::Residual { mix, proj }
            }
        };
        blocks.push(block);
        block_params.push(params.ids().skip(first).collect());
        dims.push(FeatureDims { channels: c, height: h, width: w });
    }
    let head = match spec.head {
        HeadSpec::Classifier { classes } => Head::Classifier(Linear::new(&mut params, "head", c, classes, true, &mut rng)),
        HeadSpec::DenseMask => Head::DenseMask {
            conv: Conv2d::new(&mut params, "head", c, 1, 3, 1, 1, true, 1.0, &mut rng),
            out_hw: spec.image_size,
        },
    };
    Ok(BlockSequence { spec: spec.clone(), blocks, head: Some(head), params, block_params, dims })
}

impl BlockSequence {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Drop the output head, leaving a pure feature extractor.
    pub fn without_head(mut self) -> Self {
        self.head = None;
        self
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters belonging to block `i`.
    pub fn block_param_ids(&self, i: usize) -> &[ParamId] {
        &self.block_params[i]
    }

    /// Output dims of block `i`.
    pub fn block_dims(&self, i: usize) -> FeatureDims {
        self.dims[i]
    }

    pub fn input_dims(&self) -> FeatureDims {
        FeatureDims { channels: self.spec.in_channels, height: self.spec.image_size[0], width: self.spec.image_size[1] }
    }

    /// Input dims expected by block `i`.
    pub fn block_input_dims(&self, i: usize) -> FeatureDims {
        if i == 0 {
            self.input_dims()
        } else {
            self.dims[i - 1]
        }
    }

    fn block_forward<'g>(&self, p: &Bound<'g>, i: usize, x: Var<'g>) -> Result<Var<'g>> {
        match &self.blocks[i] {
            Block::Conv(conv) => Ok(conv.forward(p, x)?.relu()),
            Block::Residual { mix, proj } => {
                let y = mix.forward(p, x)?.relu();
                x.add(proj.forward(p, y)?)
            }
        }
    }

    /// Apply blocks `range` in order.
    pub fn forward_blocks<'g>(&self, p: &Bound<'g>, mut x: Var<'g>, range: Range<usize>) -> Result<Var<'g>> {
        if range.end > self.blocks.len() {
            return Err(invalid(format!("block range {range:?} exceeds depth {}", self.blocks.len())));
        }
        let want = self.block_input_dims(range.start);
        let s = x.shape();
        if range.start < range.end && (s.len() != 4 || s[1..] != [want.channels, want.height, want.width]) {
            return Err(invalid(format!("block {} expects (B, {}, {}, {}), got {s:?}", range.start, want.channels, want.height, want.width)));
        }
        for i in range {
            x = self.block_forward(p, i, x)?;
        }
        Ok(x)
    }

    /// Every block's output, in order.
    pub fn forward_all<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Vec<Var<'g>>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for i in 0..self.blocks.len() {
            cur = self.forward_blocks(p, cur, i..i + 1)?;
            outs.push(cur);
        }
        Ok(outs)
    }

    pub fn forward_head<'g>(&self, p: &Bound<'g>, feat: Var<'g>) -> Result<Var<'g>> {
        match &self.head {
            None => Err(invalid("model has no output head")),
            Some(Head::Classifier(fc)) => fc.forward(p, feat.global_avg_pool()?),
            Some(Head::DenseMask { conv, out_hw }) => conv.forward(p, feat)?.resize_bilinear(out_hw[0], out_hw[1]),
        }
    }

    /// Full forward pass to logits.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let feat = self.forward_blocks(p, x, 0..self.blocks.len())?;
        self.forward_head(p, feat)
    }

    /// Gradient-free logits for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn student_spec() -> ModelSpec {
        ModelSpec {
            family: Family::ConvHierarchical,
            depth: 4,
            width: 4,
            head: HeadSpec::Classifier { classes: 3 },
            in_channels: 3,
            image_size: [16, 16],
            patch: 4,
            downsample_blocks: 3,
        }
    }

    #[test]
    fn hierarchical_blocks_downsample() {
        let m = build_model(&student_spec(), 0).unwrap();
        assert_eq!(m.n_blocks(), 4);
        let hw: Vec<usize> = (0..4).map(|i| m.block_dims(i).height).collect();
        assert_eq!(hw, vec![8, 4, 2, 2]);
        let ch: Vec<usize> = (0..4).map(|i| m.block_dims(i).channels).collect();
        assert_eq!(ch, vec![4, 8, 16, 16]);
        let out = m.predict(&Tensor::zeros([2, 3, 16, 16])).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
    }

    #[test]
    fn flat_blocks_keep_resolution() {
        let spec = ModelSpec { family: Family::PatchFlat, depth: 12, width: 6, ..student_spec() };
        let m = build_model(&spec, 1).unwrap();
        assert_eq!(m.n_blocks(), 12);
        assert!((0..12).all(|i| m.block_dims(i) == FeatureDims { channels: 6, height: 4, width: 4 }));
    }

    #[test]
    fn equal_seeds_equal_weights() {
        let a = build_model(&student_spec(), 7).unwrap();
        let b = build_model(&student_spec(), 7).unwrap();
        let c = build_model(&student_spec(), 8).unwrap();
        assert!(a.params().same_weights(b.params()));
        assert!(!a.params().same_weights(c.params()));
    }

    #[test]
    fn dense_head_matches_image_size() {
        let spec = ModelSpec { head: HeadSpec::DenseMask, downsample_blocks: 2, ..student_spec() };
        let m = build_model(&spec, 0).unwrap();
        let out = m.predict(&Tensor::zeros([1, 3, 16, 16])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(build_model(&ModelSpec { depth: 0, ..student_spec() }, 0).is_err());
        let flat = ModelSpec { family: Family::PatchFlat, patch: 5, ..student_spec() };
        assert!(build_model(&flat, 0).is_err());
        let headless = build_model(&student_spec(), 0).unwrap().without_head();
        assert!(headless.predict(&Tensor::zeros([1, 3, 16, 16])).is_err());
    }

    #[test]
    fn block_input_shape_is_checked() {
        let m = build_model(&student_spec(), 0).unwrap();
        let g = Graph::new();
        let p = m.params().bind(&g, false);
        let x = g.constant(Tensor::zeros([1, 5, 16, 16]));
        assert!(m.forward_blocks(&p, x, 0..4).is_err());
    }
}
