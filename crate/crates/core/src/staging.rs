//! Coarse stage decomposition of block sequences and teacher-to-student
//! stage pairing.
//!
//! Boundaries are 0-indexed block indices: stage `k` ends with (and its
//! feature is tapped after) block `boundaries[k]`. Teacher and student must
//! agree on the number of stages but nothing else.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::models::BlockSequence;
use crate::nn::Bound;
use crate::tensor::Tensor;

/// A rank-4 `(batch, channels, height, width)` activation.
pub type FeatureMap = Tensor;

/// Stage boundaries of one model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StagePlan {
    boundaries: Vec<usize>,
    n_blocks: usize,
}

impl StagePlan {
    pub fn new(boundaries: Vec<usize>, n_blocks: usize) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(invalid("a stage plan needs at least one stage"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("boundaries {boundaries:?} must be strictly increasing")));
        }
        if *boundaries.last().unwrap() + 1 != n_blocks {
            return Err(invalid(format!(
                "last boundary must be the final block {} (got {boundaries:?})",
                n_blocks.saturating_sub(1)
            )));
        }
        Ok(Self { boundaries, n_blocks })
    }

    /// Near-even split: `boundary_k = ceil(k * B / N) - 1`.
    pub fn even(n_blocks: usize, n_stages: usize) -> Result<Self> {
        if n_stages == 0 || n_stages > n_blocks {
            return Err(invalid(format!("cannot split {n_blocks} blocks into {n_stages} stages")));
        }
        let b = (1..=n_stages).map(|k| (k * n_blocks).div_ceil(n_stages) - 1).collect();
        Self::new(b, n_blocks)
    }

    pub fn n_stages(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    /// Blocks making up stage `k`.
    pub fn stage_blocks(&self, k: usize) -> Range<usize> {
        let start = if k == 0 { 0 } else { self.boundaries[k - 1] + 1 };
        start..self.boundaries[k] + 1
    }

    /// Blocks run after stage `k` (empty for the last stage).
    pub fn blocks_after(&self, k: usize) -> Range<usize> {
        self.boundaries[k] + 1..self.n_blocks
    }
}

/// Split `model` into `n_stages` stages, either at the given boundaries or
/// with the near-even default.
pub fn partition(model: &BlockSequence, n_stages: usize, boundaries: Option<&[usize]>) -> Result<StagePlan> {
    let n_blocks = model.n_blocks();
    if n_stages == 0 || n_stages > n_blocks {
        return Err(invalid(format!("{n_stages} stages requested for a {n_blocks}-block model")));
    }
    match boundaries {
        Some(b) => {
            if b.len() != n_stages {
                return Err(invalid(format!("{} boundaries given for {n_stages} stages", b.len())));
            }
            if let Some(&bad) = b.iter().find(|&&i| i >= n_blocks) {
                return Err(invalid(format!("boundary {bad} out of range for {n_blocks} blocks")));
            }
            StagePlan::new(b.to_vec(), n_blocks)
        }
        None => StagePlan::even(n_blocks, n_stages),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    Identity,
    Reverse,
    ShiftRight,
}

impl FromStr for PairingStrategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "reverse" => Ok(Self::Reverse),
            "shift_right" | "shift-right" => Ok(Self::ShiftRight),
            other => Err(invalid(format!("unknown pairing strategy {other:?}"))),
        }
    }
}

impl fmt::Display for PairingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Reverse => "reverse",
            Self::ShiftRight => "shift_right",
        })
    }
}

/// Bijection from teacher stage to the student stage it is injected after.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pairing(Vec<usize>);

impl Pairing {
    pub fn new(targets: Vec<usize>) -> Result<Self> {
        let n = targets.len();
        let mut seen = vec![false; n];
        for &t in &targets {
            if t >= n || std::mem::replace(&mut seen[t], true) {
                return Err(invalid(format!("pairing {targets:?} is not a permutation")));
            }
        }
        Ok(Self(targets))
    }

    /// Student stage (0-based) receiving teacher stage `i`.
    pub fn target(&self, teacher_stage: usize) -> usize {
        self.0[teacher_stage]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based image of `1..=N`.
    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|t| t + 1).collect()
    }
}

pub fn make_pairing(n_stages: usize, strategy: PairingStrategy) -> Result<Pairing> {
    if n_stages == 0 {
        return Err(invalid("pairing needs at least one stage"));
    }
    let n = n_stages;
    let targets = match strategy {
        PairingStrategy::Identity => (0..n).collect(),
        PairingStrategy::Reverse => (0..n).map(|i| n - 1 - i).collect(),
        PairingStrategy::ShiftRight => (0..n).map(|i| (i + 1) % n).collect(),
    };
    Pairing::new(targets)
}

/// Teacher plan, student plan and their pairing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageLayout {
    pub teacher: StagePlan,
    pub student: StagePlan,
    pub pairing: Pairing,
}

impl StageLayout {
    pub fn new(teacher: StagePlan, student: StagePlan, pairing: Pairing) -> Result<Self> {
        let n = teacher.n_stages();
        if student.n_stages() != n || pairing.len() != n {
            return Err(invalid(format!(
                "stage count mismatch: teacher {n}, student {}, pairing {}",
                student.n_stages(),
                pairing.len()
            )));
        }
        Ok(Self { teacher, student, pairing })
    }

    pub fn n_stages(&self) -> usize {
        self.teacher.n_stages()
    }
}

/// Stage features inside a graph.
pub fn stage_outputs_var<'g>(model: &BlockSequence, p: &Bound<'g>, plan: &StagePlan, input: Var<'g>) -> Result<Vec<Var<'g>>> {
    if plan.n_blocks() != model.n_blocks() {
        return Err(invalid(format!("plan covers {} blocks, model has {}", plan.n_blocks(), model.n_blocks())));
    }
    let mut outs = Vec::with_capacity(plan.n_stages());
    let mut x = input;
    for k in 0..plan.n_stages() {
        x = model.forward_blocks(p, x, plan.stage_blocks(k))?;
        outs.push(x);
    }
    Ok(outs)
}

/// Gradient-free stage features for a batch.
pub fn stage_outputs(model: &BlockSequence, plan: &StagePlan, input: &FeatureMap) -> Result<Vec<FeatureMap>> {
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let outs = stage_outputs_var(model, &p, plan, g.constant(input.clone()))?;
    Ok(outs.iter().map(|v| (*v.value()).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Family, HeadSpec, ModelSpec};

    fn flat(depth: usize) -> BlockSequence {
        let spec = ModelSpec {
            family: Family::PatchFlat,
            depth,
            width: 4,
            head: HeadSpec::Classifier { classes: 2 },
            in_channels: 1,
            image_size: [8, 8],
            patch: 4,
            downsample_blocks: 0,
        };
        build_model(&spec, 0).unwrap()
    }

    #[test]
    fn partition_examples() {
        let p = partition(&flat(12), 4, Some(&[2, 5, 8, 11])).unwrap();
        assert_eq!(p.boundaries(), &[2, 5, 8, 11]);
        assert_eq!(partition(&flat(4), 4, None).unwrap().boundaries(), &[0, 1, 2, 3]);
        assert_eq!(partition(&flat(10), 4, None).unwrap().boundaries(), &[2, 4, 7, 9]);
        assert_eq!(partition(&flat(12), 4, None).unwrap().boundaries(), &[2, 5, 8, 11]);
    }

    #[test]
    fn partition_errors() {
        assert!(partition(&flat(3), 4, None).is_err());
        assert!(partition(&flat(12), 2, Some(&[5, 12])).is_err());
        assert!(partition(&flat(12), 2, Some(&[5, 10])).is_err());
        assert!(partition(&flat(12), 2, Some(&[7, 5])).is_err());
    }

    #[test]
    fn even_partition_sizes_are_balanced() {
        for b in 1..30 {
            for n in 1..=b {
                let p = StagePlan::even(b, n).unwrap();
                for k in 0..n {
                    let len = p.stage_blocks(k).len();
                    assert!(len == b / n || len == b.div_ceil(n), "B={b} N={n}: stage {k} has {len}");
                }
            }
        }
    }

    #[test]
    fn pairing_examples() {
        assert_eq!(make_pairing(4, PairingStrategy::Identity).unwrap().one_based(), vec![1, 2, 3, 4]);
        assert_eq!(make_pairing(4, PairingStrategy::Reverse).unwrap().one_based(), vec![4, 3, 2, 1]);
        assert_eq!(make_pairing(4, PairingStrategy::ShiftRight).unwrap().one_based(), vec![2, 3, 4, 1]);
        assert!("diagonal".parse::<PairingStrategy>().is_err());
        assert_eq!("shift_right".parse::<PairingStrategy>().unwrap(), PairingStrategy::ShiftRight);
        assert!(Pairing::new(vec![0, 0]).is_err());
    }

    #[test]
    fn stage_outputs_examples() {
        let m = flat(4);
        let x = Tensor::full([2, 1, 8, 8], 0.5);
        let one = stage_outputs(&m, &StagePlan::even(4, 1).unwrap(), &x).unwrap();
        assert_eq!(one.len(), 1);
        let all = stage_outputs(&m, &StagePlan::even(4, 4).unwrap(), &x).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(one[0], all[3]);
        let again = stage_outputs(&m, &StagePlan::even(4, 4).unwrap(), &x).unwrap();
        assert_eq!(all, again);
    }

    #[test]
    fn layout_requires_matching_stage_counts() {
        let t = StagePlan::even(12, 4).unwrap();
        let s = StagePlan::even(4, 2).unwrap();
        assert!(StageLayout::new(t, s, make_pairing(4, PairingStrategy::Identity).unwrap()).is_err());
    }
}
