//! Teacher pretraining on the broad synthetic distribution.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::cotraining::{epoch_batches, evaluate, order_rng, supervised_loss};
use crate::data::{Dataset, Targets};
use crate::error::{invalid, Error, Result};
use crate::models::{BlockSequence, HeadSpec};
use crate::nn::{AdamW, AdamWConfig};

/// Held-out accuracy a classification teacher must reach.
pub const CLASSIFICATION_THRESHOLD: f64 = 0.90;
/// Held-out Dice a segmentation teacher must reach.
pub const SEGMENTATION_THRESHOLD: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Fixed epoch budget; the threshold is checked on the final weights.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 15, batch_size: 32, learning_rate: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainedTeacher {
    /// Teacher with its pretraining head.
    pub model: BlockSequence,
    /// Held-out accuracy or Dice, as a fraction.
    pub heldout_metric: f64,
    pub epochs_run: usize,
}

impl PretrainedTeacher {
    /// The frozen feature extractor used for distillation.
    pub fn frozen(self) -> BlockSequence {
        self.model.without_head()
    }
}

fn threshold(target: &Targets) -> f64 {
    match target {
        Targets::Labels(_) => CLASSIFICATION_THRESHOLD,
        Targets::Masks(_) => SEGMENTATION_THRESHOLD,
    }
}

fn check_head(teacher: &BlockSequence, data: &Dataset) -> Result<()> {
    match (&teacher.spec().head, &data.targets) {
        (HeadSpec::Classifier { classes }, Targets::Labels(l)) => {
            if let Some(&bad) = l.iter().find(|&&c| c >= *classes) {
                return Err(invalid(format!("label {bad} outside the teacher's {classes} classes")));
            }
            Ok(())
        }
        (HeadSpec::DenseMask, Targets::Masks(_)) => Ok(()),
        _ => Err(invalid("teacher head does not match the pretraining targets")),
    }
}

/// Supervised pretraining for the configured budget, then a held-out
/// threshold check. Zero epochs returns the initialisation unchanged and
/// skips the check.
pub fn pretrain_teacher(mut teacher: BlockSequence, train: &Dataset, heldout: &Dataset, cfg: &PretrainConfig) -> Result<PretrainedTeacher> {
    check_head(&teacher, train)?;
    check_head(&teacher, heldout)?;
    if cfg.batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    if cfg.epochs == 0 {
        let heldout_metric = evaluate(&teacher, heldout)?;
        return Ok(PretrainedTeacher { model: teacher, heldout_metric, epochs_run: 0 });
    }
    let goal = threshold(&train.targets);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.learning_rate, ..Default::default() }, &[teacher.params()]);
    let mut rng = order_rng(cfg.seed);
    for epoch in 1..=cfg.epochs {
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let (x, y) = train.batch(&idx);
            let g = Graph::new();
            let p = teacher.params().bind(&g, true);
            let loss = supervised_loss(teacher.forward(&p, g.constant(x))?, &y)?.check_finite("pretraining loss")?;
            let grads = g.backward(loss)?;
            let gv = p.grads(&grads);
            opt.step(&mut [teacher.params_mut()], &[gv])?;
        }
        log::debug!("pretraining epoch {epoch} done");
    }
    let metric = evaluate(&teacher, heldout)?;
    if metric < goal {
        return Err(Error::PretrainFailure(format!("held-out metric {metric:.4} below {goal} after {} epochs", cfg.epochs)));
    }
    Ok(PretrainedTeacher { model: teacher, heldout_metric: metric, epochs_run: cfg.epochs })
}
