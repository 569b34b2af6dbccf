//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reprog_core::cotraining::{Method, TrainSettings};
use reprog_core::data::{generate_task, TaskData};
use reprog_core::harness::RunConfig;
use reprog_core::models::{build_model, BlockSequence};
use reprog_core::staging::StageLayout;
use reprog_core::Tensor;

/// Standard-normal tensor of the given shape.
pub fn features(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reference classification data, an untrained headless teacher and the
/// stage layout. Step timings do not depend on teacher weights, so the
/// pretraining pass is skipped.
pub struct Reference {
    pub config: RunConfig,
    pub task: TaskData,
    pub teacher: BlockSequence,
    pub layout: StageLayout,
}

impl Reference {
    pub fn classification() -> Self {
        let config = RunConfig::reference_classification();
        let task = generate_task(&config.task).expect("reference task");
        let teacher = build_model(&config.teacher, config.teacher_seed).expect("teacher").without_head();
        let layout = config.layout().expect("layout");
        Self { config, task, teacher, layout }
    }

    pub fn settings(&self, method: Method) -> TrainSettings {
        TrainSettings { batch_size: self.config.batch_size, diagnose_at: Vec::new(), ..TrainSettings::new(method, 1, 0) }
    }
}
