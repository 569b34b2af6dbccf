//! Experiment orchestration: declarative run configs, a content-addressed
//! results store, ablation suites and report emission.
//!
//! Store layout under the results root (`REPROG_RESULTS_DIR`, default
//! `./results`):
//!
//! ```text
//! runs/<id>/config.toml      canonical config
//! runs/<id>/events.jsonl     one schema-versioned record per event
//! runs/<id>/checkpoint.rpck  student and projector weights
//! runs/<id>/result.json      written last; its presence marks completion
//! teachers/<key>.rpck        pretrained teachers, shared between runs
//! ablations/<suite>-<key>.json
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::cotraining::{
    build_projectors, train, DiagnosisRecord, LossReport, Method, TrainEvent, TrainSettings, TrainSetup, TrainState, DIAGNOSIS_BATCH,
};
use crate::data::{generate_task, SyntheticTaskSpec, TaskData, TaskKind};
use crate::diagnostics::{self, paired_t_test, ConvergenceSummary, GradientDiagnosis, SimilarityMatrix};
use crate::error::{invalid, Error, Result};
use crate::models::{build_model, BlockSequence, Family, HeadSpec, ModelSpec};
use crate::pretrain::{pretrain_teacher, PretrainConfig};
use crate::reprogramming::ProjectorKind;
use crate::staging::{make_pairing, PairingStrategy, StageLayout, StagePlan};

/// Version stamped on every persisted record.
pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable overriding the results root.
pub const RESULTS_ENV: &str = "REPROG_RESULTS_DIR";

// ---------------------------------------------------------------------------
// config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Number of stages `N`.
    pub n: usize,
    /// Last block index of each teacher stage; near-even when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_boundaries: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_boundaries: Option<Vec<usize>>,
    #[serde(default = "identity")]
    pub pairing: PairingStrategy,
}

fn identity() -> PairingStrategy {
    PairingStrategy::Identity
}

fn default_teacher_seed() -> u64 {
    7
}

fn default_diagnose_at() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

/// One training run, as read from a TOML config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Projector architecture; must be absent for `vanilla`, defaults to
    /// `conv3_default` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector: Option<ProjectorKind>,
    /// Fractions of training at which gradient diagnoses are taken.
    #[serde(default = "default_diagnose_at")]
    pub diagnose_at: Vec<f64>,
    /// Initialisation seed of the teacher before pretraining.
    #[serde(default = "default_teacher_seed")]
    pub teacher_seed: u64,
    pub task: SyntheticTaskSpec,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    pub stages: StageConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// DRD on the reference classification task.
    pub fn reference_classification() -> Self {
        let task = SyntheticTaskSpec::reference_classification(0);
        let size = task.image_size;
        Self {
            method: Method::Drd,
            epochs: 60,
            batch_size: 16,
            learning_rate: 5e-3,
            seed: 0,
            projector: Some(ProjectorKind::Conv3Default),
            diagnose_at: default_diagnose_at(),
            teacher_seed: default_teacher_seed(),
            teacher: ModelSpec {
                family: Family::PatchFlat,
                depth: 12,
                width: 16,
                head: HeadSpec::Classifier { classes: task.pretrain_classes },
                in_channels: task.channels,
                image_size: size,
                patch: 4,
                downsample_blocks: 0,
            },
            student: ModelSpec {
                family: Family::ConvHierarchical,
                depth: 4,
                width: 8,
                head: HeadSpec::Classifier { classes: task.n_classes },
                in_channels: task.channels,
                image_size: size,
                patch: 4,
                downsample_blocks: 3,
            },
            stages: StageConfig { n: 4, teacher_boundaries: None, student_boundaries: None, pairing: PairingStrategy::Identity },
            pretrain: PretrainConfig::default(),
            task,
        }
    }

    /// DRD on the reference segmentation task.
    pub fn reference_segmentation() -> Self {
        let task = SyntheticTaskSpec::reference_segmentation(0);
        let mut c = Self::reference_classification();
        c.epochs = 100;
        c.batch_size = 8;
        c.teacher.head = HeadSpec::DenseMask;
        c.teacher.image_size = task.image_size;
        c.student.head = HeadSpec::DenseMask;
        c.student.image_size = task.image_size;
        c.student.downsample_blocks = 2;
        c.task = task;
        c
    }

    /// Named preset: `classification` or `segmentation`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "classification" => Ok(Self::reference_classification()),
            "segmentation" => Ok(Self::reference_segmentation()),
            other => Err(invalid(format!("unknown preset {other:?}"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config_err("batch_size must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate must be positive and finite"));
        }
        if [self.seed, self.teacher_seed, self.task.seed, self.pretrain.seed].iter().any(|&s| s > i64::MAX as u64) {
            return Err(config_err("seeds must fit in a signed 64-bit integer"));
        }
        if self.diagnose_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(config_err("diagnose_at fractions must lie in [0, 1]"));
        }
        if self.method == Method::Vanilla && self.projector.is_some() {
            return Err(config_err("vanilla runs take no projector setting"));
        }
        self.task.validate().map_err(|e| config_err(format!("task: {e}")))?;
        for (role, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            m.validate().map_err(|e| config_err(format!("{role}: {e}")))?;
            if m.image_size != self.task.image_size || m.in_channels != self.task.channels {
                return Err(config_err(format!("{role} input does not match the task images")));
            }
        }
        match self.task.kind {
            TaskKind::Classification => {
                if self.teacher.head != (HeadSpec::Classifier { classes: self.task.pretrain_classes }) {
                    return Err(config_err("teacher head must classify the pretraining classes"));
                }
                if self.student.head != (HeadSpec::Classifier { classes: self.task.n_classes }) {
                    return Err(config_err("student head must classify the downstream classes"));
                }
            }
            TaskKind::Segmentation => {
                if self.teacher.head != HeadSpec::DenseMask || self.student.head != HeadSpec::DenseMask {
                    return Err(config_err("segmentation needs dense_mask heads"));
                }
            }
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.learning_rate > 0.0) {
            return Err(config_err("pretrain batch_size and learning_rate must be positive"));
        }
        self.layout().map(|_| ())
    }

    /// Stage plans and pairing.
    pub fn layout(&self) -> Result<StageLayout> {
        let st = &self.stages;
        let plan = |depth: usize, b: &Option<Vec<usize>>| match b {
            Some(b) => StagePlan::new(b.clone(), depth),
            None => StagePlan::even(depth, st.n),
        };
        let t = plan(self.teacher.depth, &st.teacher_boundaries).map_err(|e| config_err(format!("teacher stages: {e}")))?;
        let s = plan(self.student.depth, &st.student_boundaries).map_err(|e| config_err(format!("student stages: {e}")))?;
        if t.n_stages() != st.n || s.n_stages() != st.n {
            return Err(config_err(format!("stage boundaries must list {} stages", st.n)));
        }
        StageLayout::new(t, s, make_pairing(st.n, st.pairing)?).map_err(|e| config_err(e.to_string()))
    }

    /// Equivalent config with defaults made explicit and fields the method
    /// ignores reset, so that semantically equal configs compare equal.
    pub fn canonical(&self) -> Result<Self> {
        self.validate()?;
        let mut c = self.clone();
        if c.method == Method::Vanilla {
            c.stages = StageConfig { n: 1, teacher_boundaries: None, student_boundaries: None, pairing: PairingStrategy::Identity };
        } else {
            c.projector = Some(c.projector.unwrap_or(ProjectorKind::Conv3Default));
        }
        if !c.method.uses_hybrid() {
            c.diagnose_at.clear();
        }
        let layout = c.layout()?;
        c.stages.teacher_boundaries = Some(layout.teacher.boundaries().to_vec());
        c.stages.student_boundaries = Some(layout.student.boundaries().to_vec());
        Ok(c)
    }

    /// Stable content hash of the canonical config (16 hex digits).
    pub fn run_id(&self) -> Result<String> {
        Ok(short_hash(&serde_json::to_value(self.canonical()?)?))
    }

    fn settings(&self) -> TrainSettings {
        TrainSettings {
            method: self.method,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            projector: self.projector.unwrap_or(ProjectorKind::Conv3Default),
            diagnose_at: self.diagnose_at.clone(),
        }
    }

    fn metric_name(&self) -> &'static str {
        match self.task.kind {
            TaskKind::Classification => "accuracy",
            TaskKind::Segmentation => "dice",
        }
    }
}

/// serde_json maps are ordered by key, so this is canonical for our types.
fn short_hash(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    hex::encode(&digest[..8])
}

// ---------------------------------------------------------------------------
// results

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: LossReport,
    /// Held-out metric in percent.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_seconds: f64,
    pub teacher_seconds: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    /// `accuracy` or `dice`.
    pub metric_name: String,
    /// Percent, after the last epoch.
    pub final_metric: f64,
    pub initial_metric: f64,
    pub best_metric: f64,
    /// Teacher held-out metric in percent; absent for `vanilla`.
    pub teacher_metric: Option<f64>,
    /// One row per epoch.
    pub history: Vec<HistoryRow>,
    pub diagnoses: Vec<DiagnosisRecord>,
    /// Teacher-by-student stage similarity after training.
    pub similarity: Option<SimilarityMatrix>,
    pub convergence: Option<ConvergenceSummary>,
    /// Largest `|l_train - (l_sup + a l_hybrid + b l_kd + l_cka)|` over all steps.
    pub max_identity_residual: f64,
    pub steps: usize,
    /// Relative to the results root.
    pub checkpoint: PathBuf,
    pub timings: Timings,
}

/// One line of `events.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    Header { run_id: String, config: Box<RunConfig> },
    Step { epoch: usize, step: usize, report: LossReport },
    Epoch(HistoryRow),
    Diagnosis(DiagnosisRecord),
    Completed { final_metric: f64 },
    Aborted { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub event: RunEvent,
}

/// Parse an `events.jsonl` file.
pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

// ---------------------------------------------------------------------------
// store

#[derive(Clone, Debug)]
pub struct ResultsStore {
    root: PathBuf,
}

/// Exclusive per-run lock, released on drop.
struct RunLock(PathBuf);

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl ResultsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$REPROG_RESULTS_DIR`, or `./results`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(RESULTS_ENV).map_or_else(|| PathBuf::from("results"), PathBuf::from))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn is_complete(&self, id: &str) -> bool {
        self.run_dir(id).join("result.json").is_file()
    }

    pub fn load_result(&self, id: &str) -> Result<RunResult> {
        let path = self.run_dir(id).join("result.json");
        if !path.is_file() {
            return Err(Error::NotFound(format!("run {id}")));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn load_config(&self, id: &str) -> Result<RunConfig> {
        let path = self.run_dir(id).join("config.toml");
        if !path.is_file() {
            return Err(Error::NotFound(format!("run {id}")));
        }
        RunConfig::load(&path)
    }

    /// Ids of completed runs, sorted.
    pub fn completed_runs(&self) -> Result<Vec<String>> {
        let dir = self.root.join("runs");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for e in fs::read_dir(dir)? {
            let name = e?.file_name().to_string_lossy().into_owned();
            if self.is_complete(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn lock(&self, id: &str) -> Result<RunLock> {
        let dir = self.run_dir(id);
        fs::create_dir_all(&dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// task and teacher caches

struct CachedTeacher {
    /// Headless.
    model: BlockSequence,
    heldout_metric: f64,
}

fn task_cache() -> &'static Mutex<HashMap<String, Arc<TaskData>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<TaskData>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn teacher_cache() -> &'static Mutex<HashMap<String, Arc<CachedTeacher>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<CachedTeacher>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn task_data(spec: &SyntheticTaskSpec) -> Result<Arc<TaskData>> {
    let key = short_hash(&serde_json::to_value(spec)?);
    let mut cache = task_cache().lock().unwrap_or_else(|p| p.into_inner());
    if let Some(t) = cache.get(&key) {
        return Ok(t.clone());
    }
    let t = Arc::new(generate_task(spec)?);
    cache.insert(key, t.clone());
    Ok(t)
}

fn teacher_key(c: &RunConfig) -> Result<String> {
    Ok(short_hash(&serde_json::json!({
        "task": c.task,
        "teacher": c.teacher,
        "teacher_seed": c.teacher_seed,
        "pretrain": c.pretrain,
    })))
}

/// Pretrained headless teacher, from memory, disk or a fresh pretraining run.
fn pretrained_teacher(store: &ResultsStore, c: &RunConfig, task: &TaskData) -> Result<Arc<CachedTeacher>> {
    let key = teacher_key(c)?;
    let mut cache = teacher_cache().lock().unwrap_or_else(|p| p.into_inner());
    if let Some(t) = cache.get(&key) {
        return Ok(t.clone());
    }
    let path = store.root.join("teachers").join(format!("{key}.rpck"));
    let mut model = build_model(&c.teacher, c.teacher_seed)?;
    let heldout_metric = if path.is_file() {
        let ck = read_checkpoint(&path)?;
        ck.restore("teacher", model.params_mut())?;
        ck.meta["heldout_metric"].as_f64().ok_or_else(|| Error::Format { path: path.clone(), msg: "missing heldout_metric".into() })?
    } else {
        let pt = pretrain_teacher(model, &task.pretrain_train, &task.pretrain_test, &c.pretrain)?;
        fs::create_dir_all(path.parent().unwrap())?;
        let meta = serde_json::json!({ "heldout_metric": pt.heldout_metric, "epochs_run": pt.epochs_run });
        write_checkpoint(&path, &meta, &[("teacher", pt.model.params())])?;
        model = pt.model;
        pt.heldout_metric
    };
    let t = Arc::new(CachedTeacher { model: model.without_head(), heldout_metric });
    cache.insert(key, t.clone());
    Ok(t)
}

/// The teacher a run sees: pretrained for teacher-using methods, an untouched
/// initialisation for `vanilla` (which never reads it).
fn run_teacher(store: &ResultsStore, c: &RunConfig, task: &TaskData) -> Result<(Arc<CachedTeacher>, bool)> {
    if c.method.uses_teacher() {
        Ok((pretrained_teacher(store, c, task)?, true))
    } else {
        let model = build_model(&c.teacher, c.teacher_seed)?.without_head();
        Ok((Arc::new(CachedTeacher { model, heldout_metric: f64::NAN }), false))
    }
}

// ---------------------------------------------------------------------------
// run

/// Run a config against the store named by the environment.
pub fn run(config: &RunConfig) -> Result<RunResult> {
    run_in(&ResultsStore::from_env(), config)
}

pub fn run_in(store: &ResultsStore, config: &RunConfig) -> Result<RunResult> {
    run_with(store, config, &mut |_| {})
}

/// Execute (or fetch the cached result of) one run, streaming events to
/// `observer` and to `events.jsonl`. Invalid configs fail before any compute.
pub fn run_with(store: &ResultsStore, config: &RunConfig, observer: &mut dyn FnMut(&RunEvent)) -> Result<RunResult> {
    let config = config.canonical()?;
    let id = config.run_id()?;
    if store.is_complete(&id) {
        return store.load_result(&id);
    }
    let _lock = store.lock(&id)?;
    if store.is_complete(&id) {
        return store.load_result(&id);
    }
    let dir = store.run_dir(&id);
    write_atomic(&dir.join("config.toml"), config.to_toml_string()?.as_bytes())?;
    let mut events = BufWriter::new(fs::File::create(dir.join("events.jsonl"))?);
    let mut emit = |e: RunEvent, w: &mut BufWriter<fs::File>| -> Result<()> {
        observer(&e);
        serde_json::to_writer(&mut *w, &EventRecord { schema_version: SCHEMA_VERSION, event: e })?;
        w.write_all(b"\n")?;
        Ok(())
    };
    emit(RunEvent::Header { run_id: id.clone(), config: Box::new(config.clone()) }, &mut events)?;
    let outcome = execute(store, &config, &id, &mut |e, w| emit(e, w), &mut events);
    match outcome {
        Ok(result) => {
            emit(RunEvent::Completed { final_metric: result.final_metric }, &mut events)?;
            events.flush()?;
            write_atomic(&dir.join("result.json"), serde_json::to_string_pretty(&result)?.as_bytes())?;
            Ok(result)
        }
        Err(err) => {
            let _ = emit(RunEvent::Aborted { error: err.to_string() }, &mut events);
            let _ = events.flush();
            Err(err)
        }
    }
}

type Emit<'a> = dyn FnMut(RunEvent, &mut BufWriter<fs::File>) -> Result<()> + 'a;

fn execute(store: &ResultsStore, c: &RunConfig, id: &str, emit: &mut Emit<'_>, w: &mut BufWriter<fs::File>) -> Result<RunResult> {
    let t0 = Instant::now();
    let task = task_data(&c.task)?;
    let data_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (teacher, pretrained) = run_teacher(store, c, &task)?;
    let teacher_seconds = t1.elapsed().as_secs_f64();
    let layout = c.layout()?;
    let settings = c.settings();
    let setup = TrainSetup { data: &task, teacher: &teacher.model, student_spec: &c.student, layout: &layout, settings: &settings };

    let mut io_err: Option<Error> = None;
    let mut max_residual = 0.0f64;
    let mut observer = |ev: TrainEvent<'_>| {
        let e = match ev {
            TrainEvent::Step { epoch, step, report } => {
                max_residual = max_residual.max(report.identity_residual());
                RunEvent::Step { epoch, step, report: *report }
            }
            TrainEvent::Epoch(r) => {
                let row = HistoryRow { epoch: r.epoch, loss: r.loss, metric: pct(r.metric) };
                RunEvent::Epoch(row)
            }
            TrainEvent::Diagnosis(d) => RunEvent::Diagnosis(d.clone()),
        };
        let flush = matches!(e, RunEvent::Epoch(_));
        if io_err.is_none() {
            let r = emit(e, w).and_then(|_| if flush { w.flush().map_err(Error::from) } else { Ok(()) });
            if let Err(err) = r {
                io_err = Some(err);
            }
        }
    };
    let out = train(&setup, &mut observer)?;
    if let Some(e) = io_err {
        return Err(e);
    }

    let similarity = if c.method.uses_teacher() {
        let idx: Vec<usize> = (0..DIAGNOSIS_BATCH.min(task.test.len())).collect();
        let projectors: &[_] = if c.method == Method::FeatureMimic { &[] } else { &out.projectors };
        let state = TrainState { teacher: &teacher.model, student: &out.student, projectors, layout: &layout };
        Some(diagnostics::trained_similarity(&state, &task.test.images.select_rows(&idx))?)
    } else {
        None
    };
    let losses: Vec<f64> = out.history.iter().map(|h| h.loss.l_train).collect();
    let metrics: Vec<f64> = out.history.iter().map(|h| h.metric).collect();
    let convergence = if losses.len() >= 2 { Some(diagnostics::convergence_track(&losses, &metrics)?) } else { None };

    let ck_rel = PathBuf::from("runs").join(id).join("checkpoint.rpck");
    let mut stores = vec![("student".to_string(), out.student.params())];
    stores.extend(out.projectors.iter().enumerate().map(|(i, p)| (format!("projector{i}"), p.params())));
    let named: Vec<(&str, _)> = stores.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    let meta = serde_json::json!({
        "run_id": id,
        "method": c.method,
        "epochs": c.epochs,
        "layout": layout,
        "order_rng": out.order_rng,
    });
    write_checkpoint(&store.root.join(&ck_rel), &meta, &named)?;

    Ok(RunResult {
        schema_version: SCHEMA_VERSION,
        run_id: id.to_string(),
        method: c.method,
        seed: c.seed,
        metric_name: c.metric_name().to_string(),
        final_metric: pct(out.final_metric),
        initial_metric: pct(out.initial_metric),
        best_metric: pct(metrics.iter().copied().fold(out.initial_metric, f64::max)),
        teacher_metric: pretrained.then(|| pct(teacher.heldout_metric)),
        history: out.history.iter().map(|r| HistoryRow { epoch: r.epoch, loss: r.loss, metric: pct(r.metric) }).collect(),
        diagnoses: out.diagnoses,
        similarity,
        convergence,
        max_identity_residual: max_residual,
        steps: out.steps.len(),
        checkpoint: ck_rel,
        timings: Timings { data_seconds, teacher_seconds, train_seconds: out.seconds, total_seconds: t0.elapsed().as_secs_f64() },
    })
}

/// Weights of a completed run, rebuilt from its checkpoint.
pub struct LoadedRun {
    pub config: RunConfig,
    pub result: RunResult,
    pub student: BlockSequence,
    pub projectors: Vec<crate::reprogramming::Projector>,
}

pub fn load_run(store: &ResultsStore, id: &str) -> Result<LoadedRun> {
    let result = store.load_result(id)?;
    let config = store.load_config(id)?;
    let ck = read_checkpoint(&store.root.join(&result.checkpoint))?;
    let mut student = build_model(&config.student, 0)?;
    ck.restore("student", student.params_mut())?;
    let teacher = build_model(&config.teacher, config.teacher_seed)?.without_head();
    let mut projectors = build_projectors(
        &teacher,
        &student,
        &config.layout()?,
        config.method,
        config.projector.unwrap_or(ProjectorKind::Conv3Default),
        0,
    )?;
    for (i, p) in projectors.iter_mut().enumerate() {
        ck.restore(&format!("projector{i}"), p.params_mut())?;
    }
    Ok(LoadedRun { config, result, student, projectors })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub schema_version: u32,
    pub run_id: String,
    pub method: Method,
    pub final_metric: f64,
    /// Snapshots recorded during training.
    pub snapshots: Vec<DiagnosisRecord>,
    /// Gradient diagnosis at the final weights (hybrid methods only).
    pub final_diagnosis: Option<GradientDiagnosis>,
    pub similarity: Option<SimilarityMatrix>,
}

/// Re-examine a completed run from its checkpoint.
pub fn diagnose(store: &ResultsStore, id: &str) -> Result<DiagnoseReport> {
    let run = load_run(store, id)?;
    let c = &run.config;
    let task = task_data(&c.task)?;
    let final_diagnosis = if c.method.uses_hybrid() {
        let (teacher, _) = run_teacher(store, c, &task)?;
        let layout = c.layout()?;
        let idx: Vec<usize> = (0..DIAGNOSIS_BATCH.min(task.test.len())).collect();
        let (x, y) = task.test.batch(&idx);
        let state = TrainState { teacher: &teacher.model, student: &run.student, projectors: &run.projectors, layout: &layout };
        Some(diagnostics::gradient_diagnosis(&state, &x, &y)?)
    } else {
        None
    };
    Ok(DiagnoseReport {
        schema_version: SCHEMA_VERSION,
        run_id: id.to_string(),
        method: c.method,
        final_metric: run.result.final_metric,
        snapshots: run.result.diagnoses.clone(),
        final_diagnosis,
        similarity: run.result.similarity.clone(),
    })
}

// ---------------------------------------------------------------------------
// ablations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Components,
    Depth,
    Projector,
    Boundary,
    Pairing,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Components, Suite::Depth, Suite::Projector, Suite::Boundary, Suite::Pairing];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "depth" => Ok(Self::Depth),
            "projector" => Ok(Self::Projector),
            "boundary" => Ok(Self::Boundary),
            "pairing" => Ok(Self::Pairing),
            other => Err(invalid(format!("unknown ablation suite {other:?}"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Components => "components",
            Self::Depth => "depth",
            Self::Projector => "projector",
            Self::Boundary => "boundary",
            Self::Pairing => "pairing",
        })
    }
}

/// Interior teacher boundaries moved by `delta` blocks; the last stays put.
fn shifted_boundaries(c: &RunConfig, delta: isize) -> Result<Vec<usize>> {
    let mut b = c.layout()?.teacher.boundaries().to_vec();
    let last = b.len() - 1;
    for v in &mut b[..last] {
        *v = v
            .checked_add_signed(delta)
            .ok_or_else(|| config_err(format!("boundary shift {delta} leaves the block range")))?;
    }
    Ok(b)
}

/// Arms in table order, with the index of the baseline arm.
pub fn suite_arms(suite: Suite, base: &RunConfig) -> Result<(Vec<(String, RunConfig)>, usize)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let projector = base.projector.or(Some(ProjectorKind::Conv3Default));
    let arms = match suite {
        Suite::Components => vec![
            ("vanilla".to_string(), with(&|c| {
                c.method = Method::Vanilla;
                c.projector = None;
            })),
            ("direct_reprog+kd".to_string(), with(&|c| {
                c.method = Method::DirectReprog;
                c.projector = projector;
            })),
            ("co_reprog+kd".to_string(), with(&|c| {
                c.method = Method::DrdNoCka;
                c.projector = projector;
            })),
            ("drd".to_string(), with(&|c| {
                c.method = Method::Drd;
                c.projector = projector;
            })),
        ],
        Suite::Depth => [1usize, 2, 4]
            .iter()
            .map(|&n| {
                (format!("N={n}"), with(&|c| {
                    c.stages.n = n;
                    c.stages.teacher_boundaries = None;
                    c.stages.student_boundaries = None;
                }))
            })
            .collect(),
        Suite::Projector => ProjectorKind::ALL.iter().map(|&k| (k.to_string(), with(&|c| c.projector = Some(k)))).collect(),
        Suite::Boundary => {
            let mut arms = vec![("default".to_string(), with(&|c| c.stages.teacher_boundaries = None))];
            for (label, d) in [("shift-1", -1isize), ("shift+1", 1)] {
                let b = shifted_boundaries(&with(&|c| c.stages.teacher_boundaries = None), d)?;
                arms.push((label.to_string(), with(&|c| c.stages.teacher_boundaries = Some(b.clone()))));
            }
            arms
        }
        Suite::Pairing => [PairingStrategy::Identity, PairingStrategy::Reverse, PairingStrategy::ShiftRight]
            .iter()
            .map(|&p| (p.to_string(), with(&|c| c.stages.pairing = p)))
            .collect(),
    };
    let baseline = match suite {
        Suite::Projector => ProjectorKind::ALL.iter().position(|&k| k == ProjectorKind::Conv3Default).unwrap(),
        _ => 0,
    };
    for (label, c) in &arms {
        c.validate().map_err(|e| config_err(format!("arm {label}: {e}")))?;
    }
    Ok((arms, baseline))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub run_ids: Vec<String>,
    /// Percent, one per seed.
    pub metrics: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for one seed).
    pub std: f64,
    /// Mean paired difference against the baseline arm.
    pub diff_vs_baseline: Option<f64>,
    /// Two-sided paired t-test against the baseline; needs two seeds.
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub suite: Suite,
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    /// Plain-text table with metrics to one decimal.
    pub fn render(&self) -> String {
        let mut s = format!("suite {} (baseline {}, {} seeds)\n", self.suite, self.baseline, self.seeds.len());
        s.push_str(&format!("{:<18} {:>7} {:>6} {:>7} {:>8}\n", "arm", "mean", "std", "diff", "p"));
        for r in &self.rows {
            let diff = r.diff_vs_baseline.map_or("-".to_string(), |d| format!("{d:+.1}"));
            let p = r.p_value.map_or("-".to_string(), |p| format!("{p:.4}"));
            s.push_str(&format!("{:<18} {:>7.1} {:>6.1} {:>7} {:>8}\n", r.arm, r.mean, r.std, diff, p));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Run every arm of `suite` for every seed and tabulate mean, std and a
/// paired t-test against the baseline arm.
pub fn ablation_suite(store: &ResultsStore, suite: Suite, base: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    ablation_suite_with(store, suite, base, seeds, &mut |_, _| {})
}

/// As [`ablation_suite`], reporting each finished run as `(arm, result)`.
pub fn ablation_suite_with(
    store: &ResultsStore,
    suite: Suite,
    base: &RunConfig,
    seeds: &[u64],
    progress: &mut dyn FnMut(&str, &RunResult),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(invalid("an ablation needs at least one seed"));
    }
    let mut uniq = seeds.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != seeds.len() {
        return Err(invalid("ablation seeds must be distinct"));
    }
    let (arms, baseline) = suite_arms(suite, base)?;
    let mut results: Vec<Vec<RunResult>> = Vec::with_capacity(arms.len());
    for (label, cfg) in &arms {
        let mut per = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let r = run_in(store, &c)?;
            progress(label, &r);
            per.push(r);
        }
        results.push(per);
    }
    let base_metrics: Vec<f64> = results[baseline].iter().map(|r| r.final_metric).collect();
    let rows = arms
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(i, ((label, _), rs))| {
            let metrics: Vec<f64> = rs.iter().map(|r| r.final_metric).collect();
            let (mean, std) = mean_std(&metrics);
            let (diff, p) = if i == baseline {
                (None, None)
            } else {
                let diff = metrics.iter().zip(&base_metrics).map(|(a, b)| a - b).sum::<f64>() / metrics.len() as f64;
                let p = if seeds.len() >= 2 { paired_t_test(&metrics, &base_metrics).ok().map(|t| t.p) } else { None };
                (Some(diff), p)
            };
            AblationRow { arm: label.clone(), run_ids: rs.iter().map(|r| r.run_id.clone()).collect(), metrics, mean, std, diff_vs_baseline: diff, p_value: p }
        })
        .collect();
    let table = AblationTable { schema_version: SCHEMA_VERSION, suite, baseline: arms[baseline].0.clone(), seeds: seeds.to_vec(), rows };
    let dir = store.root.join("ablations");
    fs::create_dir_all(&dir)?;
    let key = short_hash(&serde_json::json!({ "base": base.canonical()?, "seeds": seeds }));
    write_atomic(&dir.join(format!("{suite}-{key}.json")), serde_json::to_string_pretty(&table)?.as_bytes())?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Jsonl,
    Plotdata,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            "plotdata" => Ok(Self::Plotdata),
            other => Err(invalid(format!("unknown report format {other:?}"))),
        }
    }
}

/// One row of the flat CSV report: a run at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub l_sup: f64,
    pub l_hybrid: f64,
    pub l_kd: f64,
    pub l_cka: f64,
    pub l_train: f64,
    pub metric: f64,
}

pub fn csv_rows(r: &RunResult) -> Vec<CsvRow> {
    r.history
        .iter()
        .map(|h| CsvRow {
            run_id: r.run_id.clone(),
            method: r.method,
            seed: r.seed,
            epoch: h.epoch,
            alpha: h.loss.alpha,
            beta: h.loss.beta,
            l_sup: h.loss.l_sup,
            l_hybrid: h.loss.l_hybrid,
            l_kd: h.loss.l_kd,
            l_cka: h.loss.l_cka,
            l_train: h.loss.l_train,
            metric: h.metric,
        })
        .collect()
}

pub fn write_csv_rows(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv_rows(path: &Path) -> Result<Vec<CsvRow>> {
    csv::Reader::from_path(path)?.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ReportLine<'a> {
    Header { schema_version: u32, runs: &'a [String] },
    Run { schema_version: u32, run_id: &'a str, method: Method, seed: u64, metric_name: &'a str, final_metric: f64, best_metric: f64 },
    Epoch { schema_version: u32, run_id: &'a str, epoch: usize, loss: &'a LossReport, metric: f64 },
}

/// Write report files for `ids` into `out_dir`; returns the paths written.
/// Every id must name a completed run.
pub fn report(store: &ResultsStore, ids: &[String], format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let results: Vec<RunResult> = ids.iter().map(|id| store.load_result(id)).collect::<Result<_>>()?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let path = out_dir.join("runs.csv");
            let rows: Vec<CsvRow> = results.iter().flat_map(csv_rows).collect();
            write_csv_rows(&path, &rows)?;
            written.push(path);
        }
        ReportFormat::Jsonl => {
            let path = out_dir.join("runs.jsonl");
            let mut w = BufWriter::new(fs::File::create(&path)?);
            let mut line = |l: &ReportLine| -> Result<()> {
                serde_json::to_writer(&mut w, l)?;
                w.write_all(b"\n")?;
                Ok(())
            };
            line(&ReportLine::Header { schema_version: SCHEMA_VERSION, runs: ids })?;
            for r in &results {
                line(&ReportLine::Run {
                    schema_version: SCHEMA_VERSION,
                    run_id: &r.run_id,
                    method: r.method,
                    seed: r.seed,
                    metric_name: &r.metric_name,
                    final_metric: r.final_metric,
                    best_metric: r.best_metric,
                })?;
                for h in &r.history {
                    line(&ReportLine::Epoch { schema_version: SCHEMA_VERSION, run_id: &r.run_id, epoch: h.epoch, loss: &h.loss, metric: h.metric })?;
                }
            }
            w.flush()?;
            written.push(path);
        }
        ReportFormat::Plotdata => {
            for r in &results {
                let curves = out_dir.join(format!("{}.curves.csv", r.run_id));
                write_csv_rows(&curves, &csv_rows(r))?;
                written.push(curves);
                if let Some(sim) = &r.similarity {
                    let grid = out_dir.join(format!("{}.similarity.csv", r.run_id));
                    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&grid)?;
                    for row in &sim.values {
                        w.write_record(row.iter().map(|v| v.to_string()))?;
                    }
                    w.flush()?;
                    written.push(grid);
                }
            }
        }
    }
    Ok(written)
}

/// Parse a headerless numeric grid written by the `plotdata` report.
pub fn read_grid(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    r.records()
        .map(|rec| {
            rec?.iter()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() }))
                .collect()
        })
        .collect()
}

#[doc(hidden)]
pub fn clear_caches() {
    task_cache().lock().unwrap_or_else(|p| p.into_inner()).clear();
    teacher_cache().lock().unwrap_or_else(|p| p.into_inner()).clear();
}
