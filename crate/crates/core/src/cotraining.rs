//! Co-training of a student with reprogrammed teacher stage features.
//!
//! Each teacher stage feature is mapped by its projector into the geometry of
//! the paired student stage, injected there, and carried through the
//! remaining student blocks and the shared head to give one hybrid logit per
//! stage. The objective is
//! `l_sup + alpha * l_hybrid + beta * l_kd + l_cka`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Dataset, TaskData, Targets};
use crate::diagnostics::{self, GradientDiagnosis, ParamCounts};
use crate::error::{invalid, Error, Result};
use crate::kernels::{cka_loss_features, DICE_SMOOTH};
use crate::models::{build_model, BlockSequence, ModelSpec};
use crate::nn::{AdamW, AdamWConfig, Bound, ParamStore};
use crate::reprogramming::{build_projector, reprogram, Projector, ProjectorKind, ProjectorSpec};
use crate::staging::{stage_outputs, FeatureMap, Pairing, StageLayout, StagePlan};
use crate::tensor::Tensor;

/// Training arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Injection, hybrid logits, KD and CKA.
    Drd,
    /// Student alone.
    Vanilla,
    /// Student features projected to teacher features under an MSE penalty.
    FeatureMimic,
    /// `Drd` without the CKA term.
    DrdNoCka,
    /// Projectors fitted to student features by MSE, then KD from the
    /// reprogrammed final feature through the student head. No injection.
    DirectReprog,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Drd, Method::Vanilla, Method::FeatureMimic, Method::DrdNoCka, Method::DirectReprog];

    pub fn uses_teacher(self) -> bool {
        self != Method::Vanilla
    }

    pub fn uses_hybrid(self) -> bool {
        matches!(self, Method::Drd | Method::DrdNoCka)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drd" => Ok(Self::Drd),
            "vanilla" => Ok(Self::Vanilla),
            "feature_mimic" => Ok(Self::FeatureMimic),
            "drd_no_cka" => Ok(Self::DrdNoCka),
            "direct_reprog" => Ok(Self::DirectReprog),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Drd => "drd",
            Self::Vanilla => "vanilla",
            Self::FeatureMimic => "feature_mimic",
            Self::DrdNoCka => "drd_no_cka",
            Self::DirectReprog => "direct_reprog",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl LossWeights {
    pub fn fixed(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, epoch: 0, total_epochs: 1 }
    }
}

/// Linear decay from 1 at epoch 0 to 0 at the last epoch.
pub fn schedule_weights(epoch: usize, total_epochs: usize) -> Result<LossWeights> {
    if total_epochs == 0 {
        return Err(invalid("total_epochs must be at least 1"));
    }
    if epoch > total_epochs {
        return Err(invalid(format!("epoch {epoch} is past total_epochs {total_epochs}")));
    }
    let w = 1.0 - epoch as f64 / total_epochs as f64;
    Ok(LossWeights { alpha: w, beta: w, epoch, total_epochs })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_hybrid: f64,
    pub l_kd: f64,
    pub l_cka: f64,
    pub l_train: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossReport {
    /// `|l_train - (l_sup + alpha l_hybrid + beta l_kd + l_cka)|`
    pub fn identity_residual(&self) -> f64 {
        (self.l_train - (self.l_sup + self.alpha * self.l_hybrid + self.beta * self.l_kd + self.l_cka)).abs()
    }

    fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.l_sup += r.l_sup / n;
            m.l_hybrid += r.l_hybrid / n;
            m.l_kd += r.l_kd / n;
            m.l_cka += r.l_cka / n;
            m.l_train += r.l_train / n;
        }
        if let Some(r) = reports.first() {
            m.alpha = r.alpha;
            m.beta = r.beta;
        }
        m
    }
}

/// Student logits `z^S` and one hybrid logit per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBundle {
    pub student_logits: Tensor,
    pub hybrid_logits: Vec<Tensor>,
}

// ---------------------------------------------------------------------------
// graph-level pieces

/// Supervised loss: cross-entropy for labels, Dice on sigmoid probabilities
/// for masks.
pub fn supervised_loss<'g>(logits: Var<'g>, target: &Targets) -> Result<Var<'g>> {
    match target {
        Targets::Labels(l) => logits.cross_entropy(l),
        Targets::Masks(m) => logits.sigmoid().dice_loss(m, DICE_SMOOTH),
    }
}

/// `KL(hybrid || student)`: row softmax for classifiers, per-pixel
/// Bernoulli for masks.
pub fn distill_kl<'g>(hybrid: Var<'g>, student: Var<'g>, target: &Targets) -> Result<Var<'g>> {
    match target {
        Targets::Labels(_) => hybrid.kl_div(student),
        Targets::Masks(_) => hybrid.bernoulli_kl(student),
    }
}

pub(crate) struct HybridVars<'g> {
    pub student_logits: Var<'g>,
    pub hybrid_logits: Vec<Var<'g>>,
    /// `phi_i(f_i^T)`
    pub reprogrammed: Vec<Var<'g>>,
    /// Student stage paired with teacher stage `i`.
    pub paired_student: Vec<Var<'g>>,
}

pub(crate) struct TermVars<'g> {
    pub sup: Var<'g>,
    pub hybrid: Var<'g>,
    pub kd: Var<'g>,
    pub cka: Var<'g>,
}

fn check_projectors(layout: &StageLayout, projectors: &[Projector]) -> Result<()> {
    if projectors.len() != layout.n_stages() {
        return Err(invalid(format!("{} projectors for {} stages", projectors.len(), layout.n_stages())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn hybrid_vars<'g>(
    student: &BlockSequence,
    sb: &Bound<'g>,
    layout: &StageLayout,
    projectors: &[Projector],
    pbs: &[Bound<'g>],
    teacher_feats: &[Var<'g>],
    x: Var<'g>,
    inject: bool,
) -> Result<HybridVars<'g>> {
    check_projectors(layout, projectors)?;
    let plan = &layout.student;
    let mut stages = Vec::with_capacity(plan.n_stages());
    let mut cur = x;
    for k in 0..plan.n_stages() {
        cur = student.forward_blocks(sb, cur, plan.stage_blocks(k))?;
        stages.push(cur);
    }
    let student_logits = student.forward_head(sb, cur)?;
    let mut out = HybridVars {
        student_logits,
        hybrid_logits: Vec::new(),
        reprogrammed: Vec::new(),
        paired_student: Vec::new(),
    };
    for (i, proj) in projectors.iter().enumerate() {
        let j = layout.pairing.target(i);
        let r = proj.forward(&pbs[i], teacher_feats[i])?;
        if inject {
            let h = student.forward_blocks(sb, r, plan.blocks_after(j))?;
            out.hybrid_logits.push(student.forward_head(sb, h)?);
        }
        out.reprogrammed.push(r);
        out.paired_student.push(stages[j]);
    }
    Ok(out)
}

pub(crate) fn drd_terms<'g>(g: &'g Graph, hv: &HybridVars<'g>, target: &Targets, with_cka: bool) -> Result<TermVars<'g>> {
    let sup = supervised_loss(hv.student_logits, target)?.check_finite("l_sup")?;
    let mut hybrid = g.constant(Tensor::scalar(0.0));
    let mut kd = g.constant(Tensor::scalar(0.0));
    for &z in &hv.hybrid_logits {
        hybrid = hybrid.add(supervised_loss(z, target)?)?;
        kd = kd.add(distill_kl(z, hv.student_logits, target)?)?;
    }
    let cka = if with_cka && !hv.reprogrammed.is_empty() {
        let mut acc = g.constant(Tensor::scalar(0.0));
        for (r, s) in hv.reprogrammed.iter().zip(&hv.paired_student) {
            acc = acc.add(cka_loss_features(*r, *s)?)?;
        }
        acc.scale(1.0 / hv.reprogrammed.len() as f64)
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    Ok(TermVars {
        sup,
        hybrid: hybrid.check_finite("l_hybrid")?,
        kd: kd.check_finite("l_kd")?,
        cka: cka.check_finite("l_cka")?,
    })
}

fn combine<'g>(t: &TermVars<'g>, w: &LossWeights) -> Result<(Var<'g>, LossReport)> {
    let total = t.sup.add(t.hybrid.scale(w.alpha))?.add(t.kd.scale(w.beta))?.add(t.cka)?.check_finite("l_train")?;
    let report = LossReport {
        l_sup: t.sup.item(),
        l_hybrid: t.hybrid.item(),
        l_kd: t.kd.item(),
        l_cka: t.cka.item(),
        l_train: total.item(),
        alpha: w.alpha,
        beta: w.beta,
    };
    Ok((total, report))
}

// ---------------------------------------------------------------------------
// value-level API

/// Gradient-free hybrid forward pass. The returned student features are
/// aligned with the teacher stages: entry `i` is the student stage that
/// teacher stage `i` is paired with.
pub fn forward_hybrid(
    teacher: &BlockSequence,
    student: &BlockSequence,
    plan_t: &StagePlan,
    plan_s: &StagePlan,
    pairing: &Pairing,
    projectors: &[Projector],
    batch: &Tensor,
) -> Result<(LogitsBundle, Vec<FeatureMap>, Vec<FeatureMap>)> {
    let layout = StageLayout::new(plan_t.clone(), plan_s.clone(), pairing.clone())?;
    let tf = stage_outputs(teacher, plan_t, batch)?;
    let g = Graph::new();
    let sb = student.params().bind(&g, false);
    let pbs: Vec<Bound> = projectors.iter().map(|p| p.params().bind(&g, false)).collect();
    let tv: Vec<Var> = tf.into_iter().map(|t| g.constant(t)).collect();
    let hv = hybrid_vars(student, &sb, &layout, projectors, &pbs, &tv, g.constant(batch.clone()), true)?;
    let val = |v: &Var| (*v.value()).clone();
    let bundle = LogitsBundle {
        student_logits: val(&hv.student_logits),
        hybrid_logits: hv.hybrid_logits.iter().map(val).collect(),
    };
    if !bundle.student_logits.all_finite() || bundle.hybrid_logits.iter().any(|t| !t.all_finite()) {
        return Err(Error::NumericalFailure("non-finite logits".into()));
    }
    Ok((bundle, hv.reprogrammed.iter().map(val).collect(), hv.paired_student.iter().map(val).collect()))
}

/// Loss report for precomputed logits and (aligned) stage features. An empty
/// feature list gives `l_cka = 0`.
pub fn total_loss(
    bundle: &LogitsBundle,
    features_ts: &[FeatureMap],
    features_s: &[FeatureMap],
    target: &Targets,
    weights: &LossWeights,
) -> Result<LossReport> {
    if features_ts.len() != features_s.len() {
        return Err(invalid("teacher and student feature lists differ in length"));
    }
    let g = Graph::new();
    let c = |t: &Tensor| g.constant(t.clone());
    let hv = HybridVars {
        student_logits: c(&bundle.student_logits),
        hybrid_logits: bundle.hybrid_logits.iter().map(c).collect(),
        reprogrammed: features_ts.iter().map(c).collect(),
        paired_student: features_s.iter().map(c).collect(),
    };
    let terms = drd_terms(&g, &hv, target, true)?;
    Ok(combine(&terms, weights)?.1)
}

/// Read-only view of a co-training state.
#[derive(Clone, Copy)]
pub struct TrainState<'a> {
    pub teacher: &'a BlockSequence,
    pub student: &'a BlockSequence,
    pub projectors: &'a [Projector],
    pub layout: &'a StageLayout,
}

/// Gradients of the objective, per store.
pub struct ObjectiveGrads {
    pub student: Vec<Option<Tensor>>,
    pub projectors: Vec<Vec<Option<Tensor>>>,
}

impl TrainState<'_> {
    /// Full objective and its gradients on one batch.
    pub fn objective(&self, x: &Tensor, target: &Targets, weights: &LossWeights, with_cka: bool) -> Result<(LossReport, ObjectiveGrads)> {
        let tf = stage_outputs(self.teacher, &self.layout.teacher, x)?;
        let g = Graph::new();
        let sb = self.student.params().bind(&g, true);
        let pbs: Vec<Bound> = self.projectors.iter().map(|p| p.params().bind(&g, true)).collect();
        let tv: Vec<Var> = tf.into_iter().map(|t| g.constant(t)).collect();
        let hv = hybrid_vars(self.student, &sb, self.layout, self.projectors, &pbs, &tv, g.constant(x.clone()), true)?;
        let terms = drd_terms(&g, &hv, target, with_cka)?;
        let (total, report) = combine(&terms, weights)?;
        let grads = g.backward(total)?;
        Ok((report, ObjectiveGrads { student: sb.grads(&grads), projectors: pbs.iter().map(|b| b.grads(&grads)).collect() }))
    }
}

// ---------------------------------------------------------------------------
// evaluation helpers

const EVAL_CHUNK: usize = 64;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

/// Stage features of the whole image set, computed in chunks.
pub fn teacher_features(teacher: &BlockSequence, plan: &StagePlan, images: &Tensor) -> Result<Vec<Tensor>> {
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); plan.n_stages()];
    for idx in chunks(images.dim(0)) {
        for (k, f) in stage_outputs(teacher, plan, &images.select_rows(&idx))?.into_iter().enumerate() {
            parts[k].push(f);
        }
    }
    parts.iter().map(|p| Tensor::concat_rows(&p.iter().collect::<Vec<_>>())).collect()
}

/// Hard Dice `2|A n B| / (|A| + |B|)` of two binary masks (1 when both are empty).
pub fn hard_dice(pred: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// Accuracy or mean per-image hard Dice, as a fraction.
pub fn evaluate(model: &BlockSequence, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut score = 0.0;
    for idx in chunks(data.len()) {
        let (x, y) = data.batch(&idx);
        let z = model.predict(&x)?;
        match &y {
            Targets::Labels(l) => {
                let c = z.dim(1);
                for (i, &label) in l.iter().enumerate() {
                    let row = &z.data()[i * c..(i + 1) * c];
                    let arg = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                    score += (arg == label) as u8 as f64;
                }
            }
            Targets::Masks(m) => {
                let per = m.len() / m.dim(0);
                for i in 0..idx.len() {
                    let pred: Vec<f64> = z.data()[i * per..(i + 1) * per].iter().map(|&v| (v > 0.0) as u8 as f64).collect();
                    score += hard_dice(&pred, &m.data()[i * per..(i + 1) * per]);
                }
            }
        }
    }
    Ok(score / data.len() as f64)
}

// ---------------------------------------------------------------------------
// training loop

/// SplitMix64 of `seed` and `stream`; used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed streams of a run seed.
pub mod streams {
    pub const STUDENT_INIT: u64 = 1;
    pub const DATA_ORDER: u64 = 2;
    /// Projector `i` uses `PROJECTOR_BASE + i`.
    pub const PROJECTOR_BASE: u64 = 100;
}

/// RNG that shuffles the training set each epoch.
pub fn order_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::DATA_ORDER))
}

/// Shuffled mini-batches for one epoch. A trailing batch of one sample is
/// dropped (CKA needs at least two).
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).filter(|c| c.len() >= 2 || n == 1).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub projector: ProjectorKind,
    /// Fractions of training after which a gradient diagnosis is taken.
    pub diagnose_at: Vec<f64>,
}

impl TrainSettings {
    pub fn new(method: Method, epochs: usize, seed: u64) -> Self {
        Self {
            method,
            epochs,
            batch_size: 8,
            learning_rate: AdamWConfig::default().lr,
            seed,
            projector: ProjectorKind::Conv3Default,
            diagnose_at: vec![0.25, 0.5, 0.75],
        }
    }
}

/// Everything a training run reads.
#[derive(Clone, Copy)]
pub struct TrainSetup<'a> {
    pub data: &'a TaskData,
    /// Frozen, headless teacher.
    pub teacher: &'a BlockSequence,
    pub student_spec: &'a ModelSpec,
    pub layout: &'a StageLayout,
    pub settings: &'a TrainSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossReport,
    /// Held-out metric after this epoch, as a fraction.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub fraction: f64,
    /// Epochs completed when measured.
    pub epoch: usize,
    pub diagnosis: GradientDiagnosis,
}

pub enum TrainEvent<'a> {
    Step { epoch: usize, step: usize, report: &'a LossReport },
    Epoch(&'a EpochRecord),
    Diagnosis(&'a DiagnosisRecord),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: BlockSequence,
    /// Empty for `vanilla`. For `feature_mimic` these map student to teacher.
    pub projectors: Vec<Projector>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<LossReport>,
    pub initial_metric: f64,
    pub final_metric: f64,
    pub diagnoses: Vec<DiagnosisRecord>,
    pub order_rng: ChaCha8Rng,
    pub seconds: f64,
}

/// Projectors for `method` under `layout`, seeded from the run seed.
pub fn build_projectors(
    teacher: &BlockSequence,
    student: &BlockSequence,
    layout: &StageLayout,
    method: Method,
    kind: ProjectorKind,
    seed: u64,
) -> Result<Vec<Projector>> {
    if !method.uses_teacher() {
        return Ok(Vec::new());
    }
    (0..layout.n_stages())
        .map(|i| {
            let j = layout.pairing.target(i);
            let t_dims = teacher.block_dims(layout.teacher.boundaries()[i]);
            let s_dims = student.block_dims(layout.student.boundaries()[j]);
            let spec = if method == Method::FeatureMimic {
                ProjectorSpec::between(kind, s_dims, t_dims)
            } else {
                ProjectorSpec::between(kind, t_dims, s_dims)
            };
            build_projector(&spec, derive_seed(seed, streams::PROJECTOR_BASE + i as u64))
        })
        .collect()
}

fn rms(t: &Tensor) -> f64 {
    (t.data().iter().map(|v| v * v).sum::<f64>() / t.len().max(1) as f64).sqrt()
}

/// Data-dependent projector initialisation: each projector that feeds the
/// student has its output layer rescaled so that, on the first training
/// images, its output RMS matches that of the student stage it is paired
/// with. Teacher stages and student stages can differ in scale by more than
/// an order of magnitude, which otherwise saturates the hybrid logits.
pub fn calibrate_projectors(
    projectors: &mut [Projector],
    teacher_train: &[Tensor],
    student: &BlockSequence,
    layout: &StageLayout,
    images: &Tensor,
) -> Result<()> {
    check_projectors(layout, projectors)?;
    let idx: Vec<usize> = (0..images.dim(0).min(EVAL_CHUNK)).collect();
    let sf = stage_outputs(student, &layout.student, &images.select_rows(&idx))?;
    for (i, p) in projectors.iter_mut().enumerate() {
        let out = rms(&reprogram(p, &teacher_train[i].select_rows(&idx))?);
        let target = rms(&sf[layout.pairing.target(i)]);
        if out > 0.0 && target > 0.0 {
            p.scale_output(target / out);
        }
    }
    Ok(())
}

/// Fresh student, projectors and cached teacher features for one arm.
fn init_arm(setup: &TrainSetup) -> Result<(BlockSequence, Vec<Projector>, Vec<Tensor>)> {
    let st = setup.settings;
    let student = build_model(setup.student_spec, derive_seed(st.seed, streams::STUDENT_INIT))?;
    let mut projectors = build_projectors(setup.teacher, &student, setup.layout, st.method, st.projector, st.seed)?;
    let teacher_train = if st.method.uses_teacher() {
        teacher_features(setup.teacher, &setup.layout.teacher, &setup.data.train.images)?
    } else {
        Vec::new()
    };
    if st.method.uses_teacher() && st.method != Method::FeatureMimic {
        calibrate_projectors(&mut projectors, &teacher_train, &student, setup.layout, &setup.data.train.images)?;
    }
    Ok((student, projectors, teacher_train))
}

fn check_setup(s: &TrainSetup) -> Result<()> {
    let st = s.settings;
    if st.batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    if !(st.learning_rate > 0.0 && st.learning_rate.is_finite()) {
        return Err(invalid("learning_rate must be positive"));
    }
    if s.teacher.has_head() {
        return Err(invalid("the distillation teacher must be headless"));
    }
    if s.layout.teacher.n_blocks() != s.teacher.n_blocks() {
        return Err(invalid("teacher plan does not match the teacher depth"));
    }
    if s.layout.student.n_blocks() != s.student_spec.depth {
        return Err(invalid("student plan does not match the student depth"));
    }
    if st.diagnose_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(invalid("diagnosis fractions must lie in [0, 1]"));
    }
    Ok(())
}

struct StepCtx<'a> {
    setup: &'a TrainSetup<'a>,
    /// Cached teacher stage features of the training set.
    teacher_train: &'a [Tensor],
}

fn train_step(
    ctx: &StepCtx,
    student: &mut BlockSequence,
    projectors: &mut [Projector],
    opt: &mut AdamW,
    idx: &[usize],
    w: &LossWeights,
) -> Result<LossReport> {
    let method = ctx.setup.settings.method;
    let layout = ctx.setup.layout;
    let (x, y) = ctx.setup.data.train.batch(idx);
    let g = Graph::new();
    let sb = student.params().bind(&g, true);
    let pbs: Vec<Bound> = projectors.iter().map(|p| p.params().bind(&g, true)).collect();
    let xv = g.constant(x);
    let tv: Vec<Var> = ctx.teacher_train.iter().map(|t| g.constant(t.select_rows(idx))).collect();
    let zero = || g.constant(Tensor::scalar(0.0));
    let terms = match method {
        Method::Vanilla => {
            let z = student.forward(&sb, xv)?;
            TermVars { sup: supervised_loss(z, &y)?.check_finite("l_sup")?, hybrid: zero(), kd: zero(), cka: zero() }
        }
        Method::Drd | Method::DrdNoCka => {
            let hv = hybrid_vars(student, &sb, layout, projectors, &pbs, &tv, xv, true)?;
            drd_terms(&g, &hv, &y, method == Method::Drd)?
        }
        Method::DirectReprog => {
            let hv = hybrid_vars(student, &sb, layout, projectors, &pbs, &tv, xv, false)?;
            let sup = supervised_loss(hv.student_logits, &y)?.check_finite("l_sup")?;
            let mut mimic = zero();
            for (r, s) in hv.reprogrammed.iter().zip(&hv.paired_student) {
                mimic = mimic.add(r.mse(s.detach())?)?;
            }
            let mimic = mimic.scale(1.0 / projectors.len() as f64);
            // KD target: the reprogrammed feature that lands on the last
            // student stage, read out by the current head without gradient.
            let last = layout.n_stages() - 1;
            let src = (0..layout.n_stages()).find(|&i| layout.pairing.target(i) == last).unwrap_or(last);
            let target_logits = student.forward_head(&sb, hv.reprogrammed[src].detach())?.detach();
            let kd = distill_kl(target_logits, hv.student_logits, &y)?;
            TermVars { sup, hybrid: mimic.check_finite("l_mimic")?, kd: kd.check_finite("l_kd")?, cka: zero() }
        }
        Method::FeatureMimic => {
            let mut stages = Vec::with_capacity(layout.n_stages());
            let mut cur = xv;
            for k in 0..layout.n_stages() {
                cur = student.forward_blocks(&sb, cur, layout.student.stage_blocks(k))?;
                stages.push(cur);
            }
            let sup = supervised_loss(student.forward_head(&sb, cur)?, &y)?.check_finite("l_sup")?;
            let mut mimic = zero();
            for (i, proj) in projectors.iter().enumerate() {
                let p = proj.forward(&pbs[i], stages[layout.pairing.target(i)])?;
                mimic = mimic.add(p.mse(tv[i])?)?;
            }
            let mimic = mimic.scale(1.0 / projectors.len() as f64);
            TermVars { sup, hybrid: mimic.check_finite("l_mimic")?, kd: zero(), cka: zero() }
        }
    };
    // mimic arms use a fixed unit weight on their auxiliary term
    let w = match method {
        Method::FeatureMimic => LossWeights { alpha: 1.0, beta: 0.0, ..*w },
        Method::Vanilla => LossWeights { alpha: 0.0, beta: 0.0, ..*w },
        _ => *w,
    };
    let (total, report) = combine(&terms, &w)?;
    let grads = g.backward(total)?;
    let mut all = vec![sb.grads(&grads)];
    all.extend(pbs.iter().map(|b| b.grads(&grads)));
    drop(pbs);
    let mut stores: Vec<&mut ParamStore> = vec![student.params_mut()];
    stores.extend(projectors.iter_mut().map(|p| p.params_mut()));
    opt.step(&mut stores, &all)?;
    Ok(report)
}

/// Size of the fixed held-out batch used for gradient diagnosis.
pub const DIAGNOSIS_BATCH: usize = 128;

fn diagnosis_epochs(settings: &TrainSettings) -> Vec<(f64, usize)> {
    if !settings.method.uses_hybrid() || settings.epochs == 0 {
        return Vec::new();
    }
    settings
        .diagnose_at
        .iter()
        .map(|&f| (f, ((f * settings.epochs as f64).round() as usize).min(settings.epochs)))
        .collect()
}

/// Run one training arm. Events are reported as they happen, so a failure
/// part-way leaves the observer with the partial history.
pub fn train(setup: &TrainSetup, observer: &mut dyn FnMut(TrainEvent<'_>)) -> Result<TrainOutcome> {
    check_setup(setup)?;
    let start = Instant::now();
    let st = setup.settings;
    let data = setup.data;
    let (mut student, mut projectors, teacher_train) = init_arm(setup)?;
    let ctx = StepCtx { setup, teacher_train: &teacher_train };
    let stores: Vec<&ParamStore> = std::iter::once(student.params()).chain(projectors.iter().map(|p| p.params())).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: st.learning_rate, ..Default::default() }, &stores);
    let mut rng = order_rng(st.seed);
    let initial_metric = evaluate(&student, &data.test)?;
    let diag_idx: Vec<usize> = (0..DIAGNOSIS_BATCH.min(data.test.len())).collect();
    let diag_at = diagnosis_epochs(st);
    let mut history = Vec::with_capacity(st.epochs);
    let mut steps = Vec::new();
    let mut diagnoses = Vec::new();
    let diag = |done: usize, student: &BlockSequence, projectors: &[Projector]| -> Result<Vec<DiagnosisRecord>> {
        let (x, y) = data.test.batch(&diag_idx);
        diag_at
            .iter()
            .filter(|(_, e)| *e == done)
            .map(|&(fraction, epoch)| {
                let state = TrainState { teacher: setup.teacher, student, projectors, layout: setup.layout };
                Ok(DiagnosisRecord { fraction, epoch, diagnosis: diagnostics::gradient_diagnosis(&state, &x, &y)? })
            })
            .collect()
    };
    for rec in diag(0, &student, &projectors)? {
        observer(TrainEvent::Diagnosis(&rec));
        diagnoses.push(rec);
    }
    for e in 0..st.epochs {
        let w = schedule_weights(e, st.epochs)?;
        let mut reports = Vec::new();
        for (s, idx) in epoch_batches(data.train.len(), st.batch_size, &mut rng).iter().enumerate() {
            let r = train_step(&ctx, &mut student, &mut projectors, &mut opt, idx, &w)?;
            observer(TrainEvent::Step { epoch: e + 1, step: s, report: &r });
            reports.push(r);
        }
        let rec = EpochRecord { epoch: e + 1, loss: LossReport::mean(&reports), metric: evaluate(&student, &data.test)? };
        observer(TrainEvent::Epoch(&rec));
        history.push(rec);
        steps.extend(reports);
        for rec in diag(e + 1, &student, &projectors)? {
            observer(TrainEvent::Diagnosis(&rec));
            diagnoses.push(rec);
        }
    }
    let final_metric = history.last().map_or(initial_metric, |r| r.metric);
    Ok(TrainOutcome {
        student,
        projectors,
        history,
        steps,
        initial_metric,
        final_metric,
        diagnoses,
        order_rng: rng,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-iteration wall-clock times in milliseconds for `iters` training steps
/// after `warmup` untimed ones, cycling through epochs as needed. The
/// coefficient schedule is held at its initial value.
pub(crate) fn timed_steps(setup: &TrainSetup, warmup: usize, iters: usize) -> Result<(Vec<f64>, ParamCounts)> {
    check_setup(setup)?;
    let st = setup.settings;
    let data = setup.data;
    let (mut student, mut projectors, teacher_train) = init_arm(setup)?;
    let ctx = StepCtx { setup, teacher_train: &teacher_train };
    let stores: Vec<&ParamStore> = std::iter::once(student.params()).chain(projectors.iter().map(|p| p.params())).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: st.learning_rate, ..Default::default() }, &stores);
    let mut rng = order_rng(st.seed);
    let w = LossWeights::fixed(1.0, 1.0);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut times = Vec::with_capacity(iters);
    for it in 0..warmup + iters {
        if queue.is_empty() {
            queue = epoch_batches(data.train.len(), st.batch_size, &mut rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("non-empty epoch");
        let t0 = Instant::now();
        train_step(&ctx, &mut student, &mut projectors, &mut opt, &idx, &w)?;
        if it >= warmup {
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let params = ParamCounts {
        student: student.params().num_scalars(),
        projectors: projectors.iter().map(|p| p.param_count()).sum(),
        teacher: setup.teacher.params().num_scalars(),
    };
    Ok((times, params))
}

/// Hint-style comparator: `l_sup` plus MSE between projected student
/// features and raw teacher features.
pub fn baseline_feature_mimic(setup: &TrainSetup, observer: &mut dyn FnMut(TrainEvent<'_>)) -> Result<TrainOutcome> {
    if setup.settings.method != Method::FeatureMimic {
        return Err(invalid("baseline_feature_mimic needs method = feature_mimic"));
    }
    train(setup, observer)
}
