//! Analysis instruments: per-term gradient diagnosis, teacher/student stage
//! similarity, convergence summaries, paired t-tests and training overhead.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autograd::{Graph, Var};
use crate::cotraining::{self, drd_terms, hybrid_vars, TrainSetup, TrainState};
use crate::data::Targets;
use crate::error::{invalid, Error, Result};
use crate::kernels::cosine_similarity;
use crate::nn::Bound;
use crate::staging::{stage_outputs, FeatureMap};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientDiagnosis {
    pub cos_hybrid_vs_sup: f64,
    pub cos_kd_vs_sup: f64,
    /// `|g_cka| / |g_sup|`
    pub cka_to_sup_norm_ratio: f64,
    pub parameter_scope: String,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosines against the supervised gradient and the CKA norm ratio, from
/// flattened per-term gradients. A term whose gradient is exactly zero on the
/// scope (with N = 1 the hybrid branch never reaches the last student block)
/// gets cosine 0.
pub fn diagnosis_from_gradients(sup: &[f64], hybrid: &[f64], kd: &[f64], cka: &[f64], scope: &str) -> Result<GradientDiagnosis> {
    let n_sup = norm(sup);
    if n_sup == 0.0 {
        return Err(Error::ZeroVector("supervised gradient is zero".into()));
    }
    let ratio = norm(cka) / n_sup;
    if !ratio.is_finite() {
        return Err(Error::NumericalFailure("CKA gradient norm is not finite".into()));
    }
    Ok(GradientDiagnosis {
        cos_hybrid_vs_sup: term_cosine(hybrid, sup)?,
        cos_kd_vs_sup: term_cosine(kd, sup)?,
        cka_to_sup_norm_ratio: ratio,
        parameter_scope: scope.to_string(),
    })
}

fn term_cosine(term: &[f64], sup: &[f64]) -> Result<f64> {
    if term.iter().all(|v| *v == 0.0) {
        Ok(0.0)
    } else {
        cosine_similarity(term, sup)
    }
}

/// Separate gradients of `l_sup`, `l_hybrid`, `l_kd` and `l_cka` on the
/// parameters of the last student block. Model state is only read.
pub fn gradient_diagnosis(state: &TrainState, x: &Tensor, y: &Targets) -> Result<GradientDiagnosis> {
    let tf = stage_outputs(state.teacher, &state.layout.teacher, x)?;
    let g = Graph::new();
    let sb = state.student.params().bind(&g, true);
    let pbs: Vec<Bound> = state.projectors.iter().map(|p| p.params().bind(&g, true)).collect();
    let tv: Vec<Var> = tf.into_iter().map(|t| g.constant(t)).collect();
    let hv = hybrid_vars(state.student, &sb, state.layout, state.projectors, &pbs, &tv, g.constant(x.clone()), true)?;
    let terms = drd_terms(&g, &hv, y, true)?;
    let last = state.student.n_blocks() - 1;
    let ids = state.student.block_param_ids(last);
    let grad_of = |v: Var| -> Result<Vec<f64>> {
        let grads = g.backward(v)?;
        Ok(state.student.params().flat_grad(&sb, &grads, ids))
    };
    let sup = grad_of(terms.sup)?;
    let hybrid = grad_of(terms.hybrid)?;
    let kd = grad_of(terms.kd)?;
    let cka = grad_of(terms.cka)?;
    diagnosis_from_gradients(&sup, &hybrid, &kd, &cka, &format!("student.block{last}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Cosine between pooled feature vectors (all stages share a channel count).
    Direct,
    /// Cosine between per-sample rows of the centred cosine-Gram matrices,
    /// used when channel counts differ.
    Relational,
}

/// Teacher-stage (rows) by student-stage (columns) mean cosine similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    pub mode: SimilarityMode,
}

impl SimilarityMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.values.len().min(self.values.first().map_or(0, Vec::len));
        (0..n).map(|i| self.values[i][i]).sum::<f64>() / n.max(1) as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let (mut s, mut c) = (0.0, 0usize);
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    s += v;
                    c += 1;
                }
            }
        }
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    }
}

/// `(n, C)` spatial means of an `(n, C, H, W)` map; 2-D input passes through.
fn pool(f: &FeatureMap) -> Result<Tensor> {
    match f.ndim() {
        2 => Ok(f.clone()),
        4 => {
            let (n, c) = (f.dim(0), f.dim(1));
            let hw = f.dim(2) * f.dim(3);
            let data = f.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
            Tensor::new([n, c], data)
        }
        _ => Err(invalid(format!("cannot pool a feature of shape {:?}", f.shape()))),
    }
}

fn cos_or_zero(u: &[f64], v: &[f64]) -> f64 {
    let d = norm(u) * norm(v);
    if d == 0.0 {
        0.0
    } else {
        (u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / d).clamp(-1.0, 1.0)
    }
}

/// Centred cosine-Gram rows: row `s` describes sample `s` by its similarity
/// to every sample in the set.
fn relational_rows(p: &Tensor) -> Tensor {
    let n = p.dim(0);
    let c = p.dim(1);
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            let r = &p.data()[s * c..(s + 1) * c];
            let l = norm(r);
            r.iter().map(|v| if l == 0.0 { 0.0 } else { v / l }).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * n);
    for a in &unit {
        let row: Vec<f64> = unit.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect();
        let m = row.iter().sum::<f64>() / n as f64;
        data.extend(row.iter().map(|v| v - m));
    }
    Tensor::from_parts(vec![n, n], data)
}

pub fn stage_similarity(teacher: &[FeatureMap], student: &[FeatureMap]) -> Result<SimilarityMatrix> {
    if teacher.is_empty() || student.is_empty() {
        return Err(invalid("no stages to compare"));
    }
    let n = teacher[0].dim(0);
    if n == 0 {
        return Err(invalid("empty evaluation set"));
    }
    if teacher.iter().chain(student).any(|f| f.ndim() == 0 || f.dim(0) != n) {
        return Err(invalid("all stage features must cover the same samples"));
    }
    let tp: Vec<Tensor> = teacher.iter().map(pool).collect::<Result<_>>()?;
    let sp: Vec<Tensor> = student.iter().map(pool).collect::<Result<_>>()?;
    let c0 = tp[0].dim(1);
    let direct = tp.iter().chain(&sp).all(|p| p.dim(1) == c0);
    let (mode, tp, sp) = if direct {
        (SimilarityMode::Direct, tp, sp)
    } else {
        (SimilarityMode::Relational, tp.iter().map(relational_rows).collect(), sp.iter().map(relational_rows).collect())
    };
    let values = tp
        .iter()
        .map(|t| sp.iter().map(|s| (0..n).map(|k| cos_or_zero(t.row(k), s.row(k))).sum::<f64>() / n as f64).collect())
        .collect();
    Ok(SimilarityMatrix { values, mode })
}

/// Similarity after training: teacher stages are taken after their
/// projectors (when present), student stages as they are.
pub fn trained_similarity(state: &TrainState, images: &Tensor) -> Result<SimilarityMatrix> {
    let tf = stage_outputs(state.teacher, &state.layout.teacher, images)?;
    let sf = stage_outputs(state.student, &state.layout.student, images)?;
    let reprogrammed_side = state.projectors.len() == tf.len()
        && state.projectors.iter().zip(&tf).all(|(p, f)| p.spec().input_dims().channels == f.dim(1));
    let tf = if reprogrammed_side {
        state.projectors.iter().zip(&tf).map(|(p, f)| crate::reprogramming::reprogram(p, f)).collect::<Result<Vec<_>>>()?
    } else {
        tf
    };
    stage_similarity(&tf, &sf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    /// Fraction of epoch transitions where the 3-epoch trailing mean of the
    /// loss decreases.
    pub decrease_fraction: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_metric: f64,
    pub best_metric: f64,
    /// 1-based.
    pub best_epoch: usize,
    /// A loss became non-finite or rose above 10x the initial loss.
    pub diverged: bool,
}

pub fn convergence_track(losses: &[f64], metrics: &[f64]) -> Result<ConvergenceSummary> {
    if losses.len() < 2 || metrics.len() != losses.len() {
        return Err(invalid("convergence tracking needs at least 2 epochs of aligned losses and metrics"));
    }
    let smooth: Vec<f64> = (0..losses.len())
        .map(|t| {
            let w = &losses[t.saturating_sub(2)..=t];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect();
    let dec = smooth.windows(2).filter(|w| w[1] < w[0]).count();
    let l0 = losses[0];
    let diverged = losses.iter().any(|l| !l.is_finite() || (*l > l0 && *l > 10.0 * l0.abs()));
    let (best_epoch, best_metric) = metrics
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &m)| if m > b.1 { (i, m) } else { b });
    Ok(ConvergenceSummary {
        decrease_fraction: dec as f64 / (losses.len() - 1) as f64,
        initial_loss: l0,
        final_loss: *losses.last().unwrap(),
        final_metric: *metrics.last().unwrap(),
        best_metric,
        best_epoch: best_epoch + 1,
        diverged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
}

/// Paired two-sided t-test of `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid("paired t-test needs two equal-length samples of size >= 2"));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateTest("differences have zero variance".into()));
    }
    let t = mean / (var / n).sqrt();
    let df = a.len() - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::DegenerateTest(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df, mean_diff: mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub student: usize,
    pub projectors: usize,
    /// Frozen, not trained.
    pub teacher: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub ms_per_iter: f64,
    pub median_ms: f64,
    pub iterations: usize,
    pub warmup: usize,
    pub params: ParamCounts,
}

pub const OVERHEAD_WARMUP: usize = 10;

/// Wall-clock time per training iteration after `OVERHEAD_WARMUP` discarded
/// iterations. `iterations` is raised to at least 100.
pub fn measure_overhead(setup: &TrainSetup, iterations: usize) -> Result<OverheadReport> {
    let iterations = iterations.max(100);
    let (times, params) = cotraining::timed_steps(setup, OVERHEAD_WARMUP, iterations)?;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(OverheadReport {
        ms_per_iter: times.iter().sum::<f64>() / times.len() as f64,
        median_ms: sorted[sorted.len() / 2],
        iterations,
        warmup: OVERHEAD_WARMUP,
        params,
    })
}
