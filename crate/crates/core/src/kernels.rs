//! Numerical primitives shared by the training engine and the diagnostics:
//! linear-kernel Gram matrices, centring, HSIC and the CKA loss, plus the
//! classification/segmentation losses and cosine similarity.
//!
//! Each quantity has a plain `f64` form operating on [`Tensor`]s and, where
//! training needs gradients, a graph form operating on [`Var`]s. The two are
//! implemented independently and cross-checked in tests.

use serde::{Deserialize, Serialize};

use crate::autograd::{double_center, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Self-HSIC values at or below this are treated as constant features.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Additive smoothing in the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

/// Symmetric PSD `n x n` matrix of pairwise sample inner products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix(Tensor);

impl GramMatrix {
    /// Wraps a square matrix. Symmetry is checked; semi-definiteness is the
    /// caller's responsibility.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 || t.dim(0) != t.dim(1) {
            return Err(invalid(format!("gram matrix must be square, got {:?}", t.shape())));
        }
        let n = t.dim(0);
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (t.get2(i, j), t.get2(j, i));
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(invalid(format!("gram matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self(t))
    }

    pub fn n(&self) -> usize {
        self.0.dim(0)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get2(i, j)
    }
}

/// Row-stochastic probabilities obtained from logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(invalid("softmax of empty logits"));
        }
        let lp = crate::autograd::log_softmax(logits);
        Ok(Self { probs: lp.iter().map(|v| v.exp()).collect() })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }
}

/// Linear-kernel Gram matrix of a batch. Every sample (leading axis) is
/// flattened into one row.
pub fn gram(features: &Tensor) -> Result<GramMatrix> {
    if features.ndim() == 0 || features.dim(0) == 0 || features.is_empty() {
        return Err(invalid("gram of empty feature batch"));
    }
    let x = features.flatten_batch();
    let k = x.matmul(&x.t());
    // Symmetrise exactly so downstream code can rely on it bitwise.
    let n = k.dim(0);
    let mut sym = k.clone();
    for i in 0..n {
        for j in 0..i {
            let v = k.get2(i, j);
            sym.data_mut()[j * n + i] = v;
        }
    }
    Ok(GramMatrix(sym))
}

/// `H K H` with `H = I - 11^T / n`.
pub fn center_gram(k: &GramMatrix) -> Result<GramMatrix> {
    if k.n() < 2 {
        return Err(invalid(format!("centring needs n >= 2, got {}", k.n())));
    }
    Ok(GramMatrix(double_center(&k.0)))
}

/// `HSIC(K, L) = <HKH, HLH>_F / (n - 1)^2`.
pub fn hsic(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    if k.n() != l.n() {
        return Err(invalid(format!("hsic size mismatch: {} vs {}", k.n(), l.n())));
    }
    let kc = center_gram(k)?;
    let lc = center_gram(l)?;
    let n = k.n() as f64;
    Ok(kc.0.dot(&lc.0) / ((n - 1.0) * (n - 1.0)))
}

/// Negative CKA: `-HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))`, in `[-1, 0]`
/// for PSD inputs.
pub fn cka_loss(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    let kl = hsic(k, l)?;
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    check_self_hsic(kk, ll)?;
    Ok(-kl / (kk * ll).sqrt())
}

fn check_self_hsic(kk: f64, ll: f64) -> Result<()> {
    if kk <= DEGENERATE_EPS || ll <= DEGENERATE_EPS || !kk.is_finite() || !ll.is_finite() {
        return Err(Error::DegenerateFeatures(format!(
            "self-HSIC too small for CKA normalisation (K: {kk:e}, L: {ll:e})"
        )));
    }
    Ok(())
}

/// Differentiable HSIC between two feature batches `(n, ...)`.
pub fn hsic_features<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let ka = gram_var(a)?;
    let kb = gram_var(b)?;
    hsic_grams(ka, kb)
}

fn gram_var(x: Var<'_>) -> Result<Var<'_>> {
    let flat = x.flatten_batch()?;
    let k = flat.matmul(flat.t()?)?;
    if k.shape()[0] < 2 {
        return Err(invalid("HSIC needs a batch of at least 2 samples"));
    }
    Ok(k)
}

fn hsic_grams<'g>(k: Var<'g>, l: Var<'g>) -> Result<Var<'g>> {
    let n = k.shape()[0] as f64;
    let kc = k.center_gram()?;
    let lc = if k.id() == l.id() { kc } else { l.center_gram()? };
    Ok(kc.mul(lc)?.sum().scale(1.0 / ((n - 1.0) * (n - 1.0))))
}

/// Differentiable CKA loss between two feature batches. Gradients reach
/// both sides; callers detach one side if they need a fixed target.
pub fn cka_loss_features<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    if a.shape()[0] != b.shape()[0] {
        return Err(invalid(format!("CKA batch mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let ka = gram_var(a)?;
    let kb = gram_var(b)?;
    let kl = hsic_grams(ka, kb)?;
    let kk = hsic_grams(ka, ka)?;
    let ll = hsic_grams(kb, kb)?;
    check_self_hsic(kk.item(), ll.item())?;
    let denom = kk.mul(ll)?.sqrt();
    Ok(kl.div(denom)?.neg())
}

/// `KL(softmax(p) || softmax(q))` at temperature 1.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(invalid(format!("kl length mismatch: {} vs {}", p_logits.len(), q_logits.len())));
    }
    if p_logits.len() < 2 {
        return Err(invalid("kl needs at least two classes"));
    }
    let lp = crate::autograd::log_softmax(p_logits);
    let lq = crate::autograd::log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    // Rounding can leave tiny negatives when p == q.
    Ok(kl.max(0.0))
}

/// Batch-mean cross entropy of `(B, C)` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.ndim() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(invalid(format!("cross_entropy: logits {:?} vs {} labels", logits.shape(), labels.len())));
    }
    let c = logits.dim(1);
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(invalid(format!("label {l} out of range for {c} classes")));
        }
        let lp = crate::autograd::log_softmax(logits.row(i));
        total -= lp[l];
    }
    Ok(total / labels.len() as f64)
}

/// `1 - mean_b Dice_b` for probability masks `(B, ...)` against binary targets.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.ndim() < 2 || pred.dim(0) == 0 {
        return Err(invalid(format!("dice shapes {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let b = pred.dim(0);
    let per = pred.len() / b;
    let mut acc = 0.0;
    for i in 0..b {
        let p = &pred.data()[i * per..(i + 1) * per];
        let t = &target.data()[i * per..(i + 1) * per];
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let total: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
        acc += (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH);
    }
    Ok((1.0 - acc / b as f64).clamp(0.0, 1.0))
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(invalid(format!("cosine length mismatch: {} vs {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("cosine similarity of a zero vector".into()));
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}
