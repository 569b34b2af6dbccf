//! Fused loss ops with hand-derived backward passes.

use super::{sigmoid, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Row-wise log-softmax of a `(B, C)` buffer.
pub(crate) fn log_softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(super) fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let z = logits.value();
    if z.ndim() != 2 || z.dim(0) != labels.len() {
        return Err(invalid(format!("cross_entropy: logits {:?} vs {} labels", z.shape(), labels.len())));
    }
    let (b, c) = (z.dim(0), z.dim(1));
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(invalid(format!("label {bad} out of range for {c} classes")));
    }
    let logp = log_softmax_rows(z.data(), c);
    let loss = labels.iter().enumerate().map(|(i, &l)| -logp[i * c + l]).sum::<f64>() / b as f64;
    let labels = labels.to_vec();
    Ok(logits.unary(Tensor::scalar(loss), move |g| {
        let s = g.item() / b as f64;
        let mut grad: Vec<f64> = logp.iter().map(|lp| lp.exp() * s).collect();
        for (i, &l) in labels.iter().enumerate() {
            grad[i * c + l] -= s;
        }
        Tensor::from_parts(vec![b, c], grad)
    }))
}

pub(super) fn kl_rows<'g>(p_logits: Var<'g>, q_logits: Var<'g>) -> Result<Var<'g>> {
    let (p, q) = (p_logits.value(), q_logits.value());
    if p.shape() != q.shape() || p.ndim() != 2 {
        return Err(invalid(format!("kl_div: shapes {:?} vs {:?}", p.shape(), q.shape())));
    }
    let (b, c) = (p.dim(0), p.dim(1));
    let lp = log_softmax_rows(p.data(), c);
    let lq = log_softmax_rows(q.data(), c);
    let per_row: Vec<f64> = lp
        .chunks(c)
        .zip(lq.chunks(c))
        .map(|(a, bq)| a.iter().zip(bq).map(|(x, y)| x.exp() * (x - y)).sum())
        .collect();
    let loss = per_row.iter().sum::<f64>() / b as f64;
    Ok(p_logits.graph.push(
        Tensor::scalar(loss),
        vec![p_logits.id, q_logits.id],
        Box::new(move |g, need| {
            let s = g.item() / b as f64;
            let gp = need[0].then(|| {
                let mut out = vec![0.0; b * c];
                for r in 0..b {
                    for k in 0..c {
                        let i = r * c + k;
                        out[i] = s * lp[i].exp() * (lp[i] - lq[i] - per_row[r]);
                    }
                }
                Tensor::from_parts(vec![b, c], out)
            });
            let gq = need[1].then(|| {
                let out = lp.iter().zip(&lq).map(|(a, bq)| s * (bq.exp() - a.exp())).collect();
                Tensor::from_parts(vec![b, c], out)
            });
            vec![gp, gq]
        }),
    ))
}

pub(super) fn kl_bernoulli<'g>(p_logits: Var<'g>, q_logits: Var<'g>) -> Result<Var<'g>> {
    let (a, b) = (p_logits.value(), q_logits.value());
    if a.shape() != b.shape() {
        return Err(invalid(format!("bernoulli_kl: shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.len() as f64;
    let loss = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let p = sigmoid(x);
            // ln p = -softplus(-x), ln(1-p) = -softplus(x)
            p * (softplus(-y) - softplus(-x)) + (1.0 - p) * (softplus(y) - softplus(x))
        })
        .sum::<f64>()
        / n;
    let shape = a.shape().to_vec();
    Ok(p_logits.graph.push(
        Tensor::scalar(loss),
        vec![p_logits.id, q_logits.id],
        Box::new(move |g, need| {
            let s = g.item() / n;
            let gp = need[0].then(|| {
                let d = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| {
                        let p = sigmoid(x);
                        s * p * (1.0 - p) * (x - y)
                    })
                    .collect();
                Tensor::from_parts(shape.clone(), d)
            });
            let gq = need[1].then(|| {
                let d = a.data().iter().zip(b.data()).map(|(&x, &y)| s * (sigmoid(y) - sigmoid(x))).collect();
                Tensor::from_parts(shape.clone(), d)
            });
            vec![gp, gq]
        }),
    ))
}

pub(super) fn dice<'g>(probs: Var<'g>, target: &Tensor, smooth: f64) -> Result<Var<'g>> {
    let p = probs.value();
    if p.shape() != target.shape() || p.ndim() < 2 {
        return Err(invalid(format!("dice_loss: shapes {:?} vs {:?}", p.shape(), target.shape())));
    }
    let b = p.dim(0);
    let per = p.len() / b;
    let mut inter = vec![0.0; b];
    let mut total = vec![0.0; b];
    for i in 0..b {
        let ps = &p.data()[i * per..(i + 1) * per];
        let ts = &target.data()[i * per..(i + 1) * per];
        inter[i] = ps.iter().zip(ts).map(|(x, y)| x * y).sum();
        total[i] = ps.iter().sum::<f64>() + ts.iter().sum::<f64>();
    }
    let mean_dice = (0..b).map(|i| (2.0 * inter[i] + smooth) / (total[i] + smooth)).sum::<f64>() / b as f64;
    let target = target.clone();
    let shape = p.shape().to_vec();
    Ok(probs.unary(Tensor::scalar(1.0 - mean_dice), move |g| {
        let s = g.item() / b as f64;
        let mut out = vec![0.0; b * per];
        for i in 0..b {
            let den = total[i] + smooth;
            let num = 2.0 * inter[i] + smooth;
            for k in 0..per {
                let t = target.data()[i * per + k];
                out[i * per + k] = -s * (2.0 * t * den - num) / (den * den);
            }
        }
        Tensor::from_parts(shape.clone(), out)
    }))
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn fd_check(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, analytic: &Tensor) {
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((analytic.data()[i] - num).abs() < 1e-6, "{} vs {num}", analytic.data()[i]);
        }
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn([3, 4], 1.0, &mut rng);
        let b = Tensor::randn([3, 4], 1.0, &mut rng);
        let labels = [0usize, 3, 2];

        let eval = |a: &Tensor, b: &Tensor, which: usize| -> f64 {
            let g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            match which {
                0 => x.cross_entropy(&labels).unwrap().item(),
                1 => x.kl_div(y).unwrap().item(),
                _ => x.bernoulli_kl(y).unwrap().item(),
            }
        };
        for which in 0..3 {
            let g = Graph::new();
            let x = g.leaf(Arc::new(a.clone()), true);
            let y = g.leaf(Arc::new(b.clone()), true);
            let out = match which {
                0 => x.cross_entropy(&labels).unwrap(),
                1 => x.kl_div(y).unwrap(),
                _ => x.bernoulli_kl(y).unwrap(),
            };
            let grads = g.backward(out).unwrap();
            fd_check(&a, &|t| eval(t, &b, which), grads.get(x).unwrap());
            if which > 0 {
                fd_check(&b, &|t| eval(&a, t, which), grads.get(y).unwrap());
            }
        }
    }

    #[test]
    fn dice_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = Tensor::uniform([2, 1, 3, 3], 0.05, 0.95, &mut rng);
        let t = Tensor::uniform([2, 1, 3, 3], 0.0, 1.0, &mut rng).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let g = Graph::new();
        let x = g.leaf(Arc::new(p.clone()), true);
        let out = x.dice_loss(&t, 1.0).unwrap();
        let grads = g.backward(out).unwrap();
        fd_check(
            &p,
            &|pp| {
                let g = Graph::new();
                g.constant(pp.clone()).dice_loss(&t, 1.0).unwrap().item()
            },
            grads.get(x).unwrap(),
        );
    }
}
