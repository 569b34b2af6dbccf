//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Nodes are appended in
//! evaluation order, so node ids are already a topological order and
//! [`Graph::backward`] just walks them in reverse. Values are computed eagerly;
//! backward closures capture whatever forward state they need.
//!
//! Leaves created with `requires_grad = false` (frozen weights, data) never
//! receive gradients, and ops whose inputs are all frozen skip their backward
//! closure entirely.

mod conv;
mod loss;

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;


type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients of one scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(Arc::new(t), false)
    }

    pub fn leaf(&self, t: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: t, parents: Vec::new(), backward: None, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        nodes.push(Node { value: Arc::new(value), parents, backward, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar root. The graph stays usable, so several
    /// roots can be differentiated independently.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(invalid(format!("backward from non-scalar of shape {:?}", root_val.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::full(root_val.shape().to_vec(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = back(&g, &needs);
            grads[id] = Some(g);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, back: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'g> {
        self.graph.push(value, vec![self.id], Box::new(move |g, _| vec![Some(back(g))]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let v = a.zip_map(&b, |x, y| x + y);
        Ok(self.graph.push(v, vec![self.id, other.id], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let v = a.zip_map(&b, |x, y| x - y);
        Ok(self.graph.push(v, vec![self.id, other.id], Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let v = a.zip_map(&b, |x, y| x * y);
        Ok(self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |gv, y| gv * y)),
                    need[1].then(|| g.zip_map(&a, |gv, x| gv * x)),
                ]
            }),
        ))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div")?;
        let v = a.zip_map(&b, |x, y| x / y);
        let out = v.clone();
        Ok(self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |gv, y| gv / y)),
                    need[1].then(|| {
                        let t = g.zip_map(&out, |gv, o| -gv * o);
                        t.zip_map(&b, |x, y| x / y)
                    }),
                ]
            }),
        ))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = self.value().scale(s);
        self.unary(v, move |g| g.scale(s))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn sqrt(self) -> Var<'g> {
        let v = self.value().map(f64::sqrt);
        let out = v.clone();
        self.unary(v, move |g| g.zip_map(&out, |gv, o| 0.5 * gv / o))
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        let out = v.clone();
        self.unary(v, move |g| g.zip_map(&out, |gv, o| if o > 0.0 { gv } else { 0.0 }))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        let out = v.clone();
        self.unary(v, move |g| g.zip_map(&out, |gv, o| gv * o * (1.0 - o)))
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let v = Tensor::scalar(x.sum());
        self.unary(v, move |g| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let v = x.reshape(shape)?;
        Ok(self.unary(v, move |g| g.clone().reshaped(old.clone())))
    }

    /// `(B, ...) -> (B, d)`.
    pub fn flatten_batch(self) -> Result<Var<'g>> {
        let s = self.shape();
        let b = s[0];
        let d: usize = s[1..].iter().product();
        self.reshape([b, d])
    }

    pub fn t(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(invalid(format!("transpose of {}-d tensor", x.ndim())));
        }
        let v = x.t();
        Ok(self.unary(v, |g| g.t()))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0) {
            return Err(invalid(format!("matmul shapes {:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let v = a.matmul(&b);
        Ok(self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut out = vec![0.0; m * k];
                    crate::gemm::gemm(m, n, k, g.data(), false, b.data(), true, &mut out, 0.0);
                    Tensor::from_parts(vec![m, k], out)
                });
                let gb = need[1].then(|| {
                    let mut out = vec![0.0; k * n];
                    crate::gemm::gemm(k, m, n, a.data(), true, g.data(), false, &mut out, 0.0);
                    Tensor::from_parts(vec![k, n], out)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Fully connected layer: `x (B, D) -> x W^T + b` with `W (O, D)`.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        let (x, w) = (self.value(), weight.value());
        if x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1) {
            return Err(invalid(format!("linear shapes {:?} x {:?}", x.shape(), w.shape())));
        }
        let (bsz, d, o) = (x.dim(0), x.dim(1), w.dim(0));
        let mut out = vec![0.0; bsz * o];
        crate::gemm::gemm(bsz, d, o, x.data(), false, w.data(), true, &mut out, 0.0);
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [o] {
                return Err(invalid(format!("linear bias shape {:?}, want [{o}]", bv.shape())));
            }
            for row in out.chunks_mut(o) {
                for (r, bb) in row.iter_mut().zip(bv.data()) {
                    *r += bb;
                }
            }
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let v = Tensor::from_parts(vec![bsz, o], out);
        Ok(self.graph.push(
            v,
            parents,
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut out = vec![0.0; bsz * d];
                    crate::gemm::gemm(bsz, o, d, g.data(), false, w.data(), false, &mut out, 0.0);
                    Tensor::from_parts(vec![bsz, d], out)
                });
                let gw = need[1].then(|| {
                    let mut out = vec![0.0; o * d];
                    crate::gemm::gemm(o, bsz, d, g.data(), true, x.data(), false, &mut out, 0.0);
                    Tensor::from_parts(vec![o, d], out)
                });
                let mut res = vec![gx, gw];
                if need.len() == 3 {
                    res.push(need[2].then(|| {
                        let mut gb = vec![0.0; o];
                        for row in g.data().chunks(o) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::from_parts(vec![o], gb)
                    }));
                }
                res
            }),
        ))
    }

    /// 2-d convolution over `(B, C, H, W)` with weight `(O, C, kh, kw)`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        conv::conv2d(self, weight, bias, stride, pad)
    }

    /// Bilinear resize of `(B, C, H, W)` to `(B, C, oh, ow)` with half-pixel centres.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'g>> {
        conv::resize(self, oh, ow)
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() != 4 {
            return Err(invalid(format!("global_avg_pool expects 4-d input, got {:?}", x.shape())));
        }
        let (b, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let data: Vec<f64> = x.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let shape = x.shape().to_vec();
        Ok(self.unary(Tensor::from_parts(vec![b, c], data), move |g| {
            let mut out = Vec::with_capacity(b * c * hw);
            for &gv in g.data() {
                out.extend(std::iter::repeat(gv / hw as f64).take(hw));
            }
            Tensor::from_parts(shape.clone(), out)
        }))
    }

    /// Double centring `H K H` of a square matrix, `H = I - 11^T / n`.
    pub fn center_gram(self) -> Result<Var<'g>> {
        let k = self.value();
        if k.ndim() != 2 || k.dim(0) != k.dim(1) {
            return Err(invalid(format!("center_gram expects a square matrix, got {:?}", k.shape())));
        }
        let v = double_center(&k);
        // H is symmetric, so the adjoint of K -> HKH is G -> HGH.
        Ok(self.unary(v, double_center))
    }

    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g>> {
        loss::cross_entropy(self, labels)
    }

    /// Batch-mean `KL(softmax(self) || softmax(other))` over rows of `(B, C)` logits.
    pub fn kl_div(self, other: Var<'g>) -> Result<Var<'g>> {
        loss::kl_rows(self, other)
    }

    /// Element-mean KL between Bernoulli distributions given by sigmoid logits.
    pub fn bernoulli_kl(self, other: Var<'g>) -> Result<Var<'g>> {
        loss::kl_bernoulli(self, other)
    }

    /// `1 - mean_b Dice_b` of probabilities against a binary target.
    pub fn dice_loss(self, target: &Tensor, smooth: f64) -> Result<Var<'g>> {
        loss::dice(self, target, smooth)
    }

    pub fn mse(self, other: Var<'g>) -> Result<Var<'g>> {
        let diff = self.sub(other)?;
        Ok(diff.mul(diff)?.mean())
    }

    /// Detach: same value, no gradient flow.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    pub(crate) fn check_finite(self, what: &str) -> Result<Var<'g>> {
        if self.value().all_finite() {
            Ok(self)
        } else {
            Err(Error::NumericalFailure(format!("{what} is not finite")))
        }
    }
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    loss::log_softmax_rows(x, x.len())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn double_center(k: &Tensor) -> Tensor {
    let n = k.dim(0);
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k.get2(i, j)).sum::<f64>() / nf).collect();
    let total = row_means.iter().sum::<f64>() / nf;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k.get2(i, j) - row_means[i] - col_means[j] + total;
        }
    }
    Tensor::from_parts(vec![n, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x: Tensor, build: &dyn for<'g> Fn(Var<'g>) -> Var<'g>) {
        let g = Graph::new();
        let v = g.leaf(Arc::new(x.clone()), true);
        let out = build(v);
        let grads = g.backward(out).unwrap();
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x, &|t| {
            let g = Graph::new();
            let v = g.constant(t.clone());
            build(v).item()
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), 1.0, &mut rng)
    }

    #[test]
    fn elementwise_grads() {
        let c = rand_t(&[2, 3], 9);
        check(rand_t(&[2, 3], 1), &|v| {
            let k = v.graph().constant(c.clone());
            v.mul(k).unwrap().sigmoid().sum()
        });
        check(rand_t(&[2, 3], 2).map(|x| x.abs() + 0.5), &|v| v.sqrt().mean());
        check(rand_t(&[2, 3], 3).map(|x| x.abs() + 0.5), &|v| {
            let k = v.graph().constant(c.clone());
            k.div(v).unwrap().sum()
        });
    }

    #[test]
    fn matmul_and_linear_grads() {
        let w = rand_t(&[4, 3], 5);
        check(rand_t(&[2, 3], 4), &|v| {
            let wv = v.graph().constant(w.clone());
            v.linear(wv, None).unwrap().sigmoid().sum()
        });
        check(rand_t(&[3, 5], 6), &|v| v.matmul(v.t().unwrap()).unwrap().center_gram().unwrap().mul(v.matmul(v.t().unwrap()).unwrap()).unwrap().sum());
    }

    #[test]
    fn centering_zeroes_rows_and_columns() {
        let k = rand_t(&[5, 5], 7);
        let c = double_center(&k);
        for i in 0..5 {
            let r: f64 = c.row(i).iter().sum();
            let col: f64 = (0..5).map(|j| c.get2(j, i)).sum();
            assert!(r.abs() < 1e-12 && col.abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let g = Graph::new();
        let a = g.leaf(Arc::new(Tensor::full([2], 1.0)), false);
        let b = g.leaf(Arc::new(Tensor::full([2], 2.0)), true);
        let out = a.mul(b).unwrap().sum();
        let grads = g.backward(out).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let g = Graph::new();
        let a = g.leaf(Arc::new(Tensor::full([2], 1.0)), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros([2]));
        let b = g.constant(Tensor::zeros([3]));
        assert!(a.add(b).is_err());
    }
}
