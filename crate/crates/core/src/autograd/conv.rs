//! Convolution (im2col + gemm) and bilinear resizing.

use super::Var;
use crate::error::{invalid, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn ncol(&self) -> usize {
        self.b * self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &Geom) -> Vec<f64> {
    let ncol = g.ncol();
    let mut cols = vec![0.0; g.c * g.kh * g.kw * ncol];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for bi in 0..g.b {
                    let src = &x[(bi * g.c + ci) * g.h * g.w..(bi * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[(bi * g.oh + oy) * g.ow..(bi * g.oh + oy + 1) * g.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geom) -> Vec<f64> {
    let ncol = g.ncol();
    let mut x = vec![0.0; g.b * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for bi in 0..g.b {
                    let base = (bi * g.c + ci) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[(bi * g.oh + oy) * g.ow..(bi * g.oh + oy + 1) * g.ow];
                        for (ox, s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[base + iy as usize * g.w + ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Geom> {
    if x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1) {
        return Err(invalid(format!("conv2d shapes: input {:?}, weight {:?}", x.shape(), w.shape())));
    }
    let (kh, kw) = (w.dim(2), w.dim(3));
    let oh = conv_out_size(x.dim(2), kh, stride, pad);
    let ow = conv_out_size(x.dim(3), kw, stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(invalid(format!("conv2d: kernel {kh}x{kw} does not fit input {:?}", x.shape())));
    };
    Ok(Geom { b: x.dim(0), c: x.dim(1), h: x.dim(2), w: x.dim(3), kh, kw, stride, pad, oh, ow })
}

/// `(O, B*P)` gemm layout to `(B, O, P)` tensor layout, plus optional bias.
fn unfold_output(mat: &[f64], o: usize, b: usize, p: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; b * o * p];
    for oi in 0..o {
        let bb = bias.map_or(0.0, |bs| bs[oi]);
        for bi in 0..b {
            let src = &mat[oi * b * p + bi * p..oi * b * p + (bi + 1) * p];
            let dst = &mut out[(bi * o + oi) * p..(bi * o + oi + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bb;
            }
        }
    }
    out
}

fn fold_grad(g: &[f64], o: usize, b: usize, p: usize) -> Vec<f64> {
    let mut mat = vec![0.0; o * b * p];
    for bi in 0..b {
        for oi in 0..o {
            let src = &g[(bi * o + oi) * p..(bi * o + oi + 1) * p];
            mat[oi * b * p + bi * p..oi * b * p + (bi + 1) * p].copy_from_slice(src);
        }
    }
    mat
}

/// Plain forward convolution; the reference for the graph op in tests.
#[cfg(test)]
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = geometry(x, w, stride, pad)?;
    let o = w.dim(0);
    let ckk = g.c * g.kh * g.kw;
    let cols = im2col(x.data(), &g);
    let mut mat = vec![0.0; o * g.ncol()];
    gemm(o, ckk, g.ncol(), w.data(), false, &cols, false, &mut mat, 0.0);
    let out = unfold_output(&mat, o, g.b, g.oh * g.ow, bias.map(|b| b.data()));
    Ok(Tensor::from_parts(vec![g.b, o, g.oh, g.ow], out))
}

pub(super) fn conv2d<'g>(x: Var<'g>, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
    let xv = x.value();
    let wv = weight.value();
    let g = geometry(&xv, &wv, stride, pad)?;
    let o = wv.dim(0);
    if let Some(b) = bias {
        if b.value().shape() != [o] {
            return Err(invalid(format!("conv2d bias shape {:?}, want [{o}]", b.value().shape())));
        }
    }
    let ckk = g.c * g.kh * g.kw;
    let ncol = g.ncol();
    let p = g.oh * g.ow;
    let cols = im2col(xv.data(), &g);
    let mut mat = vec![0.0; o * ncol];
    gemm(o, ckk, ncol, wv.data(), false, &cols, false, &mut mat, 0.0);
    let bias_val = bias.map(|b| b.value());
    let out = unfold_output(&mat, o, g.b, p, bias_val.as_deref().map(|b| b.data()));
    let value = Tensor::from_parts(vec![g.b, o, g.oh, g.ow], out);

    let mut parents = vec![x.id, weight.id];
    if let Some(b) = bias {
        parents.push(b.id);
    }
    let x_shape = xv.shape().to_vec();
    let w_shape = wv.shape().to_vec();
    drop(xv);
    Ok(x.graph.push(
        value,
        parents,
        Box::new(move |grad, need| {
            let gmat = fold_grad(grad.data(), o, g.b, p);
            let gx = need[0].then(|| {
                let mut dcols = vec![0.0; ckk * ncol];
                gemm(ckk, o, ncol, wv.data(), true, &gmat, false, &mut dcols, 0.0);
                Tensor::from_parts(x_shape.clone(), col2im(&dcols, &g))
            });
            let gw = need[1].then(|| {
                let mut dw = vec![0.0; o * ckk];
                gemm(o, ncol, ckk, &gmat, false, &cols, true, &mut dw, 0.0);
                Tensor::from_parts(w_shape.clone(), dw)
            });
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(need[2].then(|| {
                    let db: Vec<f64> = gmat.chunks(ncol).map(|r| r.iter().sum()).collect();
                    Tensor::from_parts(vec![o], db)
                }));
            }
            res
        }),
    ))
}

/// Per-axis source taps for half-pixel bilinear sampling.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

/// Plain bilinear resize of a `(B, C, H, W)` tensor.
pub(crate) fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0.0; b * c * oh * ow];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[y * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_parts(vec![b, c, oh, ow], out)
}

pub(super) fn resize<'g>(x: Var<'g>, oh: usize, ow: usize) -> Result<Var<'g>> {
    let xv = x.value();
    if xv.ndim() != 4 || oh == 0 || ow == 0 {
        return Err(invalid(format!("resize of {:?} to {oh}x{ow}", xv.shape())));
    }
    let (h, w) = (xv.dim(2), xv.dim(3));
    if (h, w) == (oh, ow) {
        return Ok(x);
    }
    let value = bilinear_resize(&xv, oh, ow);
    let shape = xv.shape().to_vec();
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    Ok(x.unary(value, move |g| {
        let mut gx = vec![0.0; shape.iter().product()];
        for (dst, src) in gx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = src[y * ow + xx];
                    dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                    dst[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        Tensor::from_parts(shape.clone(), gx)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let oh = conv_out_size(h, kh, stride, pad).unwrap();
        let ow = conv_out_size(wd, kw, stride, pad).unwrap();
        let mut out = Tensor::zeros([b, o, oh, ow]);
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oi * c + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oi) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::randn([4, 3, 3, 3], 1.0, &mut rng);
        for (s, p) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let got = conv2d_forward(&x, &w, None, s, p).unwrap();
            let want = naive_conv(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn([3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn([3], 1.0, &mut rng);
        let r = Tensor::randn([2, 3, 3, 3], 1.0, &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            conv2d_forward(x, w, Some(b), 2, 1).unwrap().dot(&r)
        };
        let g = Graph::new();
        let xv = g.leaf(Arc::new(x.clone()), true);
        let wv = g.leaf(Arc::new(w.clone()), true);
        let bv = g.leaf(Arc::new(b.clone()), true);
        let rv = g.constant(r.clone());
        let out = xv.conv2d(wv, Some(bv), 2, 1).unwrap().mul(rv).unwrap().sum();
        let grads = g.backward(out).unwrap();
        let h = 1e-6;
        for (t, which) in [(&x, 0), (&w, 1), (&b, 2)] {
            let an = grads.get([xv, wv, bv][which]).unwrap();
            for i in 0..t.len() {
                let mut p = t.clone();
                p.data_mut()[i] += h;
                let mut m = t.clone();
                m.data_mut()[i] -= h;
                let f = |tt: &Tensor| match which {
                    0 => loss(tt, &w, &b),
                    1 => loss(&x, tt, &b),
                    _ => loss(&x, &w, tt),
                };
                let num = (f(&p) - f(&m)) / (2.0 * h);
                assert!((an.data()[i] - num).abs() < 1e-6, "param {which} idx {i}: {} vs {num}", an.data()[i]);
            }
        }
    }

    #[test]
    fn resize_identity_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
        assert_eq!(bilinear_resize(&x, 4, 4), x);
        let r = Tensor::randn([1, 2, 7, 3], 1.0, &mut rng);
        let g = Graph::new();
        let xv = g.leaf(Arc::new(x.clone()), true);
        let out = xv.resize_bilinear(7, 3).unwrap().mul(g.constant(r.clone())).unwrap().sum();
        let grads = g.backward(out).unwrap();
        let an = grads.get(xv).unwrap();
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            let num = (bilinear_resize(&p, 7, 3).dot(&r) - bilinear_resize(&m, 7, 3).dot(&r)) / 2e-6;
            assert!((an.data()[i] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::full([1, 1, 3, 5], 0.7);
        let y = bilinear_resize(&x, 8, 2);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}
