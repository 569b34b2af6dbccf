#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reprog_core::cotraining::Method;
use reprog_core::data::{SyntheticTaskSpec, TaskKind};
use reprog_core::harness::{RunConfig, StageConfig};
use reprog_core::models::{Family, HeadSpec, ModelSpec};
use reprog_core::pretrain::PretrainConfig;
use reprog_core::reprogramming::ProjectorKind;
use reprog_core::staging::PairingStrategy;
use reprog_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Row-major `n x d` matrix as nested vectors.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.dim(0);
    let d = t.len() / n;
    (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn gram_oracle(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|a| x.iter().map(|b| a.iter().zip(b).map(|(u, v)| u * v).sum()).collect()).collect()
}

/// HSIC by the definition: explicit centring matrix, two products each side,
/// elementwise sum.
pub fn hsic_oracle(k: &[Vec<f64>], l: &[Vec<f64>]) -> f64 {
    let n = k.len();
    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64).collect())
        .collect();
    let kc = matmul(&matmul(&h, k), &h);
    let lc = matmul(&matmul(&h, l), &h);
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += kc[i][j] * lc[i][j];
        }
    }
    s / ((n - 1) as f64).powi(2)
}

pub fn cka_loss_oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let (k, l) = (gram_oracle(x), gram_oracle(y));
    -hsic_oracle(&k, &l) / (hsic_oracle(&k, &k) * hsic_oracle(&l, &l)).sqrt()
}

/// Two-sided paired t-test from first principles. The tail probability
/// uses the substitution `x = sqrt(df) tan(theta)`, under which the t density
/// becomes proportional to `cos^(df-1)(theta)` on `(-pi/2, pi/2)`; both
/// integrals are evaluated with composite Simpson's rule.
pub fn t_test_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    let theta0 = (t.abs() / df.sqrt()).atan();
    let f = |th: f64| th.cos().powf(df - 1.0);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let p = simpson(f, theta0, half_pi, 20_000) / simpson(f, 0.0, half_pi, 20_000);
    (t, p)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// A random orthogonal `d x d` matrix (Gram-Schmidt on Gaussian columns).
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q
}

pub fn right_multiply(x: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    matmul(x, q)
}

pub fn to_tensor(x: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![x.len(), x[0].len()], x.concat()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A seconds-scale classification config: 16x16 images, 2-stage models and
/// an untrained (0-epoch) teacher.
pub fn tiny_classification(method: Method) -> RunConfig {
    let task = SyntheticTaskSpec {
        kind: TaskKind::Classification,
        image_size: [16, 16],
        channels: 3,
        n_classes: 3,
        pretrain_classes: 4,
        style_shift: 0.3,
        n_train: 12,
        n_test: 16,
        n_pretrain_train: 16,
        n_pretrain_test: 8,
        noise: 0.05,
        seed: 3,
    };
    RunConfig {
        method,
        epochs: 2,
        batch_size: 4,
        learning_rate: 5e-3,
        seed: 0,
        projector: (method != Method::Vanilla).then_some(ProjectorKind::Conv3Default),
        diagnose_at: vec![0.5],
        teacher_seed: 1,
        teacher: ModelSpec {
            family: Family::PatchFlat,
            depth: 4,
            width: 4,
            head: HeadSpec::Classifier { classes: 4 },
            in_channels: 3,
            image_size: [16, 16],
            patch: 4,
            downsample_blocks: 0,
        },
        student: ModelSpec {
            family: Family::ConvHierarchical,
            depth: 2,
            width: 4,
            head: HeadSpec::Classifier { classes: 3 },
            in_channels: 3,
            image_size: [16, 16],
            patch: 4,
            downsample_blocks: 1,
        },
        stages: StageConfig { n: 2, teacher_boundaries: None, student_boundaries: None, pairing: PairingStrategy::Identity },
        pretrain: PretrainConfig { epochs: 0, ..PretrainConfig::default() },
        task,
    }
}

pub fn tiny_segmentation(method: Method) -> RunConfig {
    let mut c = tiny_classification(method);
    c.task.kind = TaskKind::Segmentation;
    c.teacher.head = HeadSpec::DenseMask;
    c.student.head = HeadSpec::DenseMask;
    c
}

/// Freshly initialised pieces of a run, without any training.
pub struct Parts {
    pub task: reprog_core::data::TaskData,
    pub teacher: reprog_core::models::BlockSequence,
    pub student: reprog_core::models::BlockSequence,
    pub layout: reprog_core::staging::StageLayout,
    pub projectors: Vec<reprog_core::reprogramming::Projector>,
}

pub fn parts(c: &RunConfig) -> Parts {
    use reprog_core::models::build_model;
    let task = reprog_core::data::generate_task(&c.task).unwrap();
    let teacher = build_model(&c.teacher, c.teacher_seed).unwrap().without_head();
    let student = build_model(&c.student, 42).unwrap();
    let layout = c.layout().unwrap();
    let projectors = reprog_core::cotraining::build_projectors(
        &teacher,
        &student,
        &layout,
        c.method,
        c.projector.unwrap_or(ProjectorKind::Conv3Default),
        9,
    )
    .unwrap();
    Parts { task, teacher, student, layout, projectors }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|g - g_fd| / |g_fd|` over whole gradient vectors.
pub fn vec_rel_err(g: &[f64], fd: &[f64]) -> f64 {
    let diff: Vec<f64> = g.iter().zip(fd).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(fd).max(1e-12)
}

/// Worst relative error of the graph gradient of the CKA loss against
/// central differences (step 1e-4), over `trials` random 4x6 pairs.
pub fn cka_fd_worst(seed: u64, trials: usize) -> f64 {
    use reprog_core::autograd::Graph;
    use reprog_core::kernels::{cka_loss, cka_loss_features, gram};
    use std::sync::Arc;
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = randn(&[4, 6], &mut r);
        let b = randn(&[4, 6], &mut r);
        let g = Graph::new();
        let va = g.leaf(Arc::new(a.clone()), true);
        let vb = g.leaf(Arc::new(b.clone()), true);
        let grads = g.backward(cka_loss_features(va, vb).unwrap()).unwrap();
        let h = 1e-4;
        for (x, v, other, first) in [(&a, va, &b, true), (&b, vb, &a, false)] {
            let analytic = grads.get(v).unwrap().data().to_vec();
            let f = |t: &Tensor| {
                let (p, q) = if first { (t, other) } else { (other, t) };
                cka_loss(&gram(p).unwrap(), &gram(q).unwrap()).unwrap()
            };
            let fd: Vec<f64> = (0..x.len())
                .map(|i| {
                    let mut plus = x.clone();
                    plus.data_mut()[i] += h;
                    let mut minus = x.clone();
                    minus.data_mut()[i] -= h;
                    (f(&plus) - f(&minus)) / (2.0 * h)
                })
                .collect();
            worst = worst.max(vec_rel_err(&analytic, &fd));
        }
    }
    worst
}

/// Relative error of the `l_train` gradient with respect to `samples`
/// randomly chosen projector scalars, against central differences.
pub fn projector_fd_err(c: &RunConfig, samples: usize) -> f64 {
    use reprog_core::cotraining::{LossWeights, TrainState};
    let mut p = parts(c);
    let idx: Vec<usize> = (0..6).collect();
    let (x, y) = p.task.train.batch(&idx);
    let w = LossWeights::fixed(0.7, 0.4);
    let state = TrainState { teacher: &p.teacher, student: &p.student, projectors: &p.projectors, layout: &p.layout };
    let (_, grads) = state.objective(&x, &y, &w, true).unwrap();
    let mut r = rng(4);
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    for _ in 0..samples {
        let k = r.gen_range(0..p.projectors.len());
        let ids: Vec<_> = p.projectors[k].params().ids().collect();
        let j = r.gen_range(0..ids.len());
        let id = ids[j];
        let e = r.gen_range(0..p.projectors[k].params().get(id).len());
        analytic.push(grads.projectors[k][j].as_ref().unwrap().data()[e]);
        let orig = p.projectors[k].params().get(id).data()[e];
        let eval = |v: f64, p: &mut Parts| {
            p.projectors[k].params_mut().get_mut(id).data_mut()[e] = v;
            let st = TrainState { teacher: &p.teacher, student: &p.student, projectors: &p.projectors, layout: &p.layout };
            st.objective(&x, &y, &w, true).unwrap().0.l_train
        };
        let up = eval(orig + h, &mut p);
        let down = eval(orig - h, &mut p);
        eval(orig, &mut p);
        fd.push((up - down) / (2.0 * h));
    }
    vec_rel_err(&analytic, &fd)
}
