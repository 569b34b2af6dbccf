mod common;

use common::*;
use rand::Rng;
use reprog_core::autograd::Graph;
use reprog_core::cotraining::{build_projectors, Method};
use reprog_core::harness::RunConfig;
use reprog_core::models::build_model;
use reprog_core::reprogramming::{build_projector, count_flops, reprogram, ProjectorKind, ProjectorSpec};
use reprog_core::Tensor;

fn spec(kind: ProjectorKind, ci: usize, co: usize, ihw: [usize; 2], ohw: [usize; 2], bias: bool) -> ProjectorSpec {
    ProjectorSpec { kind, in_channels: ci, out_channels: co, in_hw: ihw, out_hw: ohw, hidden_width: None, bias }
}

/// Hand count: layer by layer, kernel volume times fan-in times fan-out.
fn params_oracle(s: &ProjectorSpec) -> usize {
    let bias = |n: usize| if s.bias { n } else { 0 };
    let (ci, co) = (s.in_channels, s.out_channels);
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + bias(o);
    match s.kind {
        ProjectorKind::Linear => {
            let din = ci * s.in_hw[0] * s.in_hw[1];
            let dout = co * s.out_hw[0] * s.out_hw[1];
            din * dout + bias(dout)
        }
        ProjectorKind::Resize1x1 => conv(ci, co, 1),
        ProjectorKind::Conv2 => conv(ci, co, 3) + conv(co, co, 1),
        ProjectorKind::Conv3Default => conv(ci, co, 3) + conv(co, co, 3) + conv(co, co, 1),
        ProjectorKind::WideConv3 => conv(ci, 4 * co, 3) + conv(4 * co, 4 * co, 3) + conv(4 * co, co, 1),
    }
}

#[test]
fn documented_counts() {
    let lin = spec(ProjectorKind::Linear, 64, 32, [16, 16], [8, 8], true);
    assert_eq!(lin.param_count(), 16384 * 2048 + 2048);
    let r = spec(ProjectorKind::Resize1x1, 64, 32, [16, 16], [8, 8], true);
    assert_eq!(r.param_count(), 64 * 32 + 32);
    assert_eq!(count_flops(&r), 131072);
    let tiny = spec(ProjectorKind::Linear, 10, 10, [1, 1], [1, 1], false);
    assert_eq!(count_flops(&tiny), 100);
}

#[test]
fn random_shapes_match_hand_counts() {
    let mut r = rng(50);
    for case in 0..50 {
        let kind = ProjectorKind::ALL[case % ProjectorKind::ALL.len()];
        let side = |r: &mut rand_chacha::ChaCha8Rng| [r.gen_range(1..7), r.gen_range(1..7)];
        let s = spec(kind, r.gen_range(1..7), r.gen_range(1..7), side(&mut r), side(&mut r), r.gen_bool(0.7));
        let p = build_projector(&s, case as u64).unwrap();
        assert_eq!(p.param_count(), params_oracle(&s), "{s:?}");
        assert_eq!(s.param_count() as usize, params_oracle(&s));
        let x = randn(&[2, s.in_channels, s.in_hw[0], s.in_hw[1]], &mut r);
        let y = reprogram(&p, &x).unwrap();
        assert_eq!(y.shape(), &[2, s.out_channels, s.out_hw[0], s.out_hw[1]]);
        assert!(y.all_finite());
    }
}

#[test]
fn gradients_reach_every_projector_parameter() {
    let mut r = rng(3);
    for kind in ProjectorKind::ALL {
        let s = spec(kind, 3, 4, [6, 6], [3, 3], true);
        let p = build_projector(&s, 1).unwrap();
        let g = Graph::new();
        let b = p.params().bind(&g, true);
        let x = g.constant(randn(&[2, 3, 6, 6], &mut r));
        let y = p.forward(&b, x).unwrap();
        let loss = y.mse(g.constant(Tensor::zeros([2, 4, 3, 3]))).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, gr) in b.grads(&grads).iter().enumerate() {
            let gr = gr.as_ref().unwrap_or_else(|| panic!("{kind}: no gradient for parameter {i}"));
            assert!(gr.data().iter().any(|v| *v != 0.0), "{kind}: zero gradient for parameter {i}");
        }
    }
}

#[test]
fn reference_layout_projector_budget() {
    // teacher stages 16ch at 8x8; student stages 8@16x16, 16@8x8, 32@4x4, 32@4x4.
    // conv3_default with hidden = out: 9*ci*co + co + 9*co*co + co + co*co + co
    let c3 = |ci: usize, co: usize| 9 * ci * co + co + 9 * co * co + co + co * co + co;
    let want = c3(16, 8) + c3(16, 16) + 2 * c3(16, 32);
    assert_eq!(want, 36616);
    let c = RunConfig::reference_classification();
    let teacher = build_model(&c.teacher, 0).unwrap().without_head();
    let student = build_model(&c.student, 0).unwrap();
    let projectors =
        build_projectors(&teacher, &student, &c.layout().unwrap(), Method::Drd, ProjectorKind::Conv3Default, 0).unwrap();
    assert_eq!(projectors.iter().map(|p| p.param_count()).sum::<usize>(), want);
}
