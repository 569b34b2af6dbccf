mod common;

use common::*;
use rand::Rng;
use reprog_core::cotraining::{Method, TrainSettings, TrainSetup, TrainState};
use reprog_core::diagnostics::{
    convergence_track, gradient_diagnosis, measure_overhead, paired_t_test, stage_similarity, trained_similarity, SimilarityMode,
};
use reprog_core::staging::stage_outputs;
use reprog_core::Error;

#[test]
fn t_test_matches_first_principles_oracle() {
    let mut r = rng(8);
    for case in 0..50 {
        let n = 2 + case % 9;
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(50.0..90.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x - r.gen_range(-3.0..6.0)).collect();
        let got = paired_t_test(&a, &b).unwrap();
        let (t, p) = t_test_oracle(&a, &b);
        assert!((got.t - t).abs() < 1e-6, "t {} vs {t}", got.t);
        assert!((got.p - p).abs() < 1e-4, "n={n}: p {} vs {p}", got.p);
        assert_eq!(got.df, n - 1);
    }
}

#[test]
fn t_test_hand_case() {
    // differences 1,2,3,4: mean 2.5, sd sqrt(5/3), t = 2.5 / (sd / 2)
    let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).unwrap();
    assert!((r.t - 3.873).abs() < 1e-3);
    assert_eq!(r.df, 3);
    assert!((r.p - 0.0305).abs() < 1e-3, "p {}", r.p);
    assert!(matches!(paired_t_test(&[1.0, 2.0], &[0.0, 1.0]), Err(Error::DegenerateTest(_))));
    assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
}

#[test]
fn similarity_bounds_and_modes() {
    let mut r = rng(2);
    let t = vec![randn(&[6, 4, 3, 3], &mut r), randn(&[6, 4, 2, 2], &mut r)];
    let m = stage_similarity(&t, &t).unwrap();
    assert_eq!(m.mode, SimilarityMode::Direct);
    for i in 0..2 {
        assert!((m.values[i][i] - 1.0).abs() < 1e-12);
    }
    let s = vec![randn(&[6, 3, 4, 4], &mut r), randn(&[6, 8, 2, 2], &mut r), randn(&[6, 5], &mut r)];
    let m = stage_similarity(&t, &s).unwrap();
    assert_eq!(m.mode, SimilarityMode::Relational);
    assert_eq!((m.values.len(), m.values[0].len()), (2, 3));
    assert!(m.values.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    assert!(stage_similarity(&t, &[randn(&[5, 4], &mut r)]).is_err());
    assert!(stage_similarity(&[], &t).is_err());
}

#[test]
fn diagnosis_only_reads_the_state() {
    let c = tiny_classification(Method::Drd);
    let p = parts(&c);
    let (x, y) = p.task.test.batch(&(0..8).collect::<Vec<_>>());
    let before = (p.student.clone(), p.projectors.clone());
    let state = TrainState { teacher: &p.teacher, student: &p.student, projectors: &p.projectors, layout: &p.layout };
    let a = gradient_diagnosis(&state, &x, &y).unwrap();
    let b = gradient_diagnosis(&state, &x, &y).unwrap();
    assert_eq!(a, b);
    assert_eq!(before.0.params(), p.student.params());
    assert!(before.1.iter().zip(&p.projectors).all(|(u, v)| u.params() == v.params()));
    assert!((-1.0..=1.0).contains(&a.cos_hybrid_vs_sup) && (-1.0..=1.0).contains(&a.cos_kd_vs_sup));
    assert!(a.cka_to_sup_norm_ratio >= 0.0);
    assert_eq!(a.parameter_scope, "student.block1");

    let sim = trained_similarity(&state, &x).unwrap();
    assert_eq!(sim.values.len(), 2);
    let sf = stage_outputs(&p.student, &p.layout.student, &x).unwrap();
    assert_eq!(stage_similarity(&sf, &sf).unwrap().diagonal_mean(), 1.0);
}

#[test]
fn convergence_summary() {
    let s = convergence_track(&[2.0, 1.5, 1.2, 1.0, 1.1], &[0.2, 0.5, 0.7, 0.6, 0.65]).unwrap();
    assert_eq!(s.decrease_fraction, 1.0);
    assert_eq!((s.best_epoch, s.best_metric), (3, 0.7));
    assert!(!s.diverged);
    let d = convergence_track(&[1.0, 5.0, 20.0], &[0.5, 0.4, 0.1]).unwrap();
    assert!(d.diverged);
    assert!(convergence_track(&[1.0, f64::NAN], &[0.1, 0.1]).unwrap().diverged);
    assert!(convergence_track(&[1.0], &[0.1]).is_err());
}

#[test]
fn overhead_reports_parameter_counts() {
    let c = tiny_classification(Method::Drd);
    let p = parts(&c);
    let st = TrainSettings { batch_size: 4, ..TrainSettings::new(Method::Drd, 1, 0) };
    let setup = TrainSetup { data: &p.task, teacher: &p.teacher, student_spec: &c.student, layout: &p.layout, settings: &st };
    let o = measure_overhead(&setup, 1).unwrap();
    assert_eq!(o.iterations, 100);
    assert!(o.ms_per_iter > 0.0 && o.median_ms > 0.0);
    assert_eq!(o.params.projectors, p.projectors.iter().map(|q| q.spec().param_count() as usize).sum::<usize>());
    assert_eq!(o.params.student, p.student.params().num_scalars());
    assert_eq!(o.params.teacher, p.teacher.params().num_scalars());
}
