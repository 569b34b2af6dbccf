mod common;

use common::*;
use proptest::prelude::*;
use reprog_core::kernels::{cka_loss, cosine_similarity, cross_entropy, dice_loss, gram, hsic, kl_divergence};
use reprog_core::{Error, Tensor};

fn cka_of(x: &Tensor, y: &Tensor) -> f64 {
    cka_loss(&gram(x).unwrap(), &gram(y).unwrap()).unwrap()
}

#[test]
fn hsic_matches_definition_for_small_batches() {
    let mut r = rng(11);
    for n in 2..=4 {
        for trial in 0..20 {
            let d = 1 + trial % 5;
            let x = randn(&[n, d], &mut r);
            let y = randn(&[n, d + 1], &mut r);
            let got = hsic(&gram(&x).unwrap(), &gram(&y).unwrap()).unwrap();
            let want = hsic_oracle(&gram_oracle(&rows(&x)), &gram_oracle(&rows(&y)));
            assert!((got - want).abs() < 1e-9, "n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn cka_matches_definition_on_conv_shaped_features() {
    let mut r = rng(5);
    let x = randn(&[5, 2, 3, 3], &mut r);
    let y = randn(&[5, 4, 2, 2], &mut r);
    let want = cka_loss_oracle(&rows(&x), &rows(&y));
    assert!((cka_of(&x, &y) - want).abs() < 1e-9);
}

#[test]
fn cka_orthogonal_invariance() {
    let mut r = rng(17);
    for _ in 0..10 {
        let x = rows(&randn(&[6, 5], &mut r));
        let y = rows(&randn(&[6, 3], &mut r));
        let q = random_orthogonal(5, &mut r);
        let base = cka_of(&to_tensor(&x), &to_tensor(&y));
        let rotated = cka_of(&to_tensor(&right_multiply(&x, &q)), &to_tensor(&y));
        assert!((base - rotated).abs() < 1e-5);
    }
}

#[test]
fn cka_rejects_constant_features() {
    let x = Tensor::full([4, 3], 2.0);
    let y = Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(matches!(cka_loss(&gram(&x).unwrap(), &gram(&y).unwrap()), Err(Error::DegenerateFeatures(_))));
}

#[test]
fn kl_one_hot_against_uniform() {
    let v = kl_divergence(&[60.0, 0.0], &[0.0, 0.0]).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(kl_divergence(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn cross_entropy_batch_mean() {
    let logits = Tensor::new([2, 2], vec![80.0, 0.0, 0.0, 0.0]).unwrap();
    let v = cross_entropy(&logits, &[0, 1]).unwrap();
    assert!((v - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    assert!(cross_entropy(&logits, &[0, 2]).is_err());
}

#[test]
fn dice_half_coverage() {
    // target has 2k = 2000 positives, pred covers exactly half of them
    let n = 4000;
    let target: Vec<f64> = (0..n).map(|i| (i < 2000) as u8 as f64).collect();
    let pred: Vec<f64> = (0..n).map(|i| (i < 1000) as u8 as f64).collect();
    let t = Tensor::new([1, 1, 40, 100], target.clone()).unwrap();
    let p = Tensor::new([1, 1, 40, 100], pred).unwrap();
    let loss = dice_loss(&p, &t).unwrap();
    assert!((loss - 1.0 / 3.0).abs() < 1e-3);
    assert!(dice_loss(&t, &t).unwrap() < 1e-3);
    assert!(dice_loss(&p, &Tensor::zeros([1, 1, 40, 99])).is_err());
}

#[test]
fn cosine_edges() {
    assert!((cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector(_))));
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n * d)
}

fn non_degenerate(x: &Tensor) -> bool {
    let g = gram(x).unwrap();
    hsic(&g, &g).unwrap() > 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cka_self_similarity_is_minus_one(data in matrix(5, 4)) {
        let x = Tensor::new([5, 4], data).unwrap();
        prop_assume!(non_degenerate(&x));
        prop_assert!((cka_of(&x, &x) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn cka_isotropic_scaling_invariance(a in matrix(6, 3), b in matrix(6, 2), c in 0.01f64..100.0) {
        let x = Tensor::new([6, 3], a).unwrap();
        let y = Tensor::new([6, 2], b).unwrap();
        prop_assume!(non_degenerate(&x) && non_degenerate(&y));
        prop_assert!((cka_of(&x, &y) - cka_of(&x.scale(c), &y)).abs() < 1e-6);
        prop_assert!((cka_of(&x, &y) - cka_of(&x, &y.scale(c))).abs() < 1e-6);
    }

    #[test]
    fn cka_in_range_and_symmetric(a in matrix(4, 3), b in matrix(4, 5)) {
        let x = Tensor::new([4, 3], a).unwrap();
        let y = Tensor::new([4, 5], b).unwrap();
        prop_assume!(non_degenerate(&x) && non_degenerate(&y));
        let v = cka_of(&x, &y);
        prop_assert!((-1.0 - 1e-12..=1e-12).contains(&v));
        prop_assert!((v - cka_of(&y, &x)).abs() < 1e-12);
    }

    #[test]
    fn losses_stay_in_range(p in prop::collection::vec(-20.0f64..20.0, 3), q in prop::collection::vec(-20.0f64..20.0, 3),
                            probs in prop::collection::vec(0.0f64..1.0, 12), bits in prop::collection::vec(any::<bool>(), 12)) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        let logits = Tensor::new([1, 3], p.clone()).unwrap();
        prop_assert!(cross_entropy(&logits, &[1]).unwrap() >= 0.0);
        let pred = Tensor::new([2, 6], probs).unwrap();
        let target = Tensor::new([2, 6], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let d = dice_loss(&pred, &target).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
