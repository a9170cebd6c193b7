mod common;

use gilab_core::gradmatch::*;
use gilab_core::tensor::NamedArray;
use gilab_core::{GradientSet, ImageBatch, ImageShape};
use proptest::prelude::*;
use rand::Rng;

fn interior_batch(seed: u64) -> ImageBatch {
    let shape = ImageShape::new(3, 8, 8);
    let mut r = common::rng(seed);
    ImageBatch::new(shape, (0..2 * shape.len()).map(|_| r.random_range(0.1..0.9)).collect()).unwrap()
}

fn at(shape: ImageShape, x: &[f64]) -> ImageBatch {
    ImageBatch::new(shape, x.to_vec()).unwrap()
}

fn grad(values: Vec<f64>) -> GradientSet {
    let n = values.len();
    GradientSet::new(vec![NamedArray::new("w", vec![n], values).unwrap()], 1)
}

#[test]
fn regularizer_gradients_match_central_differences() {
    for seed in 0..3 {
        let x = interior_batch(seed);
        let shape = x.shape();
        let consensus = compute_consensus(&x).unwrap();
        let h = 1e-4;

        let fd = common::central_diff(|v| tv_regularizer(&at(shape, v)), x.data(), h);
        assert!(common::rel_err(&tv_regularizer_grad(&x), &fd, 1e-12) <= 1e-4);

        let fd = common::central_diff(|v| l2_regularizer(&at(shape, v)), x.data(), h);
        assert!(common::rel_err(&l2_regularizer_grad(&x), &fd, 1e-12) <= 1e-4);

        let fd = common::central_diff(|v| group_regularizer(&at(shape, v), &consensus).unwrap(), x.data(), h);
        assert!(common::rel_err(&group_regularizer_grad(&x, &consensus).unwrap(), &fd, 1e-12) <= 1e-4);

        let w = RegWeights {
            alpha_tv: 0.3,
            alpha_l2: 0.2,
            alpha_group: 0.5,
            tv_pairs_twice: true,
        };
        let fd = common::central_diff(|v| combined_aux(&at(shape, v), &w, Some(&consensus)).unwrap(), x.data(), h);
        let an = combined_aux_grad(&x, &w, Some(&consensus)).unwrap();
        assert!(common::rel_err(&an, &fd, 1e-12) <= 1e-4);
    }
}

#[test]
fn tv_matches_pair_enumeration() {
    let x = interior_batch(5);
    let s = x.shape();
    let mut brute = 0.0;
    for b in 0..x.batch() {
        let img = x.image(b);
        for c in 0..s.channels {
            for y in 0..s.height {
                for xx in 0..s.width {
                    let v = img[(c * s.height + y) * s.width + xx];
                    if xx + 1 < s.width {
                        brute += (v - img[(c * s.height + y) * s.width + xx + 1]).powi(2);
                    }
                    if y + 1 < s.height {
                        brute += (v - img[(c * s.height + y + 1) * s.width + xx]).powi(2);
                    }
                }
            }
        }
    }
    assert!((tv_regularizer(&x) - brute).abs() < 1e-10);
    let pair = ImageBatch::new(ImageShape::new(1, 1, 2), vec![0.0, 1.0]).unwrap();
    assert_eq!(tv_regularizer(&pair), 1.0);
    let flat = ImageBatch::filled(ImageShape::new(3, 8, 8), 2, 0.4).unwrap();
    assert_eq!(tv_regularizer(&flat), 0.0);
}

#[test]
fn l2_group_and_consensus_examples() {
    let s = ImageShape::new(1, 1, 1);
    assert_eq!(l2_regularizer(&ImageBatch::new(s, vec![0.5]).unwrap()), 0.25);
    let two = ImageBatch::new(s, vec![0.0, 1.0]).unwrap();
    let c = compute_consensus(&two).unwrap();
    assert_eq!(c.data(), &[0.5]);
    assert_eq!(group_regularizer(&two, &c).unwrap(), 0.5);

    let x = interior_batch(6);
    let flat: f64 = x.data().iter().map(|v| v * v).sum();
    assert!((l2_regularizer(&x) - flat).abs() < 1e-10);
    let c = compute_consensus(&x).unwrap();
    let n = x.shape().len();
    for i in 0..n {
        assert!((c.data()[i] - (x.image(0)[i] + x.image(1)[i]) / 2.0).abs() < 1e-15);
    }
    let a = x.image(0).to_vec();
    let inv: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
    let pair = ImageBatch::new(x.shape(), [a, inv].concat()).unwrap();
    assert!(compute_consensus(&pair).unwrap().data().iter().all(|v| (v - 0.5).abs() < 1e-15));

    let w = RegWeights::default();
    let oracle = 1e-4 * (tv_regularizer(&x) + l2_regularizer(&x) + group_regularizer(&x, &c).unwrap());
    assert!((combined_aux(&x, &w, Some(&c)).unwrap() - oracle).abs() < 1e-15);
    assert!(combined_aux(&x, &w, None).is_err());
    let tv = RegWeights::tv_only(1.0);
    assert_eq!(combined_aux(&x, &tv, None).unwrap(), tv_regularizer(&x));
}

#[test]
fn schedule_is_exact_over_every_iteration() {
    let p = LossSchedule::default().with_total(4000);
    assert_eq!(p.transition(), 1777);
    for t in 0..4000 {
        let (wg, wa) = schedule_weights(t, &p).unwrap();
        if t < 1777 {
            assert_eq!((wg, wa), (1.0, 0.0), "t={t}");
        } else {
            assert_eq!((wg, wa), (0.5, 1.0), "t={t}");
        }
    }
    assert!(schedule_weights(4000, &p).is_err());
    let nine = LossSchedule::default().with_total(9);
    assert_eq!(schedule_weights(0, &nine).unwrap(), (1.0, 0.0));
    assert_eq!(schedule_weights(3, &nine).unwrap(), (1.0, 0.0));
    assert_eq!(schedule_weights(5, &nine).unwrap(), (0.5, 1.0));
}

#[test]
fn distance_examples() {
    let g = grad(vec![0.2, -0.7, 0.1]);
    let z = grad(vec![0.0; 3]);
    assert_eq!(grad_distance_mse(&g, &g).unwrap(), 0.0);
    assert_eq!(grad_distance_maxabs(&grad(vec![0.2, -0.7]), &grad(vec![0.0, 0.0])).unwrap(), 0.7);
    assert_eq!(grad_distance_cosine(&g, &z).unwrap(), 1.0);
    assert!(grad_distance_cosine(&z, &z).is_err());
    let neg = grad(vec![-0.2, 0.7, -0.1]);
    assert!((grad_distance_cosine(&g, &neg).unwrap() - 2.0).abs() < 1e-12);
    let other = GradientSet::new(vec![NamedArray::new("v", vec![3], vec![0.0; 3]).unwrap()], 1);
    assert!(grad_distance_mse(&g, &other).is_err());
}

#[test]
fn distance_gradients_match_central_differences() {
    let mut r = common::rng(8);
    let a: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let obs = grad(b);
    for kind in [Distance::Mse, Distance::Cosine] {
        let (_, an) = grad_distance_with_grad(kind, &grad(a.clone()), &obs).unwrap();
        let fd = common::central_diff(|v| grad_distance(kind, &grad(v.to_vec()), &obs).unwrap(), &a, 1e-6);
        assert!(common::rel_err(&an.flatten(), &fd, 1e-12) < 1e-6, "{kind:?}");
    }
}

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..64)
}

proptest! {
    #[test]
    fn cosine_ignores_positive_scaling(a in vec_strategy(), s1 in 1e-3f64..1e3, s2 in 1e-3f64..1e3, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let b: Vec<f64> = a.iter().map(|_| r.random_range(-1.0..1.0)).collect();
        prop_assume!(a.iter().any(|v| *v != 0.0));
        let d = grad_distance_cosine(&grad(a.clone()), &grad(b.clone())).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * s1).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * s2).collect();
        let ds = grad_distance_cosine(&grad(sa), &grad(sb)).unwrap();
        prop_assert!((d - ds).abs() < 1e-9);
    }

    #[test]
    fn mse_grows_under_single_entry_perturbation(a in vec_strategy(), idx in 0usize..64, delta in 1e-3f64..1.0) {
        let i = idx % a.len();
        let g = grad(a.clone());
        let mut p = a.clone();
        p[i] += delta;
        let d1 = grad_distance_mse(&grad(p.clone()), &g).unwrap();
        p[i] += delta;
        let d2 = grad_distance_mse(&grad(p), &g).unwrap();
        prop_assert!(d1 > 0.0 && d2 > d1);
    }

    #[test]
    fn maxabs_is_the_flattened_maximum(a in vec_strategy(), seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let b: Vec<f64> = a.iter().map(|_| r.random_range(-10.0..10.0)).collect();
        let brute = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert_eq!(grad_distance_maxabs(&grad(a), &grad(b)).unwrap(), brute);
    }
}
