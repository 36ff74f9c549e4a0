//! Oracle equivalence and gradient checks for the tensor core.

use hire_core::ops::{self, Interpolation};
use hire_core::reference;
use hire_core::{grad_check, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts an op output against a fixed random tensor so any op becomes a
/// scalar function with a generic gradient.
fn probe(out: &Var, seed: u64) -> hire_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Var::constant(random(out.shape(), &mut rng));
    Ok(out.mul(&r)?.sum())
}

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

#[test]
fn conv2d_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let fast = ops::conv2d(&x, &w, Some(&b), 1, 1).unwrap();
    let slow = reference::conv2d_naive(&x, &w, Some(&b), 1, 1);
    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);

    for (h, w_, stride, pad, k) in [(8, 8, 2, 1, 3), (7, 6, 1, 0, 3), (8, 5, 3, 2, 5), (6, 8, 2, 0, 1)] {
        let x = random(&[2, 3, h, w_], &mut rng);
        let wt = random(&[4, 3, k, k], &mut rng);
        let fast = ops::conv2d(&x, &wt, None, stride, pad).unwrap();
        let slow = reference::conv2d_naive(&x, &wt, None, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }
}

#[test]
fn bilinear_matches_naive_reference() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let fast = ops::bilinear_resize(&x, 4, 4).unwrap();
    let slow = reference::bilinear_resize_naive(&x, 4, 4);
    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    // First row of the 2×2 → 4×4 upsample, worked by hand: coordinates
    // -0.25, 0.25, 0.75, 1.25 clamp to [0, 1].
    assert_eq!(&fast.data()[..4], &[0.0, 0.25, 0.75, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (h, w, oh, ow) in [(5, 7, 8, 3), (8, 8, 3, 5), (3, 4, 7, 7), (6, 6, 6, 6)] {
        let x = random(&[1, 2, h, w], &mut rng);
        let fast = ops::bilinear_resize(&x, oh, ow).unwrap();
        let slow = reference::bilinear_resize_naive(&x, oh, ow);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }
}

#[test]
fn bicubic_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 1, 4, 4], &mut rng);
    let fast = ops::bicubic_resize(&x, 8, 8).unwrap();
    let slow = reference::bicubic_resize_naive(&x, 8, 8);
    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    for (h, w, oh, ow) in [(5, 7, 8, 3), (8, 8, 3, 5), (2, 3, 7, 7)] {
        let x = random(&[2, 1, h, w], &mut rng);
        let fast = ops::bicubic_resize(&x, oh, ow).unwrap();
        let slow = reference::bicubic_resize_naive(&x, oh, ow);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }
}

#[test]
fn bicubic_reproduces_linear_ramps_away_from_borders() {
    // f(y, x) = 0.3 + 1.7 x - 0.4 y on an 8×10 grid, resized to 20×23.
    let (h, w, oh, ow) = (8, 10, 20, 23);
    let x = Tensor::from_fn(&[1, 1, h, w], |i| {
        let (yy, xx) = ((i / w) as f64, (i % w) as f64);
        0.3 + 1.7 * xx - 0.4 * yy
    });
    let y = ops::bicubic_resize(&x, oh, ow).unwrap();
    let mut checked = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            let sy = ops::source_coord(oy, h, oh);
            let sx = ops::source_coord(ox, w, ow);
            // all four taps in range on both axes
            if sy.floor() < 1.0 || sy.floor() + 2.0 > (h - 1) as f64 {
                continue;
            }
            if sx.floor() < 1.0 || sx.floor() + 2.0 > (w - 1) as f64 {
                continue;
            }
            let expect = 0.3 + 1.7 * sx - 0.4 * sy;
            assert!((y.data()[oy * ow + ox] - expect).abs() < 1e-12);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn avg_pool_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (h, w, k) in [(8, 8, 2), (6, 8, 2), (8, 4, 4), (3, 6, 3)] {
        let x = random(&[1, 2, h, w], &mut rng);
        let fast = ops::avg_pool2d(&x, k).unwrap();
        let slow = reference::avg_pool2d_naive(&x, k);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }
}

#[test]
fn avg_pool_672_to_24() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 1, 672, 672], &mut rng);
    let fast = ops::avg_pool2d(&x, 28).unwrap();
    assert_eq!(fast.shape(), &[1, 1, 24, 24]);
    let slow = reference::avg_pool2d_naive(&x, 28);
    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
}

#[test]
fn concat_feature_scale_shape() {
    let a = Tensor::zeros(&[1, 1024, 24, 24]);
    let b = Tensor::full(&[1, 1024, 24, 24], 1.0);
    let c = ops::concat_channels(&a, &b).unwrap();
    assert_eq!(c.shape(), &[1, 2048, 24, 24]);
}

#[test]
fn softmax_matches_naive_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[7], &mut rng);
    let fast = ops::softmax(&x, 0).unwrap();
    let slow = reference::softmax_naive(x.data());
    for (a, b) in fast.data().iter().zip(&slow) {
        assert!((a - b).abs() < 1e-12);
    }
}

// Gradient checks: three shapes per operation, eps 1e-5, tolerance 1e-4.

fn check(f: impl Fn(&[Var]) -> hire_core::Result<Var>, params: &[Tensor]) {
    let report = grad_check(f, params, EPS).unwrap();
    assert!(report.max_rel_error < GRAD_TOL, "{report:?}");
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (shape, wshape, stride, pad) in [
        ([1, 2, 5, 5], [3, 2, 3, 3], 1, 1),
        ([2, 1, 6, 4], [2, 1, 3, 3], 2, 1),
        ([1, 3, 4, 5], [2, 3, 1, 1], 1, 0),
    ] {
        let x = random(&shape, &mut rng);
        let w = random(&wshape, &mut rng);
        let b = random(&[wshape[0]], &mut rng);
        check(
            |v| probe(&v[0].conv2d(&v[1], Some(&v[2]), stride, pad)?, 1),
            &[x, w, b],
        );
    }
}

#[test]
fn grad_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in [Interpolation::Bilinear, Interpolation::Bicubic] {
        for (shape, oh, ow) in [([1, 1, 3, 3], 7, 5), ([1, 2, 4, 5], 2, 3), ([2, 1, 2, 4], 5, 8)] {
            let x = random(&shape, &mut rng);
            check(|v| probe(&v[0].resize(kind, oh, ow)?, 2), &[x]);
        }
    }
}

#[test]
fn grad_avg_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (shape, k) in [([1, 1, 4, 4], 2), ([1, 2, 6, 3], 3), ([2, 1, 4, 8], 4)] {
        check(|v| probe(&v[0].avg_pool2d(k)?, 3), &[random(&shape, &mut rng)]);
    }
}

#[test]
fn grad_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (shape, axis) in [(vec![7], 0), (vec![3, 4], 1), (vec![2, 5, 3], 1)] {
        check(|v| probe(&v[0].softmax(axis)?, 4), &[random(&shape, &mut rng)]);
    }
}

#[test]
fn grad_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (ca, cb, n) in [(1, 1, 1), (2, 3, 1), (1, 2, 2)] {
        let a = random(&[n, ca, 3, 2], &mut rng);
        let b = random(&[n, cb, 3, 2], &mut rng);
        check(|v| probe(&v[0].concat_channels(&v[1])?, 5), &[a, b]);
    }
}

#[test]
fn grad_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for shape in [vec![4], vec![2, 3], vec![1, 2, 2, 3]] {
        let a = random(&shape, &mut rng);
        let b = random(&shape, &mut rng);
        check(|v| probe(&v[0].add(&v[1])?, 6), &[a.clone(), b.clone()]);
        check(|v| probe(&v[0].sub(&v[1])?, 6), &[a.clone(), b.clone()]);
        check(|v| probe(&v[0].mul(&v[1])?, 6), &[a.clone(), b.clone()]);
        check(|v| probe(&v[0].scale(-2.5), 6), &[a.clone()]);
        check(|v| probe(&v[0].tanh(), 6), &[a.clone()]);
        check(|v| v[0].mse_loss(&v[1]), &[a.clone(), b.clone()]);
        // keep relu inputs away from the kink at zero
        let r = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
        check(|v| probe(&v[0].relu(), 6), &[r]);
    }
}

#[test]
fn grad_conv_softmax_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    check(|v| probe(&v[0].conv2d(&v[1], None, 1, 1)?.softmax(1)?, 7), &[x, w]);
}

#[test]
fn backward_replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Var::param(random(&[1, 2, 6, 6], &mut rng));
    let w = Var::param(random(&[3, 2, 3, 3], &mut rng));
    let y = x
        .conv2d(&w, None, 1, 1)
        .unwrap()
        .relu()
        .bilinear_resize(9, 9)
        .unwrap()
        .softmax(1)
        .unwrap();
    let loss = probe(&y, 8).unwrap();
    let g1 = loss.backward().unwrap();
    let g2 = loss.backward().unwrap();
    for v in [&x, &w] {
        let (a, b) = (g1.get(v).unwrap(), g2.get(v).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let n = values.len();
        let y = ops::softmax(&Tensor::new(&[n], values).unwrap(), 0).unwrap();
        prop_assert!((y.sum() - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn resize_preserves_constants(c in -10.0f64..10.0, h in 2usize..9, w in 2usize..9,
                                  oh in 1usize..17, ow in 1usize..17) {
        let x = Tensor::full(&[1, 1, h, w], c);
        for kind in [Interpolation::Bilinear, Interpolation::Bicubic] {
            let y = ops::resize(&x, kind, oh, ow).unwrap();
            prop_assert!(y.data().iter().all(|&v| (v - c).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_matches_naive_on_random_geometry(seed in 0u64..1000, h in 3usize..9, w in 3usize..9,
                                             stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, h, w], &mut rng);
        let wt = random(&[2, 2, 3, 3], &mut rng);
        let fast = ops::conv2d(&x, &wt, None, stride, pad).unwrap();
        let slow = reference::conv2d_naive(&x, &wt, None, stride, pad);
        prop_assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }
}
