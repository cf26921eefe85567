//! Randomized invariants of the linear algebra, warps, codebook and metrics.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use scg_core::analysis::{circular_variance, module_reconstruction, psnr, ssim, TuningCurve};
use scg_core::codebook::{Codebook, GridShape, InitMode};
use scg_core::dataset::SeededRng;
use scg_core::model::{KernelBank, ModelConfig};
use scg_core::tensor::{conv2d, deconv2d_to, warp, Kernels, Tensor3, TransformParams};

fn tensor(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> Tensor3<f64> {
    Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn kernels(rng: &mut SeededRng, n: usize, c: usize, side: usize) -> Kernels<f64> {
    Kernels::from_vec(n, c, side, (0..n * c * side * side).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), c in 1usize..3, side in 1usize..5, s in 1usize..3, extra in 0usize..8, a in -3.0f64..3.0) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let n = side + extra;
        let (x, y) = (tensor(&mut rng, c, n, n), tensor(&mut rng, c, n, n));
        let k = kernels(&mut rng, 3, c, side);
        let mut combo = x.scaled(a);
        combo.add_scaled(1.0, &y).unwrap();
        let lhs = conv2d(&combo, &k, s).unwrap();
        let mut rhs = conv2d(&x, &k, s).unwrap().scaled(a);
        rhs.add_scaled(1.0, &conv2d(&y, &k, s).unwrap()).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn deconv_is_the_adjoint_of_conv(seed in any::<u64>(), c in 1usize..3, side in 1usize..6, s in 1usize..4, eh in 0usize..9, ew in 0usize..9) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let (h, w) = (side + eh, side + ew);
        let img = tensor(&mut rng, c, h, w);
        let k = kernels(&mut rng, 4, c, side);
        let out = conv2d(&img, &k, s).unwrap();
        let f = tensor(&mut rng, 4, out.height(), out.width());
        let lhs = out.inner(&f).unwrap();
        let rhs = img.inner(&deconv2d_to(&f, &k, s, h, w).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn integer_translation_round_trips_in_the_interior(seed in any::<u64>(), tx in -3i32..4, ty in -3i32..4) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let img = tensor(&mut rng, 1, 12, 12);
        let there = warp(&img, &TransformParams::new(tx as f64, ty as f64, 0.0));
        let back = warp(&there, &TransformParams::new(-tx as f64, -ty as f64, 0.0));
        let m = 4;
        for y in m..12 - m {
            for x in m..12 - m {
                prop_assert!((back.at(0, y, x) - img.at(0, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_is_linear(seed in any::<u64>(), tx in -3.0f64..3.0, ty in -3.0f64..3.0, r in 0.0f64..6.3) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let (x, y) = (tensor(&mut rng, 2, 9, 9), tensor(&mut rng, 2, 9, 9));
        let d = TransformParams::new(tx, ty, r);
        let mut sum = x.clone();
        sum.add_scaled(1.0, &y).unwrap();
        let mut expected = warp(&x, &d);
        expected.add_scaled(1.0, &warp(&y, &d)).unwrap();
        for (p, q) in warp(&sum, &d).data().iter().zip(expected.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn codebook_is_periodic_in_rotation(seed in any::<u64>(), tx in -1.0f64..1.0, ty in -1.0f64..1.0, r in 0.0f64..6.28, k in -3i32..4) {
        let shape = GridShape { modules: 2, module_len: 3, grid_t: 5, grid_r: 8, stride: 2 };
        let cb = Codebook::<f64>::new(shape, InitMode::Random, &mut SeededRng::seed_from_u64(seed)).unwrap();
        let a = cb.lookup(1, &TransformParams::new(tx, ty, r)).unwrap();
        let b = cb.lookup(1, &TransformParams::new(tx, ty, r + k as f64 * std::f64::consts::TAU)).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn module_reconstructions_add_up(seed in any::<u64>()) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let cfg = ModelConfig { modules: 3, module_len: 2, kernel_side: 5, stride: 2, ..ModelConfig::default() };
        let bank = KernelBank::<f64>::random(&cfg, &mut rng).unwrap();
        let img = tensor(&mut rng, 1, 15, 15);
        let full = bank.reconstruct(&img).unwrap();
        let mut sum = Tensor3::<f64>::zeros(1, 15, 15);
        for i in 0..3 {
            sum.add_scaled(1.0, &module_reconstruction(&bank, &img, &[i]).unwrap()).unwrap();
        }
        for (p, q) in sum.data().iter().zip(full.data()) {
            prop_assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn circular_variance_is_a_fraction(responses in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let n = responses.len();
        let axis = (0..n).map(|j| j as f64 * std::f64::consts::PI / n as f64).collect();
        let cv = circular_variance(&TuningCurve { axis, responses });
        prop_assert!((0.0..=1.0).contains(&cv));
    }

    #[test]
    fn image_metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let a = Tensor3::from_vec(1, 16, 16, (0..256).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
        let b = Tensor3::from_vec(1, 16, 16, (0..256).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}
