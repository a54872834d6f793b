//! Invariants checked over random inputs, plus brute-force and Monte Carlo oracles.

use dualmotion::data_io::{decode_flo, encode_flo, FlowField};
use dualmotion::discriminators::clip_weights;
use dualmotion::evaluation::metrics::{gaussian_taps, grayscale, psnr_from_mse, ssim, to_unit_range};
use dualmotion::generators::warp;
use dualmotion::losses::{epe, l1_distance};
use dualmotion::motion_encoder::{kl_divergence, sample, LatentDistribution};
use dualmotion::nn::ParamSet;
use dualmotion::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(dims: &'static [usize], bound: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = dims.iter().product();
    prop::collection::vec(-bound..bound, n).prop_map(move |d| Tensor::from_vec(dims, d).unwrap())
}

fn flow(bound: f64) -> impl Strategy<Value = FlowField> {
    tensor(&[2, 6, 7], bound).prop_map(|t| FlowField::new(t).unwrap())
}

fn lincomb(a: &Tensor, b: &Tensor, x: f64, y: f64) -> Tensor {
    a.zip_map(b, |p, q| x * p + y * q).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flo_round_trip_is_exact_for_f32_values(f in flow(50.0)) {
        let f32_field = FlowField::new(f.tensor().map(|v| v as f32 as f64)).unwrap();
        let back = decode_flo(&encode_flo(&f32_field).unwrap()).unwrap();
        prop_assert_eq!(back, f32_field);
    }

    #[test]
    fn warp_is_linear_in_the_source(
        a in tensor(&[3, 6, 7], 1.0),
        b in tensor(&[3, 6, 7], 1.0),
        f in flow(4.0),
        x in -2.0..2.0f64,
        y in -2.0..2.0f64,
    ) {
        let lhs = warp(&lincomb(&a, &b, x, y), &f).unwrap();
        let rhs = lincomb(&warp(&a, &f).unwrap(), &warp(&b, &f).unwrap(), x, y);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn warp_stays_within_the_source_range(a in tensor(&[3, 6, 7], 1.0), f in flow(10.0)) {
        let out = warp(&a, &f).unwrap();
        let lo = a.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn integer_flow_matches_brute_force_shift(a in tensor(&[1, 6, 7], 1.0), dx in -3i64..4, dy in -3i64..4) {
        let f = FlowField::constant(6, 7, dx as f64, dy as f64);
        let out = warp(&a, &f).unwrap();
        for y in 0..6i64 {
            for x in 0..7i64 {
                let sx = (x + dx).clamp(0, 6) as usize;
                let sy = (y + dy).clamp(0, 5) as usize;
                prop_assert!((out.at(0, y as usize, x as usize) - a.at(0, sy, sx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior(
        m in tensor(&[2, 2, 2], 3.0),
        l in tensor(&[2, 2, 2], 3.0),
    ) {
        let d = LatentDistribution { mean: m.clone(), log_variance: l };
        prop_assert!(kl_divergence(&d) >= 0.0);
        let prior = LatentDistribution { mean: Tensor::zeros(&[2, 2, 2]), log_variance: Tensor::zeros(&[2, 2, 2]) };
        prop_assert_eq!(kl_divergence(&prior), 0.0);
    }

    #[test]
    fn sample_is_affine_in_the_noise(
        m in tensor(&[2, 2, 2], 2.0),
        l in tensor(&[2, 2, 2], 2.0),
        e in tensor(&[2, 2, 2], 3.0),
        s in -3.0..3.0f64,
    ) {
        let d = LatentDistribution { mean: m.clone(), log_variance: l };
        let z0 = sample(&d, &Tensor::zeros(&[2, 2, 2])).unwrap().z;
        prop_assert_eq!(&z0, &m);
        let z1 = sample(&d, &e).unwrap().z;
        let zs = sample(&d, &e.map(|v| v * s)).unwrap().z;
        let expected = lincomb(&m, &z1, 1.0 - s, s);
        prop_assert!(zs.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn l1_and_epe_are_metrics(
        a in tensor(&[3, 4, 4], 1.0),
        b in tensor(&[3, 4, 4], 1.0),
        c in tensor(&[3, 4, 4], 1.0),
        f in flow(3.0),
        g in flow(3.0),
        h in flow(3.0),
    ) {
        prop_assert_eq!(l1_distance(&a, &b).unwrap(), l1_distance(&b, &a).unwrap());
        prop_assert!(l1_distance(&a, &c).unwrap() <= l1_distance(&a, &b).unwrap() + l1_distance(&b, &c).unwrap() + 1e-12);
        prop_assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        prop_assert!((epe(&f, &g).unwrap() - epe(&g, &f).unwrap()).abs() < 1e-12);
        prop_assert!(epe(&f, &h).unwrap() <= epe(&f, &g).unwrap() + epe(&g, &h).unwrap() + 1e-12);
        prop_assert_eq!(epe(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-6..1.0f64, b in 1e-6..1.0f64) {
        prop_assume!(a < b);
        prop_assert!(psnr_from_mse(a, 1.0) > psnr_from_mse(b, 1.0));
    }

    #[test]
    fn clipping_bounds_and_is_idempotent(v in prop::collection::vec(-1.0..1.0f64, 1..40), c in 1e-3..0.5f64) {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(&[v.len()], v.clone()).unwrap());
        let once = clip_weights(&p, c);
        prop_assert!(once.max_abs() <= c);
        prop_assert_eq!(clip_weights(&once, c), once.clone());
        for (x, y) in v.iter().zip(once.get(0).data()) {
            if x.abs() <= c {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn ssim_matches_a_naive_windowed_oracle(a in tensor(&[3, 13, 14], 1.0), b in tensor(&[3, 13, 14], 1.0)) {
        let (a, b) = (to_unit_range(&a), to_unit_range(&b));
        let fast = ssim(&a, &b).unwrap();
        let slow = naive_ssim(&a, &b);
        prop_assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}

/// Direct 2-D Gaussian-window SSIM with no separable filtering.
fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (_, h, w) = a.chw();
    let x = grayscale(a);
    let y = grayscale(b);
    let taps = gaussian_taps(11, 1.5);
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let wt = taps[dy] * taps[dx];
                    let p = x[(oy + dy) * w + ox + dx];
                    let q = y[(oy + dy) * w + ox + dx];
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn kl_matches_monte_carlo_on_random_small_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..5 {
        let mean = Tensor::uniform(&[1, 2, 2], 1.5, &mut rng);
        let log_var = Tensor::uniform(&[1, 2, 2], 1.0, &mut rng);
        let d = LatentDistribution {
            mean: mean.clone(),
            log_variance: log_var.clone(),
        };
        let exact = kl_divergence(&d);
        // E_q[log q(z) - log p(z)] with z drawn from q
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = Tensor::standard_normal(&[1, 2, 2], &mut rng);
            let z = sample(&d, &eps).unwrap().z;
            for i in 0..4 {
                let (m, l, zi) = (mean.data()[i], log_var.data()[i], z.data()[i]);
                let log_q = -0.5 * (l + (zi - m).powi(2) / l.exp());
                let log_p = -0.5 * zi * zi;
                acc += log_q - log_p;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - exact).abs() / exact < 0.02, "mc {mc} exact {exact}");
    }
}
