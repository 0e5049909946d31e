//! Sampling, composition, exponentiation and similarity against
//! independent oracles, plus property tests of their invariants.

mod common;

use common::*;
use latentphase::diffeo::{exp_svf, inverse_flow, pairwise_flow, smooth_random_velocity};
use latentphase::field::{
    bilinear_sample, compose_displacements, identity_grid, jacobian_determinant, warp, CoordGrid, DisplacementField,
    Image, VelocityField,
};
use latentphase::similarity::{local_ncc, local_ncc_eps, registration_pairs, video_registration_loss, LossConfig};
use latentphase::video::Video;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_image(h: usize, w: usize, seed: u64) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fy, fx, p): (f64, f64, f64) = (rng.random_range(0.03..0.06), rng.random_range(0.03..0.06), rng.random_range(0.0..6.0));
    Image::from_fn(h, w, |i, j| (fy * i as f64 + p).sin() * (fx * j as f64).cos())
}

fn max_abs_interior(a: &Image<f64>, b: &Image<f64>, margin: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in margin..a.height() - margin {
        for j in margin..a.width() - margin {
            worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
        }
    }
    worst
}

#[test]
fn bilinear_sample_matches_per_pixel_interpolation() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(6, 7, seed);
        let coords = CoordGrid::from_fn(6, 7, |_, _| (rng.random_range(-1.0..7.0), rng.random_range(-1.0..8.0)));
        let got = bilinear_sample(&img, &coords).unwrap();
        let as_field = VelocityField::from_fn(6, 7, |i, j| (img.get(i, j), 0.0));
        for i in 0..6 {
            for j in 0..7 {
                let (y, x) = coords.get(i, j);
                let want = interp(&as_field, y, x).0;
                assert!((got.get(i, j) - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }
}

#[test]
fn warp_by_composition_matches_double_warp() {
    for seed in 0..10 {
        let a = smooth_random_velocity::<f64>(40, 40, 8.0, 1.0, seed).as_displacement();
        let b = smooth_random_velocity::<f64>(40, 40, 8.0, 1.0, seed + 100).as_displacement();
        let img = smooth_image(40, 40, seed);
        let once = warp(&img, &compose_displacements(&a, &b).unwrap()).unwrap();
        let twice = warp(&warp(&img, &a).unwrap(), &b).unwrap();
        let err = max_abs_interior(&once, &twice, 4);
        assert!(err <= 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn exp_matches_runge_kutta_flow() {
    for seed in 0..10 {
        let sigma = 4.0 + seed as f64;
        let v = smooth_random_velocity::<f64>(40, 40, sigma, 2.0, seed);
        let err = max_interior_diff(&exp_svf(&v, 6).unwrap(), &rk4_flow(&v, 64), 4);
        assert!(err <= 0.05, "seed {seed}: {err}");
    }
}

#[test]
fn jacobian_of_linear_map_is_its_determinant() {
    let u = DisplacementField::from_fn(12, 12, |i, j| (0.1 * i as f64, 0.2 * j as f64));
    let jac = jacobian_determinant(&u).unwrap();
    for i in 1..11 {
        for j in 1..11 {
            assert!((jac.get(i, j) - 1.32).abs() < 1e-12);
        }
    }
}

#[test]
fn ncc_matches_brute_force_at_window_five() {
    for seed in 0..20 {
        let a = random_image(16, 16, seed);
        let b = random_image(16, 16, seed + 77);
        let got = local_ncc(&a, &b, 5).unwrap();
        let want = brute_ncc(&a, &b, 5, 1e-5);
        assert!((got - want).abs() <= 1e-6, "seed {seed}: {got} vs {want}");
    }
}

/// Every ordered pair warped and scored independently.
fn naive_loss(video: &Video<f64>, v: &[VelocityField<f64>], window: usize, max_offset: usize) -> f64 {
    let t_len = video.frames();
    let mut total = 0.0;
    for t in 0..t_len {
        for s in t + 1..t_len {
            if s - t > max_offset {
                continue;
            }
            let (ft, fs) = (video.frame(t), video.frame(s));
            let to_s = exp_svf(&v[t].sub(&v[s]).unwrap(), 6).unwrap();
            let to_t = exp_svf(&v[s].sub(&v[t]).unwrap(), 6).unwrap();
            total += brute_ncc(&warp(&ft, &to_s).unwrap(), &fs, window, 1e-5);
            total += brute_ncc(&warp(&fs, &to_t).unwrap(), &ft, window, 1e-5);
        }
    }
    -total
}

#[test]
fn registration_loss_matches_naive_pair_loop() {
    for seed in 0..3 {
        let frames = 5;
        let video = Video::new(frames, 12, 12, random_image(frames * 12, 12, seed).into_data()).unwrap();
        let v: Vec<_> = (0..frames)
            .map(|k| smooth_random_velocity::<f64>(12, 12, 2.0, 0.8, seed * 10 + k as u64))
            .collect();
        let cfg = LossConfig {
            window: 5,
            max_offset: 3,
            ..LossConfig::default()
        };
        let got = video_registration_loss(&video, &v, &cfg).unwrap();
        let want = naive_loss(&video, &v, 5, 3);
        assert!((got - want).abs() <= 1e-5, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn static_video_with_zero_velocities_scores_two_per_pair() {
    let frame = random_image(12, 12, 3);
    let video = Video::from_frames(&[frame.clone(), frame.clone(), frame]).unwrap();
    let zeros = vec![VelocityField::zeros(12, 12); 3];
    let loss = video_registration_loss(&video, &zeros, &LossConfig::default()).unwrap();
    assert!((loss + 6.0).abs() < 1e-3, "{loss}");
}

fn field_strategy(side: usize, max_mag: f64) -> impl Strategy<Value = VelocityField<f64>> {
    (any::<u64>(), 2.0..6.0f64, 0.0..max_mag)
        .prop_map(move |(seed, sigma, mag)| smooth_random_velocity::<f64>(side, side, sigma, mag, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn compose_with_zero_is_identity(v in field_strategy(16, 3.0)) {
        let d = v.as_displacement();
        let zero = DisplacementField::zeros(16, 16);
        prop_assert_eq!(&compose_displacements(&zero, &d).unwrap(), &d);
        prop_assert_eq!(&compose_displacements(&d, &zero).unwrap(), &d);
    }

    #[test]
    fn zero_displacement_warp_is_identity(seed in any::<u64>()) {
        let img = random_image(9, 11, seed);
        prop_assert_eq!(warp(&img, &DisplacementField::zeros(9, 11)).unwrap(), img);
    }

    #[test]
    fn identity_coordinates_reproduce_the_image(seed in any::<u64>()) {
        let img = random_image(7, 5, seed);
        prop_assert_eq!(bilinear_sample(&img, &identity_grid(7, 5)).unwrap(), img);
    }

    #[test]
    fn flow_and_inverse_cancel(v in field_strategy(32, 2.0)) {
        let back = compose_displacements(&exp_svf(&v, 6).unwrap(), &inverse_flow(&v, 6).unwrap()).unwrap();
        prop_assert!(max_interior_diff(&back, &DisplacementField::zeros(32, 32), 4) <= 0.1);
    }

    #[test]
    fn exponentiated_fields_have_positive_jacobian(v in field_strategy(24, 2.0)) {
        let jac = jacobian_determinant(&exp_svf(&v, 6).unwrap()).unwrap();
        prop_assert!(jac.data().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn pairwise_flow_of_equal_fields_is_zero(v in field_strategy(16, 4.0)) {
        prop_assert_eq!(pairwise_flow(&v, &v, 6).unwrap(), DisplacementField::zeros(16, 16));
    }

    #[test]
    fn ncc_is_symmetric_and_bounded(seed in any::<u64>(), window in prop::sample::select(vec![3usize, 5, 7, 9])) {
        let a = random_image(12, 12, seed);
        let b = random_image(12, 12, seed ^ 0x5555);
        let ab = local_ncc(&a, &b, window).unwrap();
        let ba = local_ncc(&b, &a, window).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn ncc_is_invariant_to_positive_affine_maps(seed in any::<u64>(), scale in 0.2..5.0f64, shift in -2.0..2.0f64) {
        let a = random_image(12, 12, seed);
        let b = Image::new(12, 12, a.data().iter().map(|x| scale * x + shift).collect()).unwrap();
        prop_assert!(local_ncc_eps(&a, &b, 7, 1e-9).unwrap() >= 0.999);
    }

    #[test]
    fn pair_enumeration_matches_counting(frames in 1usize..40, max_offset in 1usize..8) {
        let pairs = registration_pairs(frames, max_offset);
        let expected: usize = (1..=max_offset.min(frames.saturating_sub(1))).map(|f| frames - f).sum();
        prop_assert_eq!(pairs.len(), expected);
        let mut sorted = pairs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), pairs.len());
        prop_assert!(pairs.iter().all(|&(t, s)| t < s && s < frames && s - t <= max_offset));
    }
}
