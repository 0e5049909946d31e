//! Turning points, direction selection, calibration votes and metric
//! arithmetic against direct oracles.

mod common;

use common::*;
use latentphase::eval::{
    compute_metrics, cycle_length, group_report, match_events, orientation_spread, EventError, Phase,
};
use latentphase::phase::{
    auto_min_distance, calibrate_from_curves, detect_turning_points, dominant_period, moving_average,
    select_direction, DetectOptions, Polarity,
};
use latentphase::synth::GroundTruth;
use proptest::prelude::*;

fn sine(n: usize, period: f64, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|t| (std::f64::consts::TAU * t as f64 / period + phase).sin())
        .collect()
}

fn event(video: &str, phase: Phase, orientation: u32, gt: usize, pred: Option<usize>, fps: f64, cycle: f64) -> EventError {
    EventError {
        video_id: video.into(),
        phase,
        orientation,
        gt_frame: gt,
        pred_frame: pred,
        fps,
        cycle_frames: cycle,
    }
}

#[test]
fn noisy_sinusoids_match_exhaustive_scan() {
    for seed in 0..100 {
        let period = 10.0 + (seed % 17) as f64;
        let curve = noisy_sinusoid(80, period, 0.1, seed);
        let distance = (period / 2.0).round() as usize;
        let tp = detect_turning_points(&curve, distance, 0.2);
        assert_eq!(tp.peaks, oracle_peaks(&curve, distance, 0.2), "seed {seed}");
        assert_eq!(tp.valleys, oracle_valleys(&curve, distance, 0.2), "seed {seed}");
    }
}

#[test]
fn sinusoid_period_is_recovered() {
    for period in [8.0, 12.8, 15.0, 20.0, 27.5] {
        let got = dominant_period(&sine(96, period, 0.3)).unwrap();
        assert!((got - period).abs() <= 1.0, "{period}: {got}");
    }
    assert_eq!(auto_min_distance(&sine(100, 20.0, 0.0)), 10);
}

fn truth(ed: Vec<usize>, es: Vec<usize>) -> GroundTruth {
    GroundTruth {
        ed_frames: ed,
        es_frames: es,
        period_frames: 20.0,
        orientation: 0,
    }
}

#[test]
fn calibration_follows_the_majority_of_votes() {
    // valleys of -cos(2πt/20) sit at 0, 20, 40; peaks at 10, 30, 50
    let curve: Vec<f64> = sine(60, 20.0, std::f64::consts::FRAC_PI_2).iter().map(|v| -v).collect();
    let valley_truth = truth(vec![20, 40], vec![10, 30, 50]);
    let peak_truth = truth(vec![10, 30], vec![20, 40]);
    let opts = DetectOptions::default();
    let cal = calibrate_from_curves(
        &[curve.clone(), curve.clone(), curve.clone()],
        &[&valley_truth, &valley_truth, &peak_truth],
        "m".into(),
        &opts,
    )
    .unwrap();
    assert_eq!(cal.ed_polarity, Polarity::Valley);
    assert_eq!((cal.votes_peak, cal.votes_valley), (1, 2));
    assert!(calibrate_from_curves(&[curve.clone(), curve], &[&valley_truth, &peak_truth], "m".into(), &opts).is_err());
}

#[test]
fn group_report_cardinality_and_single_bin() {
    let mut errors = Vec::new();
    for o in 0..8u32 {
        for (k, phase) in [Phase::ED, Phase::ES].into_iter().enumerate() {
            errors.push(event("v", phase, o * 45, 10, Some(10 + k + o as usize % 3), 50.0, 20.0));
        }
    }
    let rows = group_report(&errors);
    assert_eq!(rows.len(), 18);
    assert_eq!(orientation_spread(&rows, Phase::ED), Some(2.0));

    let one_bin: Vec<_> = errors.iter().filter(|e| e.orientation == 90).cloned().collect();
    let rows = group_report(&one_bin);
    assert_eq!(rows.len(), 4);
    for phase in [Phase::ED, Phase::ES] {
        let per_phase: Vec<_> = rows.iter().filter(|r| r.phase == phase).collect();
        assert_eq!(per_phase[0].metrics, per_phase[1].metrics);
    }
}

#[test]
fn cycle_length_examples() {
    assert_eq!(cycle_length(&[0, 20, 40], None).unwrap(), 20.0);
    assert_eq!(cycle_length(&[0, 19, 40, 60], None).unwrap(), 20.0);
    let curve = sine(80, 20.0, 0.0);
    assert!((cycle_length(&[5], Some(&curve)).unwrap() - 20.0).abs() <= 1.0);
    assert!(cycle_length(&[5], None).is_err());
}

fn quantized_curve() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..6, 3..60).prop_map(|v| v.into_iter().map(f64::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn turning_points_match_oracle_with_plateaus(
        curve in quantized_curve(),
        distance in 1usize..8,
        prominence in 0.0..3.0f64,
    ) {
        let tp = detect_turning_points(&curve, distance, prominence);
        prop_assert_eq!(tp.peaks, oracle_peaks(&curve, distance, prominence));
        prop_assert_eq!(tp.valleys, oracle_valleys(&curve, distance, prominence));
    }

    #[test]
    fn turning_points_match_oracle_on_noisy_sinusoids(
        seed in any::<u64>(),
        period in 8.0..30.0f64,
        noise in 0.0..0.3f64,
    ) {
        let curve = noisy_sinusoid(90, period, noise, seed);
        let distance = (period / 2.0).round() as usize;
        let prominence = 0.5 * noise + 0.05;
        let tp = detect_turning_points(&curve, distance, prominence);
        prop_assert_eq!(tp.peaks, oracle_peaks(&curve, distance, prominence));
        prop_assert_eq!(tp.valleys, oracle_valleys(&curve, distance, prominence));
    }

    #[test]
    fn direction_has_the_largest_variance(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 2..30)) {
        let (curve, k) = select_direction(&rows);
        let var = |c: usize| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64
        };
        let expect = if var(1) > var(0) + 1e-9 { 1 } else { 0 };
        prop_assert_eq!(k, expect);
        prop_assert_eq!(curve, rows.iter().map(|r| r[k]).collect::<Vec<_>>());
    }

    #[test]
    fn moving_average_matches_window_mean(x in prop::collection::vec(-10.0..10.0f64, 1..40), half in 0usize..4) {
        let got = moving_average(&x, 2 * half + 1);
        for (i, g) in got.iter().enumerate() {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(x.len() - 1);
            let want = x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            prop_assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn every_event_matches_its_nearest_prediction(
        gt in prop::collection::vec(0usize..200, 0..10),
        pred in prop::collection::vec(0usize..200, 0..10),
    ) {
        let matched = match_events(&gt, &pred);
        prop_assert_eq!(matched.len(), gt.len());
        for (g, p) in matched {
            match p {
                None => prop_assert!(pred.is_empty()),
                Some(p) => {
                    let best = pred.iter().map(|&q| q.abs_diff(g)).min().unwrap();
                    prop_assert_eq!(p.abs_diff(g), best);
                }
            }
        }
    }

    #[test]
    fn metric_units_are_consistent(
        errs in prop::collection::vec((0usize..100, 0usize..100), 1..20),
        fps in 10.0..200.0f64,
        cycle in 5.0..60.0f64,
    ) {
        let events: Vec<_> = errs.iter().map(|&(g, p)| event("v", Phase::ED, 0, g, Some(p), fps, cycle)).collect();
        for e in &events {
            let frames = e.error_frames().unwrap();
            prop_assert_eq!(e.error_ms().unwrap(), frames * 1000.0 / fps);
            prop_assert_eq!(e.error_pct_cycle().unwrap(), 100.0 * frames / cycle);
        }
        let m = compute_metrics(&events).unwrap();
        let frames: Vec<f64> = errs.iter().map(|&(g, p)| g.abs_diff(p) as f64).collect();
        let mean = frames.iter().sum::<f64>() / frames.len() as f64;
        let std = (frames.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / frames.len() as f64).sqrt();
        prop_assert!((m.mae_frames.mean - mean).abs() < 1e-9);
        prop_assert!((m.mae_frames.std - std).abs() < 1e-9);
        let success = frames.iter().filter(|&&f| 100.0 * f / cycle < 50.0).count() as f64 / frames.len() as f64;
        prop_assert!((m.success_rate - success).abs() < 1e-12);
    }
}
