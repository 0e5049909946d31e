//! Clip sampling, training contracts and loss behaviour on small models.

mod common;

use common::random_image;
use latentphase::model::ModelConfig;
use latentphase::similarity::{registration_pairs, LossConfig};
use latentphase::synth::{generate_dataset, SynthRanges};
use latentphase::trainer::{sample_clip, split_indices, train, TrainConfig};
use latentphase::video::Video;
use latentphase::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        latent_dim: 32,
        motion_dim: 1,
        encoder_channels: vec![4, 8],
        decoder_channels: vec![8, 4],
        decoder_base: 4,
        velocity_cap: 4.0,
        seed: 5,
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        clip_length: 8,
        batch_size: 4,
        epochs: 2,
        learning_rate: 1e-3,
        loss: LossConfig {
            window: 5,
            max_offset: 3,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn synthetic(n: usize, seed: u64) -> Vec<Video<f64>> {
    let ranges = SynthRanges {
        num_frames: 12,
        frame_size: 20,
        ..SynthRanges::default()
    };
    generate_dataset::<f64>(n, &ranges, seed)
        .unwrap()
        .into_iter()
        .map(|e| e.video)
        .collect()
}

/// Pixel `(t, i, j)` holds `t·10⁴ + i·10² + j` so any clip reveals its origin.
fn coded_video(frames: usize, side: usize) -> Video<f64> {
    let data = (0..frames * side * side)
        .map(|k| {
            let (t, r) = (k / (side * side), k % (side * side));
            (t * 10_000 + (r / side) * 100 + r % side) as f64
        })
        .collect();
    Video::new(frames, side, side, data).unwrap()
}

#[test]
fn clips_are_contiguous_in_bounds_windows() {
    let video = coded_video(40, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut starts, mut tops) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let clip = sample_clip(&video, 25, 16, &mut rng).unwrap();
        assert_eq!((clip.frames(), clip.height(), clip.width()), (25, 16, 16));
        let origin = clip.data()[0] as usize;
        let (start, top, left) = (origin / 10_000, origin / 100 % 100, origin % 100);
        assert!(start + 25 <= 40 && top + 16 <= 30 && left + 16 <= 30);
        for t in 0..25 {
            for i in 0..16 {
                for j in 0..16 {
                    let want = ((start + t) * 10_000 + (top + i) * 100 + left + j) as f64;
                    assert_eq!(clip.data()[(t * 16 + i) * 16 + j], want);
                }
            }
        }
        starts.push(start);
        tops.push(top);
    }
    assert_eq!(starts.iter().min(), Some(&0));
    assert_eq!(starts.iter().max(), Some(&15));
    assert_eq!(tops.iter().max(), Some(&14));
}

#[test]
fn exact_length_video_has_one_temporal_window() {
    let video = coded_video(25, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let clip = sample_clip(&video, 25, 16, &mut rng).unwrap();
        assert_eq!(clip.data()[0] as usize / 10_000, 0);
    }
    assert!(matches!(
        sample_clip(&coded_video(24, 20), 25, 16, &mut rng),
        Err(Error::VideoTooShort { frames: 24, needed: 25 })
    ));
}

#[test]
fn fixed_seed_selects_identical_clips() {
    let video = coded_video(40, 30);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| sample_clip(&video, 10, 16, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn static_scene_sits_at_the_analytic_optimum() {
    let frame = random_image(20, 20, 1);
    let video = Video::from_frames(&vec![frame; 12]).unwrap();
    let cfg = tiny_train();
    let out = train(&[video.clone()], &[video], &tiny_model(), &cfg, None, |_| {}).unwrap();
    let optimum = -2.0 * registration_pairs(cfg.clip_length, cfg.loss.max_offset).len() as f64;
    for r in &out.curves {
        assert!((r.val_loss - optimum).abs() < 1e-3, "epoch {}: {}", r.epoch, r.val_loss);
    }
}

#[test]
fn single_threaded_runs_are_bit_identical() {
    let videos = synthetic(3, 2);
    let cfg = TrainConfig {
        strict_deterministic: true,
        ..tiny_train()
    };
    let run = || train(&videos[..2], &videos[2..], &tiny_model(), &cfg, None, |_| {}).unwrap();
    let (a, b) = (run(), run());
    let bits = |o: &latentphase::trainer::TrainOutcome<f64>| {
        o.curves
            .iter()
            .map(|r| (r.train_loss.map(f64::to_bits), r.val_loss.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
}

#[test]
fn resume_continues_the_step_counter() {
    let videos = synthetic(3, 4);
    let cfg = tiny_train();
    let first = train(&videos[..2], &videos[2..], &tiny_model(), &cfg, None, |_| {}).unwrap();
    let steps = first.last.step;
    assert_eq!(steps, 2 * (2 * 4usize).div_ceil(cfg.batch_size) as u64);
    let second = train(&videos[..2], &videos[2..], &tiny_model(), &cfg, Some(first.last), |_| {}).unwrap();
    assert_eq!(second.last.step, 2 * steps);
    let epochs: Vec<usize> = second.curves.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![2, 3, 4]);
}

#[test]
fn short_videos_are_skipped_and_empty_sets_rejected() {
    let mut videos = synthetic(3, 6);
    let short = Video::new(4, 20, 20, vec![0.5; 4 * 400]).unwrap();
    videos.insert(1, short.clone());
    let out = train(&videos[..3], &videos[3..], &tiny_model(), &tiny_train(), None, |_| {}).unwrap();
    assert_eq!(out.skipped, vec![1]);
    assert!(matches!(
        train(&[short.clone()], &[short], &tiny_model(), &tiny_train(), None, |_| {}),
        Err(Error::Data(_))
    ));
}

#[test]
fn exploding_gradients_abort_with_a_diagnostic() {
    let videos = synthetic(2, 8);
    let cfg = TrainConfig {
        grad_norm_limit: 1e-12,
        ..tiny_train()
    };
    match train(&videos[..1], &videos[1..], &tiny_model(), &cfg, None, |_| {}) {
        Err(Error::Divergence { epoch: 1, step: 1, reason }) => assert!(reason.contains("gradient norm")),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.curves)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_the_index_set(n in 2usize..200, frac in 0.05..0.95f64, seed in any::<u64>()) {
        let (tr, va) = split_indices(n, frac, seed);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!tr.is_empty() && !va.is_empty());
        prop_assert_eq!(split_indices(n, frac, seed), (tr, va));
    }
}
