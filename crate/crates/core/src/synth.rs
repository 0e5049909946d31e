//! Analytic beating-heart phantom with known end-diastole / end-systole
//! frames.
//!
//! The scene is a textured annulus with two internal septa on a textured
//! background. At cycle phase `θ` everything inside the heart is scaled
//! radially by `1 − a·s(θ)`, where `s` is a raised-cosine bump that rises
//! over `[0, systole_fraction]` and falls back over the rest of the cycle.
//! Frames are rendered at `orientation mod 90`, speckled, then rotated by
//! whole quarter turns, so quarter-turn orientations are exact grid
//! rotations of each other.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::video::{rotate_plane_cw, Video};

const OUTER_RADIUS: f64 = 0.55;
const INNER_RADIUS: f64 = 0.40;
/// Radius at which the contraction has faded into the static background.
const FADE_RADIUS: f64 = 0.85;
const EDGE: f64 = 0.03;
const TEXTURE_WAVES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub fps: f64,
    /// Beats per minute.
    pub heart_rate: f64,
    pub systole_fraction: f64,
    /// Fractional radius change at end-systole.
    pub contraction_amplitude: f64,
    /// Clockwise degrees, a multiple of 45.
    pub orientation: u32,
    /// Variance of the multiplicative speckle.
    pub noise: f64,
    pub texture_seed: u64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Cycle phase of frame 0, in `[0, 1)`.
    #[serde(default)]
    pub phase_offset: f64,
    pub num_frames: usize,
    pub frame_size: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            fps: 40.0,
            heart_rate: 120.0,
            systole_fraction: 0.4,
            contraction_amplitude: 0.18,
            orientation: 0,
            noise: 0.02,
            texture_seed: 0,
            noise_seed: 0,
            phase_offset: 0.0,
            num_frames: 96,
            frame_size: 80,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.heart_rate > 0.0 && self.heart_rate.is_finite()) {
            return bad(format!("heart_rate must be positive, got {}", self.heart_rate));
        }
        if !(self.systole_fraction > 0.0 && self.systole_fraction < 1.0) {
            return bad(format!("systole_fraction must be in (0, 1), got {}", self.systole_fraction));
        }
        if !(self.contraction_amplitude >= 0.0 && self.contraction_amplitude < 0.5) {
            return bad(format!(
                "contraction_amplitude must be in [0, 0.5), got {}",
                self.contraction_amplitude
            ));
        }
        if self.orientation % 45 != 0 || self.orientation >= 360 {
            return bad(format!("orientation must be one of 0, 45, ..., 315, got {}", self.orientation));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.phase_offset) {
            return bad(format!("phase_offset must be in [0, 1), got {}", self.phase_offset));
        }
        if self.num_frames == 0 || self.frame_size < 8 {
            return bad("need at least one frame of side >= 8".into());
        }
        Ok(())
    }

    /// Beat period in frames.
    pub fn period_frames(&self) -> f64 {
        60.0 * self.fps / self.heart_rate
    }

    /// Index of the orientation among the eight 45° bins.
    pub fn orientation_bin(&self) -> usize {
        (self.orientation / 45) as usize
    }
}

/// Annotated event frames of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub ed_frames: Vec<usize>,
    pub es_frames: Vec<usize>,
    pub period_frames: f64,
    pub orientation: u32,
}

impl GroundTruth {
    /// Events nearest to the exact phase crossings, within `0..num_frames`.
    pub fn from_params(p: &SynthParams) -> Self {
        let period = p.period_frames();
        let events = |phase: f64| {
            // frame times t with frac(t / period + offset) = phase
            let first = ((phase - p.phase_offset).rem_euclid(1.0)) * period;
            let mut out = Vec::new();
            let mut t = first;
            while t.round() < p.num_frames as f64 {
                out.push(t.round() as usize);
                t += period;
            }
            // a crossing just before frame 0 can round onto it
            let before = first - period;
            if before.round() == 0.0 && out.first() != Some(&0) {
                out.insert(0, 0);
            }
            out
        };
        Self {
            ed_frames: events(0.0),
            es_frames: events(p.systole_fraction),
            period_frames: period,
            orientation: p.orientation,
        }
    }

    /// Drops events on the first and last frame, where a turning point is
    /// not observable.
    pub fn interior(&self, num_frames: usize) -> Self {
        let keep = |v: &[usize]| v.iter().copied().filter(|&f| f >= 1 && f + 2 <= num_frames).collect();
        Self {
            ed_frames: keep(&self.ed_frames),
            es_frames: keep(&self.es_frames),
            ..self.clone()
        }
    }

    /// ED and ES strictly alternate in time.
    pub fn alternates(&self) -> bool {
        let mut all: Vec<(usize, bool)> = self
            .ed_frames
            .iter()
            .map(|&f| (f, true))
            .chain(self.es_frames.iter().map(|&f| (f, false)))
            .collect();
        all.sort();
        all.windows(2).all(|w| w[0].1 != w[1].1 && w[0].0 < w[1].0)
    }
}

/// Cycle phase of every frame, in `[0, 1)`.
pub fn phase_curve(p: &SynthParams) -> Vec<f64> {
    (0..p.num_frames)
        .map(|t| (t as f64 * p.heart_rate / (60.0 * p.fps) + p.phase_offset).rem_euclid(1.0))
        .collect()
}

/// Contraction bump: 0 at ED (θ = 0), 1 at ES (θ = systole_fraction).
pub fn contraction(theta: f64, systole_fraction: f64) -> f64 {
    let theta = theta.rem_euclid(1.0);
    if theta <= systole_fraction {
        0.5 * (1.0 - (PI * theta / systole_fraction).cos())
    } else {
        0.5 * (1.0 + (PI * (theta - systole_fraction) / (1.0 - systole_fraction)).cos())
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Weight of the contraction at material radius `rho`.
fn motion_weight(rho: f64) -> f64 {
    1.0 - smoothstep(OUTER_RADIUS, FADE_RADIUS, rho)
}

fn motion_weight_slope(rho: f64) -> f64 {
    let t = (rho - OUTER_RADIUS) / (FADE_RADIUS - OUTER_RADIUS);
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        -6.0 * t * (1.0 - t) / (FADE_RADIUS - OUTER_RADIUS)
    }
}

/// Material radius whose contracted image lies at radius `r`.
fn material_radius(r: f64, amount: f64) -> f64 {
    // rho (1 - amount w(rho)) is increasing in rho and bracketed below
    let (lo, hi) = (r, r / (1.0 - amount));
    let mut rho = r / (1.0 - amount * motion_weight(r));
    for _ in 0..20 {
        let f = rho * (1.0 - amount * motion_weight(rho)) - r;
        let df = 1.0 - amount * motion_weight(rho) - amount * rho * motion_weight_slope(rho);
        let next = (rho - f / df).clamp(lo, hi);
        if (next - rho).abs() < 1e-13 {
            return next;
        }
        rho = next;
    }
    rho
}

struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..TEXTURE_WAVES)
            .map(|_| {
                let k = rng.random_range(8.0..40.0);
                let dir = rng.random_range(0.0..2.0 * PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.5..1.0);
                (k * dir.cos(), k * dir.sin(), phase, amp)
            })
            .collect();
        Self { waves }
    }

    /// Roughly zero-mean value in `[-1, 1]`.
    fn at(&self, y: f64, x: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves
            .iter()
            .map(|&(ky, kx, ph, a)| a * (ky * y + kx * x + ph).cos())
            .sum::<f64>()
            / total
            * 2.0
    }
}

/// Noise-free intensity at material position `(y, x)` (heart-centred,
/// unit = half the frame side).
fn scene(tex: &Texture, y: f64, x: f64) -> f64 {
    let rho = (y * y + x * x).sqrt();
    let t = tex.at(y, x);
    let background = 0.25 + 0.08 * t;
    let muscle = 0.75 + 0.12 * t;
    let cavity = 0.06 + 0.03 * t;
    let inside_outer = 1.0 - smoothstep(OUTER_RADIUS - EDGE, OUTER_RADIUS + EDGE, rho);
    let inside_inner = 1.0 - smoothstep(INNER_RADIUS - EDGE, INNER_RADIUS + EDGE, rho);
    // off-centre septa split the cavity into four unequal chambers
    let septum_v = 1.0 - smoothstep(0.035, 0.035 + EDGE, (x - 0.06).abs());
    let septum_h = 1.0 - smoothstep(0.03, 0.03 + EDGE, (y + 0.1).abs());
    let septum = septum_v.max(septum_h * smoothstep(-0.5, -0.3, x));
    let cavity_mix = cavity + (muscle - cavity) * septum;
    let heart = muscle + (cavity_mix - muscle) * inside_inner;
    background + (heart - background) * inside_outer
}

/// Renders one noise-free frame at contraction `amount`, rotated clockwise
/// by `angle_deg`. Also returns the heart mask (material radius within the
/// outer wall).
fn render(tex: &Texture, n: usize, amount: f64, angle_deg: f64) -> (Vec<f64>, Vec<bool>) {
    let c = (n as f64 - 1.0) / 2.0;
    let half = n as f64 / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut img = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (y, x) = ((i as f64 - c) / half, (j as f64 - c) / half);
            let (sy, sx) = (y * cos - x * sin, x * cos + y * sin);
            let r = (sy * sy + sx * sx).sqrt();
            let rho = material_radius(r, amount);
            let k = if r > 0.0 { rho / r } else { 1.0 };
            img.push(scene(tex, sy * k, sx * k));
            mask.push(rho <= OUTER_RADIUS);
        }
    }
    (img, mask)
}

/// A rendered video with its per-frame heart masks.
#[derive(Clone, Debug)]
pub struct SynthVideo<T> {
    pub video: Video<T>,
    pub truth: GroundTruth,
    /// Per-frame heart masks, row-major.
    pub masks: Vec<Vec<bool>>,
}

pub fn generate_video<T: Scalar>(p: &SynthParams) -> Result<(Video<T>, GroundTruth)> {
    let out = generate_video_with_masks(p)?;
    Ok((out.video, out.truth))
}

pub fn generate_video_with_masks<T: Scalar>(p: &SynthParams) -> Result<SynthVideo<T>> {
    p.validate()?;
    let n = p.frame_size;
    let tex = Texture::new(p.texture_seed);
    let quarter = (p.orientation / 90) as usize;
    let base_angle = (p.orientation % 90) as f64;
    let speckle = Normal::new(0.0, p.noise.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
    let mut data = Vec::with_capacity(p.num_frames * n * n);
    let mut masks = Vec::with_capacity(p.num_frames);
    for theta in phase_curve(p) {
        let amount = p.contraction_amplitude * contraction(theta, p.systole_fraction);
        let (img, mask) = render(&tex, n, amount, base_angle);
        let noisy: Vec<T> = img
            .iter()
            .map(|&v| {
                let m = if p.noise > 0.0 { 1.0 + speckle.sample(&mut noise_rng) } else { 1.0 };
                T::lit((v * m).clamp(0.0, 1.0))
            })
            .collect();
        data.extend(rotate_plane_cw(&noisy, n, quarter));
        masks.push(rotate_plane_cw(&mask, n, quarter));
    }
    Ok(SynthVideo {
        video: Video::new(p.num_frames, n, n, data)?,
        truth: GroundTruth::from_params(p),
        masks,
    })
}

/// Parameter ranges for [`generate_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRanges {
    pub fps: (f64, f64),
    pub heart_rate: (f64, f64),
    pub systole_fraction: f64,
    pub contraction_amplitude: f64,
    pub noise: f64,
    pub num_frames: usize,
    pub frame_size: usize,
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self {
            fps: (30.0, 80.0),
            heart_rate: (110.0, 160.0),
            systole_fraction: 0.4,
            contraction_amplitude: 0.18,
            noise: 0.02,
            num_frames: 96,
            frame_size: 80,
        }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !range_ok(self.fps) || !range_ok(self.heart_rate) {
            return Err(Error::Config("fps and heart_rate ranges must be positive and ordered".into()));
        }
        self.draw(0, 0, &mut ChaCha8Rng::seed_from_u64(0)).validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn draw(&self, index: usize, seed: u64, rng: &mut ChaCha8Rng) -> SynthParams {
        let uniform = |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        SynthParams {
            fps: uniform(self.fps, rng),
            heart_rate: uniform(self.heart_rate, rng),
            systole_fraction: self.systole_fraction,
            contraction_amplitude: self.contraction_amplitude,
            orientation: 45 * (index % 8) as u32,
            noise: self.noise,
            texture_seed: rng.random(),
            noise_seed: seed.wrapping_add(index as u64),
            phase_offset: rng.random_range(0.0..1.0),
            num_frames: self.num_frames,
            frame_size: self.frame_size,
        }
    }
}

/// Parameter draws for `n` videos; video `i` falls in orientation bin
/// `i mod 8`.
pub fn dataset_params(n: usize, ranges: &SynthRanges, seed: u64) -> Result<Vec<SynthParams>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one video".into()));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| ranges.draw(i, seed, &mut rng)).collect())
}

/// One generated dataset entry.
#[derive(Clone, Debug)]
pub struct SynthEntry<T> {
    pub id: String,
    pub params: SynthParams,
    pub video: Video<T>,
    /// Events strictly inside the video.
    pub truth: GroundTruth,
}

/// Generates `n` videos in memory, in parallel.
pub fn generate_dataset<T: Scalar>(n: usize, ranges: &SynthRanges, seed: u64) -> Result<Vec<SynthEntry<T>>> {
    use rayon::prelude::*;
    let params = dataset_params(n, ranges, seed)?;
    params
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (video, truth) = generate_video(&p)?;
            Ok(SynthEntry {
                id: format!("video_{i:04}"),
                truth: truth.interior(p.num_frames),
                params: p,
                video,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_arithmetic() {
        let p = SynthParams {
            num_frames: 60,
            ..SynthParams::default()
        };
        let gt = GroundTruth::from_params(&p);
        assert_eq!(gt.ed_frames, vec![0, 20, 40]);
        assert_eq!(gt.es_frames, vec![8, 28, 48]);
        assert_eq!(gt.period_frames, 20.0);
        assert!(gt.alternates());

        let p = SynthParams {
            fps: 30.0,
            heart_rate: 140.0,
            num_frames: 60,
            ..SynthParams::default()
        };
        let gt = GroundTruth::from_params(&p);
        let expect: Vec<usize> = (0..5).map(|k| (k as f64 * 60.0 * 30.0 / 140.0).round() as usize).collect();
        assert_eq!(gt.ed_frames, expect);
    }

    #[test]
    fn contraction_bump_shape() {
        assert_eq!(contraction(0.0, 0.4), 0.0);
        assert!((contraction(0.4, 0.4) - 1.0).abs() < 1e-12);
        assert!((contraction(0.2, 0.4) - 0.5).abs() < 1e-12);
        assert!(contraction(0.99, 0.4) < 0.01);
    }

    #[test]
    fn material_radius_inverts_contraction() {
        for &r in &[0.0, 0.1, 0.45, 0.6, 0.8, 1.2] {
            let rho = material_radius(r, 0.18);
            let back = rho * (1.0 - 0.18 * motion_weight(rho));
            assert!((back - r).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_amplitude_is_static() {
        let p = SynthParams {
            contraction_amplitude: 0.0,
            noise: 0.0,
            num_frames: 4,
            frame_size: 24,
            ..SynthParams::default()
        };
        let (v, _) = generate_video::<f64>(&p).unwrap();
        for t in 1..4 {
            assert_eq!(v.frame_slice(t), v.frame_slice(0));
        }
    }

    #[test]
    fn quarter_turn_orientations_are_grid_rotations() {
        let base = SynthParams {
            num_frames: 3,
            frame_size: 24,
            texture_seed: 4,
            noise_seed: 9,
            ..SynthParams::default()
        };
        for (deg, k) in [(90, 1), (180, 2), (270, 3)] {
            let (v0, _) = generate_video::<f64>(&base).unwrap();
            let rotated = SynthParams {
                orientation: deg,
                ..base.clone()
            };
            let (vk, _) = generate_video::<f64>(&rotated).unwrap();
            assert_eq!(vk, v0.rotated_cw(k).unwrap());
        }
    }

    #[test]
    fn dataset_covers_bins_and_is_deterministic() {
        let ranges = SynthRanges {
            num_frames: 4,
            frame_size: 16,
            ..SynthRanges::default()
        };
        let a = generate_dataset::<f32>(8, &ranges, 3).unwrap();
        let b = generate_dataset::<f32>(8, &ranges, 3).unwrap();
        let bins: Vec<u32> = a.iter().map(|e| e.params.orientation).collect();
        assert_eq!(bins, vec![0, 45, 90, 135, 180, 225, 270, 315]);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.video, y.video);
            assert_eq!(x.params, y.params);
        }
        assert!(generate_dataset::<f32>(0, &ranges, 3).is_err());
    }
}
