//! Latent trajectories, turning-point detection and the global ED/ES
//! polarity calibration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synth::GroundTruth;
use crate::video::Video;

/// Curves shorter than this are not smoothed.
pub const MIN_SMOOTHING_LENGTH: usize = 12;

/// Variance differences below this count as ties in direction selection.
pub const DIRECTION_TIE: f64 = 1e-9;

/// 1D latent signal of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `T` rows of `M` motion coordinates.
    pub alpha: Vec<Vec<f64>>,
    /// The analyzed signal, after smoothing.
    pub curve: Vec<f64>,
    /// Basis direction the curve was taken from.
    pub direction: usize,
    /// Effective moving-average width (1 = none).
    pub smoothing_width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Peak,
    Valley,
}

impl Polarity {
    pub fn opposite(self) -> Self {
        match self {
            Polarity::Peak => Polarity::Valley,
            Polarity::Valley => Polarity::Peak,
        }
    }
}

/// Which turning-point polarity marks end-diastole for one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseCalibration {
    pub ed_polarity: Polarity,
    pub model_id: String,
    pub votes_peak: usize,
    pub votes_valley: usize,
}

impl PhaseCalibration {
    pub fn es_polarity(&self) -> Polarity {
        self.ed_polarity.opposite()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Calibration(format!("{}: {e}", path.display())))
    }
}

/// Options shared by calibration and detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectOptions {
    pub smoothing_width: usize,
    /// Minimum prominence as a multiple of the curve's standard deviation.
    pub prominence_factor: f64,
    /// Fixed minimum peak distance; `None` estimates it per curve.
    pub min_distance: Option<usize>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            smoothing_width: 3,
            prominence_factor: 0.25,
            min_distance: None,
        }
    }
}

impl DetectOptions {
    pub fn validate(&self) -> Result<()> {
        if self.smoothing_width == 0 || self.smoothing_width % 2 == 0 {
            return Err(Error::Config(format!(
                "smoothing_width must be odd, got {}",
                self.smoothing_width
            )));
        }
        if !(self.prominence_factor >= 0.0 && self.prominence_factor.is_finite()) {
            return Err(Error::Config("prominence_factor must be non-negative".into()));
        }
        if self.min_distance == Some(0) {
            return Err(Error::Config("min_distance must be at least 1".into()));
        }
        Ok(())
    }
}

/// Column with the largest temporal variance; ties go to the lower index.
pub fn select_direction(alpha: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let m = alpha.first().map_or(0, |r| r.len());
    let mut best = 0;
    let mut best_var = f64::NEG_INFINITY;
    for k in 0..m {
        let col: Vec<f64> = alpha.iter().map(|r| r[k]).collect();
        let var = variance(&col);
        if var > best_var + DIRECTION_TIE {
            best = k;
            best_var = var;
        }
    }
    (alpha.iter().map(|r| r.get(best).copied().unwrap_or(0.0)).collect(), best)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

fn variance(x: &[f64]) -> f64 {
    let mu = mean(x);
    x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len().max(1) as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

/// Centred moving average whose window shrinks at the ends.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            mean(&x[lo..hi])
        })
        .collect()
}

/// Motion coordinates of every frame, reduced to one smoothed curve.
pub fn extract_trajectory<T: Scalar>(model: &Model<T>, video: &Video<T>, smoothing_width: usize) -> Result<Trajectory> {
    let h = model.encode_video(video)?;
    let a = model.motion_coords_batch(&h)?;
    let alpha: Vec<Vec<f64>> = (0..a.rows())
        .map(|t| a.row(t).iter().map(|v| v.as_f64()).collect())
        .collect();
    Ok(trajectory_from_alpha(alpha, smoothing_width))
}

/// Direction selection and smoothing of precomputed coordinates.
pub fn trajectory_from_alpha(alpha: Vec<Vec<f64>>, smoothing_width: usize) -> Trajectory {
    let (raw, direction) = select_direction(&alpha);
    let width = if raw.len() < MIN_SMOOTHING_LENGTH { 1 } else { smoothing_width.max(1) };
    Trajectory {
        curve: moving_average(&raw, width),
        alpha,
        direction,
        smoothing_width: width,
    }
}

/// Indices of strict local maxima; flat tops report their (lower) midpoint.
pub fn local_maxima(x: &[f64]) -> Vec<usize> {
    let n = x.len();
    let mut out = Vec::new();
    if n < 3 {
        return out;
    }
    let mut i = 1;
    while i < n - 1 {
        if x[i - 1] < x[i] {
            let mut ahead = i + 1;
            while ahead < n - 1 && x[ahead] == x[i] {
                ahead += 1;
            }
            if x[ahead] < x[i] {
                out.push((i + ahead - 1) / 2);
                i = ahead;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Height of `x[p]` above its base. Each flank is scanned until a sample
/// higher than `x[p]`; a flank that reaches the border first does not bound
/// the base. The base is the higher minimum of the bounded flanks, or the
/// lower flank minimum when neither is bounded.
pub fn prominence(x: &[f64], p: usize) -> f64 {
    let top = x[p];
    let mut left_min = top;
    let mut i = p as isize;
    while i >= 0 && x[i as usize] <= top {
        left_min = left_min.min(x[i as usize]);
        i -= 1;
    }
    let mut right_min = top;
    let mut j = p;
    while j < x.len() && x[j] <= top {
        right_min = right_min.min(x[j]);
        j += 1;
    }
    let base = match (i >= 0, j < x.len()) {
        (true, true) => left_min.max(right_min),
        (true, false) => left_min,
        (false, true) => right_min,
        (false, false) => left_min.min(right_min),
    };
    top - base
}

/// Keeps the highest peaks first (ties to the lower index) and drops any
/// peak closer than `distance` to an already kept one.
fn select_by_distance(x: &[f64], peaks: &[usize], distance: usize) -> Vec<usize> {
    if distance <= 1 {
        return peaks.to_vec();
    }
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&a, &b| x[peaks[b]].total_cmp(&x[peaks[a]]).then(a.cmp(&b)));
    let mut keep = vec![true; peaks.len()];
    for &j in &order {
        if !keep[j] {
            continue;
        }
        let mut k = j;
        while k > 0 && peaks[j] - peaks[k - 1] < distance {
            keep[k - 1] = false;
            k -= 1;
        }
        let mut k = j + 1;
        while k < peaks.len() && peaks[k] - peaks[j] < distance {
            keep[k] = false;
            k += 1;
        }
    }
    peaks.iter().zip(&keep).filter(|(_, &k)| k).map(|(&p, _)| p).collect()
}

/// Peaks with their prominences.
fn find_peaks(x: &[f64], min_distance: usize, min_prominence: f64) -> Vec<(usize, f64)> {
    let candidates = local_maxima(x);
    select_by_distance(x, &candidates, min_distance)
        .into_iter()
        .map(|p| (p, prominence(x, p)))
        .filter(|&(_, prom)| prom >= min_prominence)
        .collect()
}

/// Detected turning points with their prominences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TurningPoints {
    pub peaks: Vec<usize>,
    pub valleys: Vec<usize>,
    pub peak_prominences: Vec<f64>,
    pub valley_prominences: Vec<f64>,
}

/// Maxima and minima separated by at least `min_distance` frames with at
/// least `min_prominence`.
pub fn detect_turning_points(curve: &[f64], min_distance: usize, min_prominence: f64) -> TurningPoints {
    let neg: Vec<f64> = curve.iter().map(|v| -v).collect();
    let (peaks, peak_prominences) = find_peaks(curve, min_distance, min_prominence).into_iter().unzip();
    let (valleys, valley_prominences) = find_peaks(&neg, min_distance, min_prominence).into_iter().unzip();
    TurningPoints {
        peaks,
        valleys,
        peak_prominences,
        valley_prominences,
    }
}

/// Pearson correlation of `x[..T-k]` with `x[k..]`.
pub fn autocorrelation(x: &[f64], k: usize) -> f64 {
    let n = x.len() - k;
    let (a, b) = (&x[..n], &x[k..]);
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (u, v) in a.iter().zip(b) {
        sab += (u - ma) * (v - mb);
        saa += (u - ma) * (u - ma);
        sbb += (v - mb) * (v - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Dominant period from the first significant autocorrelation peak,
/// refined by a parabola through its neighbours.
pub fn dominant_period(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 8 {
        return None;
    }
    let max_lag = 2 * n / 3;
    let r: Vec<f64> = (0..=max_lag + 1).map(|k| if k == 0 { 1.0 } else { autocorrelation(x, k) }).collect();
    for k in 2..=max_lag {
        let threshold = 0.3f64.max(4.0 / ((n - k) as f64).sqrt());
        if r[k] > r[k - 1] && r[k] >= r[k + 1] && r[k] > threshold {
            let denom = r[k - 1] - 2.0 * r[k] + r[k + 1];
            let shift = if denom < 0.0 { 0.5 * (r[k - 1] - r[k + 1]) / denom } else { 0.0 };
            return Some(k as f64 + shift.clamp(-0.5, 0.5));
        }
    }
    None
}

/// Half the dominant period, rounded half to even; `T / 8` without a
/// significant period.
pub fn auto_min_distance(curve: &[f64]) -> usize {
    match dominant_period(curve) {
        Some(p) => ((0.5 * p).round_ties_even() as usize).max(1),
        None => (curve.len() / 8).max(1),
    }
}

/// Events of one video in frame order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePrediction {
    pub ed_frames: Vec<usize>,
    pub es_frames: Vec<usize>,
    pub trajectory: Trajectory,
    pub min_distance: usize,
    /// Set when the curve has no turning points.
    pub degenerate: bool,
}

fn turning_points_for(curve: &[f64], opts: &DetectOptions) -> (TurningPoints, usize) {
    let distance = opts.min_distance.unwrap_or_else(|| auto_min_distance(curve));
    let prom = opts.prominence_factor * std_dev(curve);
    (detect_turning_points(curve, distance, prom), distance)
}

/// Drops the lower-prominence member of each adjacent same-type pair until
/// the two lists interleave.
pub fn repair_interleaving(
    ed: &[usize],
    ed_prom: &[f64],
    es: &[usize],
    es_prom: &[f64],
) -> (Vec<usize>, Vec<usize>) {
    let mut events: Vec<(usize, bool, f64)> = ed
        .iter()
        .zip(ed_prom)
        .map(|(&f, &p)| (f, true, p))
        .chain(es.iter().zip(es_prom).map(|(&f, &p)| (f, false, p)))
        .collect();
    events.sort_by_key(|e| e.0);
    let mut i = 0;
    while i + 1 < events.len() {
        if events[i].1 == events[i + 1].1 {
            // equal prominence keeps the earlier event
            let drop = if events[i + 1].2 > events[i].2 { i } else { i + 1 };
            events.remove(drop);
            i = i.saturating_sub(1);
        } else {
            i += 1;
        }
    }
    let pick = |want: bool| events.iter().filter(|e| e.1 == want).map(|e| e.0).collect();
    (pick(true), pick(false))
}

/// Calibrated ED/ES detection on one video.
pub fn detect_phases<T: Scalar>(
    model: &Model<T>,
    video: &Video<T>,
    calibration: &PhaseCalibration,
    opts: &DetectOptions,
) -> Result<PhasePrediction> {
    if calibration.model_id != model.fingerprint() {
        return Err(Error::Calibration(format!(
            "calibration belongs to model {}, not {}",
            calibration.model_id,
            model.fingerprint()
        )));
    }
    opts.validate()?;
    let trajectory = extract_trajectory(model, video, opts.smoothing_width)?;
    Ok(detect_on_trajectory(trajectory, calibration.ed_polarity, opts))
}

/// Detection on an already extracted trajectory.
pub fn detect_on_trajectory(trajectory: Trajectory, ed_polarity: Polarity, opts: &DetectOptions) -> PhasePrediction {
    let (tp, min_distance) = turning_points_for(&trajectory.curve, opts);
    let ((ed, ed_p), (es, es_p)) = match ed_polarity {
        Polarity::Peak => ((&tp.peaks, &tp.peak_prominences), (&tp.valleys, &tp.valley_prominences)),
        Polarity::Valley => ((&tp.valleys, &tp.valley_prominences), (&tp.peaks, &tp.peak_prominences)),
    };
    let (ed_frames, es_frames) = repair_interleaving(ed, ed_p, es, es_p);
    let degenerate = ed_frames.is_empty() && es_frames.is_empty();
    PhasePrediction {
        ed_frames,
        es_frames,
        trajectory,
        min_distance,
        degenerate,
    }
}

fn nearest_distance(target: usize, candidates: &[usize]) -> Option<usize> {
    candidates.iter().map(|&c| c.abs_diff(target)).min()
}

/// Vote of one video: `Some(Peak)` when peaks sit nearer to the annotated
/// ED frames (and valleys to ES) than the swapped assignment.
pub fn polarity_vote(curve: &[f64], truth: &GroundTruth, opts: &DetectOptions) -> Option<Polarity> {
    let (tp, _) = turning_points_for(curve, opts);
    let cost = |ed: &[usize], es: &[usize]| -> Option<usize> {
        let mut total = 0;
        for &f in &truth.ed_frames {
            total += nearest_distance(f, ed)?;
        }
        for &f in &truth.es_frames {
            total += nearest_distance(f, es)?;
        }
        Some(total)
    };
    match (cost(&tp.peaks, &tp.valleys), cost(&tp.valleys, &tp.peaks)) {
        (Some(a), Some(b)) if a < b => Some(Polarity::Peak),
        (Some(a), Some(b)) if b < a => Some(Polarity::Valley),
        _ => None,
    }
}

/// Majority vote over calibration videos with annotated events.
pub fn calibrate_phase_labels<T: Scalar>(
    model: &Model<T>,
    set: &[(&Video<T>, &GroundTruth)],
    opts: &DetectOptions,
) -> Result<PhaseCalibration> {
    opts.validate()?;
    if set.is_empty() {
        return Err(Error::Calibration("calibration set is empty".into()));
    }
    let mut curves = Vec::with_capacity(set.len());
    for (video, truth) in set {
        if truth.ed_frames.is_empty() || truth.es_frames.is_empty() {
            return Err(Error::Calibration(
                "every calibration video needs at least one ED and one ES event".into(),
            ));
        }
        curves.push(extract_trajectory(model, video, opts.smoothing_width)?.curve);
    }
    let truths: Vec<&GroundTruth> = set.iter().map(|(_, t)| *t).collect();
    calibrate_from_curves(&curves, &truths, model.fingerprint(), opts)
}

/// Calibration from precomputed curves.
pub fn calibrate_from_curves(
    curves: &[Vec<f64>],
    truths: &[&GroundTruth],
    model_id: String,
    opts: &DetectOptions,
) -> Result<PhaseCalibration> {
    let (mut peak, mut valley) = (0, 0);
    for (curve, truth) in curves.iter().zip(truths) {
        match polarity_vote(curve, truth, opts) {
            Some(Polarity::Peak) => peak += 1,
            Some(Polarity::Valley) => valley += 1,
            None => {}
        }
    }
    let ed_polarity = match peak.cmp(&valley) {
        std::cmp::Ordering::Greater => Polarity::Peak,
        std::cmp::Ordering::Less => Polarity::Valley,
        std::cmp::Ordering::Equal => {
            return Err(Error::Calibration(format!(
                "polarity vote tied {peak}:{valley}; add more calibration videos"
            )))
        }
    };
    Ok(PhaseCalibration {
        ed_polarity,
        model_id,
        votes_peak: peak,
        votes_valley: valley,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(n: usize, period: f64, phase: f64) -> Vec<f64> {
        (0..n).map(|t| (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin()).collect()
    }

    #[test]
    fn sinusoid_extrema() {
        let x = sine(60, 20.0, 0.0);
        let tp = detect_turning_points(&x, 10, 0.0);
        assert_eq!(tp.peaks, vec![5, 25, 45]);
        assert_eq!(tp.valleys, vec![15, 35, 55]);
    }

    #[test]
    fn constant_curve_has_no_turning_points() {
        let tp = detect_turning_points(&[0.3; 20], 3, 0.0);
        assert!(tp.peaks.is_empty() && tp.valleys.is_empty());
    }

    #[test]
    fn plateau_reports_midpoint() {
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 1.0, 0.0]), vec![2]);
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 0.0]), vec![1]);
        assert!(local_maxima(&[0.0, 1.0, 1.0]).is_empty());
    }

    #[test]
    fn prominence_and_distance_filters() {
        let x = [0.0, 3.0, 1.0, 2.0, 0.0, 5.0, 0.0];
        assert_eq!(prominence(&x, 1), 3.0);
        assert_eq!(prominence(&x, 3), 1.0);
        assert_eq!(detect_turning_points(&x, 1, 1.5).peaks, vec![1, 5]);
        assert_eq!(detect_turning_points(&x, 3, 0.0).peaks, vec![1, 5]);
        assert_eq!(detect_turning_points(&x, 5, 0.0).peaks, vec![5]);
    }

    #[test]
    fn border_flank_does_not_bound_prominence() {
        let x = [0.9, 1.0, 0.95, 0.0, 0.5, 2.0, 1.5];
        assert_eq!(prominence(&x, 1), 1.0);
        assert_eq!(prominence(&x, 5), 2.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(prominence(&neg, 3), 2.0);
    }

    #[test]
    fn direction_selection() {
        let alpha: Vec<Vec<f64>> = (0..10).map(|t| vec![2.0 * (t % 2) as f64, 0.1 * t as f64]).collect();
        assert_eq!(select_direction(&alpha).1, 0);
        let tied: Vec<Vec<f64>> = (0..10).map(|t| vec![(t % 2) as f64, (t % 2) as f64]).collect();
        assert_eq!(select_direction(&tied).1, 0);
        let one: Vec<Vec<f64>> = (0..5).map(|t| vec![t as f64]).collect();
        assert_eq!(select_direction(&one), (vec![0.0, 1.0, 2.0, 3.0, 4.0], 0));
    }

    #[test]
    fn min_distance_from_period() {
        assert_eq!(auto_min_distance(&sine(96, 20.0, 0.3)), 10);
        assert_eq!(auto_min_distance(&sine(96, 12.8, 0.0)), 6);
        assert_eq!(auto_min_distance(&[1.0; 40]), 5);
    }

    #[test]
    fn white_noise_falls_back() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x: Vec<f64> = (0..96).map(|_| StandardNormal.sample(&mut rng)).collect();
            assert_eq!(auto_min_distance(&x), 12);
        }
    }

    #[test]
    fn interleaving_repair_drops_weaker_duplicate() {
        let (ed, es) = repair_interleaving(&[2, 5, 20], &[1.0, 0.4, 1.0], &[10], &[1.0]);
        assert_eq!(ed, vec![2, 20]);
        assert_eq!(es, vec![10]);
    }

    #[test]
    fn calibration_votes() {
        let curve = sine(60, 20.0, std::f64::consts::FRAC_PI_2);
        // peaks at 0, 20, 40 (interior 20, 40); valleys at 10, 30, 50
        let valley_ed = GroundTruth {
            ed_frames: vec![10, 30, 50],
            es_frames: vec![20, 40],
            period_frames: 20.0,
            orientation: 0,
        };
        let opts = DetectOptions::default();
        assert_eq!(polarity_vote(&curve, &valley_ed, &opts), Some(Polarity::Valley));
        let peak_ed = GroundTruth {
            ed_frames: vec![20, 40],
            es_frames: vec![10, 30, 50],
            ..valley_ed.clone()
        };
        let curves = vec![curve.clone(), curve.clone(), curve];
        let truths = [&valley_ed, &valley_ed, &peak_ed];
        let cal = calibrate_from_curves(&curves, &truths, "m".into(), &opts).unwrap();
        assert_eq!(cal.ed_polarity, Polarity::Valley);
        assert!(calibrate_from_curves(&curves[..2], &truths[1..], "m".into(), &opts).is_err());
    }

    #[test]
    fn smoothing_shrinks_at_edges() {
        assert_eq!(moving_average(&[0.0, 3.0, 6.0, 9.0], 3), vec![1.5, 3.0, 6.0, 7.5]);
        let short = trajectory_from_alpha((0..5).map(|t| vec![t as f64]).collect(), 3);
        assert_eq!(short.smoothing_width, 1);
    }
}
