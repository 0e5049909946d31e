//! Event matching, MAE in frames / ms / % of cycle, success rate and
//! per-orientation reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::dominant_period;
use crate::synth::GroundTruth;

/// Success threshold on the %-of-cycle error.
pub const SUCCESS_THRESHOLD_PCT: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::ED => "ED",
            Phase::ES => "ES",
        }
    }
}

/// One ground-truth event and its nearest prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventError {
    pub video_id: String,
    pub phase: Phase,
    pub orientation: u32,
    pub gt_frame: usize,
    pub pred_frame: Option<usize>,
    pub fps: f64,
    pub cycle_frames: f64,
}

impl EventError {
    pub fn error_frames(&self) -> Option<f64> {
        self.pred_frame.map(|p| p.abs_diff(self.gt_frame) as f64)
    }

    pub fn error_ms(&self) -> Option<f64> {
        self.error_frames().map(|e| e * 1000.0 / self.fps)
    }

    pub fn error_pct_cycle(&self) -> Option<f64> {
        self.error_frames().map(|e| 100.0 * e / self.cycle_frames)
    }
}

/// Nearest prediction for every ground-truth frame (ties go to the earlier
/// prediction); `None` when there are no predictions.
pub fn match_events(gt: &[usize], pred: &[usize]) -> Vec<(usize, Option<usize>)> {
    gt.iter()
        .map(|&g| {
            let best = pred.iter().copied().min_by_key(|&p| (p.abs_diff(g), p));
            (g, best)
        })
        .collect()
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

/// Median gap between consecutive ED frames; the trajectory's dominant
/// period when fewer than two ED frames are known.
pub fn cycle_length(gt_ed: &[usize], trajectory: Option<&[f64]>) -> Result<f64> {
    if gt_ed.len() >= 2 {
        let mut sorted = gt_ed.to_vec();
        sorted.sort_unstable();
        return Ok(median(sorted.windows(2).map(|w| (w[1] - w[0]) as f64).collect()));
    }
    trajectory
        .and_then(dominant_period)
        .ok_or_else(|| Error::Data("cycle length needs two ED events or a periodic trajectory".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mae_frames: MeanStd,
    pub mae_ms: MeanStd,
    pub mae_pct_cycle: MeanStd,
    /// Events under the threshold over all events, matched or not.
    pub success_rate: f64,
    pub n_events: usize,
    pub unmatched: usize,
}

/// Metrics at the default 50 % threshold.
pub fn compute_metrics(errors: &[EventError]) -> Result<MetricsRecord> {
    compute_metrics_at(errors, SUCCESS_THRESHOLD_PCT)
}

pub fn compute_metrics_at(errors: &[EventError], threshold_pct: f64) -> Result<MetricsRecord> {
    let matched: Vec<&EventError> = errors.iter().filter(|e| e.pred_frame.is_some()).collect();
    if matched.is_empty() {
        return Err(Error::Data("no matched events to aggregate".into()));
    }
    let frames: Vec<f64> = matched.iter().filter_map(|e| e.error_frames()).collect();
    let ms: Vec<f64> = matched.iter().filter_map(|e| e.error_ms()).collect();
    let pct: Vec<f64> = matched.iter().filter_map(|e| e.error_pct_cycle()).collect();
    let hits = pct.iter().filter(|&&p| p < threshold_pct).count();
    Ok(MetricsRecord {
        mae_frames: MeanStd::of(&frames),
        mae_ms: MeanStd::of(&ms),
        mae_pct_cycle: MeanStd::of(&pct),
        success_rate: hits as f64 / errors.len() as f64,
        n_events: errors.len(),
        unmatched: errors.len() - matched.len(),
    })
}

/// Event errors of one video.
pub fn evaluate_video(
    video_id: &str,
    fps: f64,
    truth: &GroundTruth,
    pred_ed: &[usize],
    pred_es: &[usize],
    cycle_frames: f64,
) -> Vec<EventError> {
    let mut out = Vec::new();
    for (phase, gt, pred) in [(Phase::ED, &truth.ed_frames, pred_ed), (Phase::ES, &truth.es_frames, pred_es)] {
        for (g, p) in match_events(gt, pred) {
            out.push(EventError {
                video_id: video_id.to_string(),
                phase,
                orientation: truth.orientation,
                gt_frame: g,
                pred_frame: p,
                fps,
                cycle_frames,
            });
        }
    }
    out
}

/// Metrics of one (orientation, phase) group; `orientation` is `None` for
/// the overall rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub orientation: Option<u32>,
    pub phase: Phase,
    /// `None` when no event in the group was matched.
    pub metrics: Option<MetricsRecord>,
    pub n_events: usize,
}

/// One row per present (orientation, phase) followed by one overall row
/// per phase.
pub fn group_report(errors: &[EventError]) -> Vec<GroupRow> {
    let mut orientations: Vec<u32> = errors.iter().map(|e| e.orientation).collect();
    orientations.sort_unstable();
    orientations.dedup();
    let mut rows = Vec::new();
    let row = |orientation: Option<u32>, phase: Phase| {
        let group: Vec<EventError> = errors
            .iter()
            .filter(|e| e.phase == phase && orientation.is_none_or(|o| e.orientation == o))
            .cloned()
            .collect();
        GroupRow {
            orientation,
            phase,
            metrics: compute_metrics(&group).ok(),
            n_events: group.len(),
        }
    };
    for &o in &orientations {
        for phase in [Phase::ED, Phase::ES] {
            rows.push(row(Some(o), phase));
        }
    }
    for phase in [Phase::ED, Phase::ES] {
        rows.push(row(None, phase));
    }
    rows
}

/// Max minus min of the per-orientation mean frame error for `phase`.
pub fn orientation_spread(rows: &[GroupRow], phase: Phase) -> Option<f64> {
    let means: Vec<f64> = rows
        .iter()
        .filter(|r| r.phase == phase && r.orientation.is_some())
        .filter_map(|r| r.metrics.as_ref().map(|m| m.mae_frames.mean))
        .collect();
    let hi = means.iter().copied().reduce(f64::max)?;
    let lo = means.iter().copied().reduce(f64::min)?;
    Some(hi - lo)
}

#[derive(Serialize)]
struct EventRow<'a> {
    video_id: &'a str,
    phase: &'static str,
    orientation: u32,
    gt_frame: usize,
    pred_frame: Option<usize>,
    error_frames: Option<f64>,
    error_ms: Option<f64>,
    error_pct_cycle: Option<f64>,
    fps: f64,
    cycle_frames: f64,
}

#[derive(Serialize)]
struct GroupCsvRow {
    orientation: String,
    phase: &'static str,
    n_events: usize,
    unmatched: usize,
    mae_frames_mean: Option<f64>,
    mae_frames_std: Option<f64>,
    mae_ms_mean: Option<f64>,
    mae_ms_std: Option<f64>,
    mae_pct_cycle_mean: Option<f64>,
    mae_pct_cycle_std: Option<f64>,
    success_rate: f64,
}

pub(crate) fn to_csv<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv: {e}")))
}

/// One row per event; unmatched events leave the error columns empty.
pub fn events_csv(errors: &[EventError]) -> Result<String> {
    to_csv(errors.iter().map(|e| EventRow {
        video_id: &e.video_id,
        phase: e.phase.as_str(),
        orientation: e.orientation,
        gt_frame: e.gt_frame,
        pred_frame: e.pred_frame,
        error_frames: e.error_frames(),
        error_ms: e.error_ms(),
        error_pct_cycle: e.error_pct_cycle(),
        fps: e.fps,
        cycle_frames: e.cycle_frames,
    }))
}

/// Grouped metrics keyed by (orientation, phase); the overall rows use
/// `all` as orientation.
pub fn groups_csv(rows: &[GroupRow]) -> Result<String> {
    to_csv(rows.iter().map(|r| {
        let m = r.metrics.as_ref();
        GroupCsvRow {
            orientation: r.orientation.map(|o| o.to_string()).unwrap_or_else(|| "all".into()),
            phase: r.phase.as_str(),
            n_events: r.n_events,
            unmatched: m.map_or(r.n_events, |m| m.unmatched),
            mae_frames_mean: m.map(|m| m.mae_frames.mean),
            mae_frames_std: m.map(|m| m.mae_frames.std),
            mae_ms_mean: m.map(|m| m.mae_ms.mean),
            mae_ms_std: m.map(|m| m.mae_ms.std),
            mae_pct_cycle_mean: m.map(|m| m.mae_pct_cycle.mean),
            mae_pct_cycle_std: m.map(|m| m.mae_pct_cycle.std),
            success_rate: m.map_or(0.0, |m| m.success_rate),
        }
    }))
}

/// Machine-readable evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ed: Option<MetricsRecord>,
    pub es: Option<MetricsRecord>,
    pub spread_ed_frames: Option<f64>,
    pub spread_es_frames: Option<f64>,
    pub groups: Vec<GroupRow>,
}

pub fn summarize(errors: &[EventError]) -> EvalSummary {
    let groups = group_report(errors);
    let overall = |phase| {
        groups
            .iter()
            .find(|r| r.orientation.is_none() && r.phase == phase)
            .and_then(|r| r.metrics.clone())
    };
    EvalSummary {
        ed: overall(Phase::ED),
        es: overall(Phase::ES),
        spread_ed_frames: orientation_spread(&groups, Phase::ED),
        spread_es_frames: orientation_spread(&groups, Phase::ES),
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(gt: usize, pred: Option<usize>, fps: f64, cycle: f64) -> EventError {
        EventError {
            video_id: "v".into(),
            phase: Phase::ED,
            orientation: 0,
            gt_frame: gt,
            pred_frame: pred,
            fps,
            cycle_frames: cycle,
        }
    }

    #[test]
    fn matching_examples() {
        assert_eq!(match_events(&[12], &[10, 40]), vec![(12, Some(10))]);
        assert_eq!(match_events(&[5, 25], &[5, 25]), vec![(5, Some(5)), (25, Some(25))]);
        assert_eq!(match_events(&[10], &[]), vec![(10, None)]);
        assert_eq!(match_events(&[10], &[8, 12]), vec![(10, Some(8))]);
    }

    #[test]
    fn cycle_examples() {
        assert_eq!(cycle_length(&[0, 20, 40], None).unwrap(), 20.0);
        assert_eq!(cycle_length(&[0, 19, 40, 60], None).unwrap(), 20.0);
        let traj: Vec<f64> = (0..80).map(|t| (t as f64 * std::f64::consts::TAU / 20.0).cos()).collect();
        assert!((cycle_length(&[3], Some(&traj)).unwrap() - 20.0).abs() <= 1.0);
        assert!(cycle_length(&[3], None).is_err());
    }

    #[test]
    fn metric_arithmetic() {
        let m = compute_metrics(&[event(10, Some(12), 50.0, 20.0)]).unwrap();
        assert_eq!(m.mae_ms.mean, 40.0);
        assert_eq!(m.mae_pct_cycle.mean, 10.0);
        assert_eq!(m.success_rate, 1.0);
        let m = compute_metrics(&[event(10, Some(11), 50.0, 20.0), event(10, Some(13), 50.0, 20.0)]).unwrap();
        assert_eq!(m.mae_frames, MeanStd { mean: 2.0, std: 1.0 });
        let m = compute_metrics(&[event(10, Some(11), 50.0, 20.0), event(10, None, 50.0, 20.0)]).unwrap();
        assert_eq!((m.n_events, m.unmatched), (2, 1));
        assert_eq!(m.success_rate, 0.5);
        assert!(compute_metrics(&[event(1, None, 50.0, 20.0)]).is_err());
    }

    #[test]
    fn grouping_cardinality() {
        let mut errors = Vec::new();
        for o in 0..8u32 {
            for phase in [Phase::ED, Phase::ES] {
                errors.push(EventError {
                    orientation: o * 45,
                    phase,
                    ..event(10, Some(10 + o as usize % 3), 40.0, 20.0)
                });
            }
        }
        let rows = group_report(&errors);
        assert_eq!(rows.len(), 18);
        assert_eq!(orientation_spread(&rows, Phase::ED), Some(2.0));

        let single: Vec<EventError> = errors.iter().filter(|e| e.orientation == 90).cloned().collect();
        let rows = group_report(&single);
        assert_eq!(rows[0].metrics, rows[2].metrics);
        assert_eq!(rows[1].metrics, rows[3].metrics);
    }
}
