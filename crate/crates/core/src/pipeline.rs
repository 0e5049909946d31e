//! End-to-end glue shared by the command line and the acceptance suite:
//! preprocessing of annotated videos, calibration and evaluation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::VideoMeta;
use crate::error::{Error, Result};
use crate::eval::{cycle_length, evaluate_video, EventError};
use crate::model::Model;
use crate::phase::{calibrate_from_curves, detect_on_trajectory, extract_trajectory, DetectOptions, PhaseCalibration, PhasePrediction};
use crate::scalar::Scalar;
use crate::synth::GroundTruth;
use crate::video::{preprocess_video, PreprocessMode, PreprocessSpec, Video};

/// A video with its metadata.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub meta: VideoMeta,
    pub video: Video<T>,
}

/// Preprocesses every sample in `mode`.
pub fn preprocess_all<T: Scalar>(samples: &[Sample<T>], mode: PreprocessMode, spec: &PreprocessSpec) -> Result<Vec<Sample<T>>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(Sample {
                meta: s.meta.clone(),
                video: preprocess_video(&s.video, s.meta.crop, mode, spec)?,
            })
        })
        .collect()
}

fn truth_of(meta: &VideoMeta) -> Result<&GroundTruth> {
    meta.ground_truth
        .as_ref()
        .ok_or_else(|| Error::Data(format!("video {} has no ground truth", meta.id)))
}

/// Calibrates on test-mode samples carrying ground truth.
pub fn calibrate<T: Scalar>(model: &Model<T>, samples: &[Sample<T>], opts: &DetectOptions) -> Result<PhaseCalibration> {
    opts.validate()?;
    if samples.is_empty() {
        return Err(Error::Calibration("calibration set is empty".into()));
    }
    let truths = samples.iter().map(|s| truth_of(&s.meta)).collect::<Result<Vec<_>>>()?;
    for (s, t) in samples.iter().zip(&truths) {
        if t.ed_frames.is_empty() || t.es_frames.is_empty() {
            return Err(Error::Calibration(format!(
                "calibration video {} needs at least one ED and one ES event",
                s.meta.id
            )));
        }
    }
    let curves = samples
        .par_iter()
        .map(|s| extract_trajectory(model, &s.video, opts.smoothing_width).map(|t| t.curve))
        .collect::<Result<Vec<_>>>()?;
    calibrate_from_curves(&curves, &truths, model.fingerprint(), opts)
}

/// Predictions for test-mode samples, in input order.
pub fn detect_all<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    calibration: &PhaseCalibration,
    opts: &DetectOptions,
) -> Result<Vec<PhasePrediction>> {
    if calibration.model_id != model.fingerprint() {
        return Err(Error::Calibration(format!(
            "calibration belongs to model {}, not {}",
            calibration.model_id,
            model.fingerprint()
        )));
    }
    opts.validate()?;
    samples
        .par_iter()
        .map(|s| {
            let traj = extract_trajectory(model, &s.video, opts.smoothing_width)?;
            Ok(detect_on_trajectory(traj, calibration.ed_polarity, opts))
        })
        .collect()
}

/// Prediction of one video keyed by its id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    #[serde(flatten)]
    pub prediction: PhasePrediction,
}

/// Event errors of predictions against the samples' ground truth.
pub fn evaluate<T: Scalar>(samples: &[Sample<T>], predictions: &[PhasePrediction]) -> Result<Vec<EventError>> {
    if samples.len() != predictions.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} videos",
            predictions.len(),
            samples.len()
        )));
    }
    let mut out = Vec::new();
    for (s, p) in samples.iter().zip(predictions) {
        out.extend(evaluate_one(&s.meta, p)?);
    }
    Ok(out)
}

/// Event errors of id-keyed predictions; every record must name a video in
/// `metas` and every video must have exactly one record.
pub fn evaluate_records(metas: &[VideoMeta], records: &[PredictionRecord]) -> Result<Vec<EventError>> {
    let by_id: BTreeMap<&str, &VideoMeta> = metas.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut seen = BTreeMap::new();
    for r in records {
        if !by_id.contains_key(r.video_id.as_str()) {
            return Err(Error::Data(format!("prediction for unknown video {}", r.video_id)));
        }
        if seen.insert(r.video_id.as_str(), r).is_some() {
            return Err(Error::Data(format!("duplicate prediction for video {}", r.video_id)));
        }
    }
    let mut out = Vec::new();
    for m in metas {
        let r = seen
            .get(m.id.as_str())
            .ok_or_else(|| Error::Data(format!("no prediction for video {}", m.id)))?;
        out.extend(evaluate_one(m, &r.prediction)?);
    }
    Ok(out)
}

fn evaluate_one(meta: &VideoMeta, p: &PhasePrediction) -> Result<Vec<EventError>> {
    let truth = truth_of(meta)?;
    let cycle = cycle_length(&truth.ed_frames, Some(&p.trajectory.curve)).unwrap_or(truth.period_frames);
    Ok(evaluate_video(&meta.id, meta.fps, truth, &p.ed_frames, &p.es_frames, cycle))
}
