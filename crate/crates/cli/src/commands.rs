use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use latentphase::checkpoint::Checkpoint;
use latentphase::dataset::{load_dataset, load_metas, read_json, write_json, write_synth_dataset, VideoMeta};
use latentphase::eval::{events_csv, groups_csv, summarize, EvalSummary, MetricsRecord};
use latentphase::phase::{PhaseCalibration, Trajectory};
use latentphase::pipeline::{calibrate, detect_all, evaluate_records, preprocess_all, PredictionRecord, Sample};
use latentphase::synth::generate_dataset;
use latentphase::trainer::{curves_csv, split_indices, train, EpochRecord};
use latentphase::video::{PreprocessMode, PreprocessSpec};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// `<path><suffix>` with the suffix appended to the file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name: OsString = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn calibration_path(checkpoint: &Path) -> PathBuf {
    sidecar(checkpoint, ".calib.json")
}

pub fn last_checkpoint_path(checkpoint: &Path) -> PathBuf {
    sidecar(checkpoint, ".last")
}

pub fn curves_path(checkpoint: &Path) -> PathBuf {
    sidecar(checkpoint, ".curves.csv")
}

pub fn split_path(checkpoint: &Path) -> PathBuf {
    sidecar(checkpoint, ".split.json")
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} given on the command line or in the config")))
}

fn existing_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} is not a directory", path.display())))
    }
}

fn existing_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} does not exist", path.display())))
    }
}

/// Creates the parent directory of an output file.
fn writable_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => make_dir(p),
        _ => Ok(()),
    }
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create directory {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_samples(root: &Path) -> Result<Vec<Sample<f32>>> {
    Ok(load_dataset::<f32>(root)?
        .into_iter()
        .map(|(meta, video)| Sample { meta, video })
        .collect())
}

fn preprocess_spec(cfg: &RunConfig) -> PreprocessSpec {
    PreprocessSpec {
        temporal_downsample: cfg.train.temporal_downsample,
        ..PreprocessSpec::for_input_size(cfg.model_config().input_size)
    }
}

pub fn generate(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out = required(out, &cfg.paths.dataset, "output dataset directory")?;
    make_dir(&out)?;
    let seed = cfg.generator_seed();
    let entries = generate_dataset::<f32>(cfg.generate.count, &cfg.generate.ranges, seed)?;
    write_synth_dataset(&out, &entries, &cfg.generate.ranges, seed)?;
    println!("wrote {} videos to {}", entries.len(), out.display());
    Ok(())
}

/// Video ids of the train/validation split.
#[derive(Debug, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

pub fn run_train(cfg: &RunConfig, dataset: Option<PathBuf>, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let dataset = required(dataset, &cfg.paths.dataset, "dataset directory")?;
    let out = required(out, &cfg.paths.checkpoint, "checkpoint path")?;
    existing_dir(&dataset, "dataset")?;
    writable_parent(&out)?;
    let resume_from = if resume {
        let last = last_checkpoint_path(&out);
        let path = if last.is_file() { last } else { out.clone() };
        existing_file(&path, "checkpoint to resume")?;
        Some(Checkpoint::<f32>::load(&path)?)
    } else {
        None
    };

    let samples = load_samples(&dataset)?;
    let (train_idx, valid_idx) = split_indices(samples.len(), cfg.train.validation_fraction, cfg.train.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let spec = preprocess_spec(cfg);
    let prep = |set: Vec<Sample<f32>>| -> Result<Vec<_>> {
        Ok(preprocess_all(&set, PreprocessMode::Train, &spec)?
            .into_iter()
            .map(|s| s.video)
            .collect())
    };
    let split = Split {
        train: train_idx.iter().map(|&i| samples[i].meta.id.clone()).collect(),
        validation: valid_idx.iter().map(|&i| samples[i].meta.id.clone()).collect(),
    };
    let train_set = prep(pick(&train_idx))?;
    let valid_set = prep(pick(&valid_idx))?;
    drop(samples);

    let previous_best = match (&resume_from, out.is_file()) {
        (Some(_), true) => Checkpoint::<f32>::load(&out)?.val_loss,
        _ => None,
    };
    let mut curves = if resume && curves_path(&out).is_file() {
        fs::read_to_string(curves_path(&out))
            .map_err(|e| CliError::Data(format!("cannot read loss curves: {e}")))?
    } else {
        String::new()
    };
    let outcome = train(
        &train_set,
        &valid_set,
        &cfg.model_config(),
        &cfg.train,
        resume_from,
        |r: &EpochRecord| {
            println!(
                "epoch {:>4}  train {:>12}  val {:.6}  ortho {:.2e}",
                r.epoch,
                r.train_loss.map_or("-".to_string(), |l| format!("{l:.6}")),
                r.val_loss,
                r.max_orthonormality_error
            );
        },
    )?;

    let records: Vec<EpochRecord> = if curves.is_empty() {
        outcome.curves.clone()
    } else {
        // the resumed run's first record repeats the last saved epoch
        outcome.curves.iter().skip(1).cloned().collect()
    };
    let table = curves_csv(&records)?;
    if curves.is_empty() {
        curves = table;
    } else {
        curves.extend(table.lines().skip(1).flat_map(|l| [l, "\n"]));
    }

    let improved = previous_best.is_none_or(|prev| outcome.best.val_loss.is_some_and(|v| v < prev));
    if improved {
        outcome.best.save(&out)?;
    }
    outcome.last.save(&last_checkpoint_path(&out))?;
    write_text(&curves_path(&out), &curves)?;
    write_json(&split_path(&out), &split)?;
    for &i in &outcome.skipped {
        log::warn!("skipped training video {}: shorter than one clip", split.train[i]);
    }
    println!(
        "best epoch {} (val {:.6}); checkpoint {}",
        outcome.best.epoch,
        outcome.best.val_loss.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(PathBuf, Checkpoint<f32>)> {
    let path = required(checkpoint, &cfg.paths.checkpoint, "checkpoint path")?;
    existing_file(&path, "checkpoint")?;
    let ckpt = Checkpoint::<f32>::load(&path)?;
    Ok((path, ckpt))
}

fn test_samples(ckpt: &Checkpoint<f32>, root: &Path) -> Result<Vec<Sample<f32>>> {
    let spec = PreprocessSpec::for_input_size(ckpt.model.config().input_size);
    Ok(preprocess_all(&load_samples(root)?, PreprocessMode::Test, &spec)?)
}

pub fn run_calibrate(cfg: &RunConfig, checkpoint: Option<PathBuf>, calibration_set: Option<PathBuf>) -> Result<()> {
    let set = required(calibration_set, &cfg.paths.calibration_set, "calibration set")?;
    let (path, ckpt) = load_checkpoint(cfg, checkpoint)?;
    existing_dir(&set, "calibration set")?;
    let samples = test_samples(&ckpt, &set)?;
    let cal = calibrate(&ckpt.model, &samples, &cfg.detect)?;
    let out = calibration_path(&path);
    cal.save(&out)?;
    println!(
        "ED polarity {:?} ({} peak / {} valley votes); wrote {}",
        cal.ed_polarity,
        cal.votes_peak,
        cal.votes_valley,
        out.display()
    );
    Ok(())
}

/// `frame,alpha_0,...,alpha_{M-1},curve` rows of one trajectory.
pub fn trajectory_csv(t: &Trajectory) -> String {
    let m = t.alpha.first().map_or(0, Vec::len);
    let mut out = String::from("frame");
    for k in 0..m {
        let _ = write!(out, ",alpha_{k}");
    }
    out.push_str(",curve\n");
    for (i, (a, c)) in t.alpha.iter().zip(&t.curve).enumerate() {
        let _ = write!(out, "{i}");
        for v in a {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{c}");
    }
    out
}

pub fn run_detect(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    videos: Option<PathBuf>,
    calibration: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let videos = required(videos, &cfg.paths.videos, "video directory")?;
    let out = required(out, &cfg.paths.predictions, "predictions path")?;
    let (path, ckpt) = load_checkpoint(cfg, checkpoint)?;
    existing_dir(&videos, "video directory")?;
    let cal_path = calibration.unwrap_or_else(|| calibration_path(&path));
    if !cal_path.is_file() {
        return Err(CliError::Data(format!(
            "no phase calibration at {}; run `latentphase calibrate --checkpoint {} --calibration-set <DIR>` first",
            cal_path.display(),
            path.display()
        )));
    }
    let cal = PhaseCalibration::load(&cal_path)?;
    writable_parent(&out)?;
    let traj_dir = sidecar(&out.with_extension(""), "_trajectories");
    make_dir(&traj_dir)?;

    let samples = test_samples(&ckpt, &videos)?;
    let preds = detect_all(&ckpt.model, &samples, &cal, &cfg.detect)?;
    let records: Vec<PredictionRecord> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| PredictionRecord {
            video_id: s.meta.id.clone(),
            prediction: p,
        })
        .collect();
    for r in &records {
        write_text(&traj_dir.join(format!("{}.csv", r.video_id)), &trajectory_csv(&r.prediction.trajectory))?;
        if r.prediction.degenerate {
            log::warn!("video {}: flat trajectory, no events", r.video_id);
        }
        println!(
            "{}: ED {:?} ES {:?}{}",
            r.video_id,
            r.prediction.ed_frames,
            r.prediction.es_frames,
            if r.prediction.degenerate { " [degenerate]" } else { "" }
        );
    }
    write_json(&out, &records)?;
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

fn metrics_line(name: &str, m: &Option<MetricsRecord>) -> String {
    match m {
        Some(m) => format!(
            "{name}: MAE {:.3} ± {:.3} frames, {:.2} ± {:.2} ms, {:.2} ± {:.2} %cycle; success {:.1}% ({} events, {} unmatched)",
            m.mae_frames.mean,
            m.mae_frames.std,
            m.mae_ms.mean,
            m.mae_ms.std,
            m.mae_pct_cycle.mean,
            m.mae_pct_cycle.std,
            100.0 * m.success_rate,
            m.n_events,
            m.unmatched
        ),
        None => format!("{name}: no events"),
    }
}

pub fn run_eval(
    cfg: &RunConfig,
    predictions: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<EvalSummary> {
    let predictions = required(predictions, &cfg.paths.predictions, "predictions path")?;
    let dataset = required(dataset, &cfg.paths.dataset, "dataset directory")?;
    let out_dir = required(out_dir, &cfg.paths.report_dir, "report directory")?;
    existing_file(&predictions, "predictions file")?;
    existing_dir(&dataset, "dataset")?;
    make_dir(&out_dir)?;

    let records: Vec<PredictionRecord> = read_json(&predictions)?;
    let metas: Vec<VideoMeta> = load_metas(&dataset)?;
    let errors = evaluate_records(&metas, &records)?;
    let summary = summarize(&errors);
    write_text(&out_dir.join("events.csv"), &events_csv(&errors)?)?;
    write_text(&out_dir.join("groups.csv"), &groups_csv(&summary.groups)?)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    println!("{}", metrics_line("ED", &summary.ed));
    println!("{}", metrics_line("ES", &summary.es));
    let spread = |s: Option<f64>| s.map_or("-".to_string(), |v| format!("{v:.3}"));
    println!(
        "orientation spread (frames): ED {}, ES {}",
        spread(summary.spread_ed_frames),
        spread(summary.spread_es_frames)
    );
    println!("reports in {}", out_dir.display());
    Ok(summary)
}
