//! Self-supervised training: clip sampling, the batched Adam loop,
//! validation-based checkpoint selection and loss curves.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{orthonormality_error, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::similarity::{video_registration_loss_graph, LossConfig};
use crate::tensor::Tensor;
use crate::video::{CropBox, Video};

/// Clockwise quarter turns applied to every training video.
pub const ROTATIONS: [usize; 4] = [0, 1, 2, 3];

/// Largest tolerated deviation of `E Eᵀ` from the identity.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub clip_length: usize,
    /// Spatial crop side; `None` uses the model input size.
    pub crop_size: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Applied during preprocessing of training videos.
    pub temporal_downsample: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Gradient norm above which training aborts.
    pub grad_norm_limit: f64,
    /// Worker threads for per-clip gradients; 0 uses the global pool.
    pub threads: usize,
    /// Forces a single worker thread.
    pub strict_deterministic: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_length: 25,
            crop_size: None,
            batch_size: 16,
            epochs: 500,
            learning_rate: 1e-4,
            temporal_downsample: 2,
            seed: 0,
            validation_fraction: 0.15,
            grad_norm_limit: 1e4,
            threads: 0,
            strict_deterministic: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.clip_length < self.loss.max_offset + 1 {
            return bad(format!(
                "clip_length {} must be at least max_offset + 1 = {}",
                self.clip_length,
                self.loss.max_offset + 1
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.temporal_downsample == 0 {
            return bad("temporal_downsample must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)".into());
        }
        if !(self.grad_norm_limit > 0.0) {
            return bad("grad_norm_limit must be positive".into());
        }
        Ok(())
    }

    fn crop_for(&self, model: &ModelConfig) -> usize {
        self.crop_size.unwrap_or(model.input_size)
    }
}

/// Where a clip comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipSpec {
    pub video: usize,
    pub start: usize,
    pub top: usize,
    pub left: usize,
    pub rotation: usize,
}

/// Contiguous `clip_length` frames under one random crop window.
pub fn sample_clip<T: Scalar, R: Rng>(
    video: &Video<T>,
    clip_length: usize,
    crop_size: usize,
    rng: &mut R,
) -> Result<Video<T>> {
    let (start, top, left) = sample_window(video, clip_length, crop_size, rng)?;
    video.clip(start, clip_length, square(top, left, crop_size))
}

fn square(top: usize, left: usize, side: usize) -> CropBox {
    CropBox {
        top,
        left,
        height: side,
        width: side,
    }
}

fn sample_window<T: Scalar, R: Rng>(
    video: &Video<T>,
    clip_length: usize,
    crop_size: usize,
    rng: &mut R,
) -> Result<(usize, usize, usize)> {
    if video.frames() < clip_length {
        return Err(Error::VideoTooShort {
            frames: video.frames(),
            needed: clip_length,
        });
    }
    if crop_size == 0 || video.height() < crop_size || video.width() < crop_size {
        return Err(Error::Data(format!(
            "crop {crop_size} larger than {}x{} frame",
            video.height(),
            video.width()
        )));
    }
    let start = rng.random_range(0..=video.frames() - clip_length);
    let top = rng.random_range(0..=video.height() - crop_size);
    let left = rng.random_range(0..=video.width() - crop_size);
    Ok((start, top, left))
}

fn materialize<T: Scalar>(videos: &[Video<T>], spec: &ClipSpec, len: usize, crop: usize) -> Result<Video<T>> {
    videos[spec.video]
        .clip(spec.start, len, square(spec.top, spec.left, crop))?
        .rotated_cw(spec.rotation)
}

/// One clip per (video × rotation), in video-major order.
fn sample_specs<T: Scalar>(
    videos: &[Video<T>],
    usable: &[usize],
    len: usize,
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClipSpec>> {
    let mut specs = Vec::with_capacity(usable.len() * ROTATIONS.len());
    for &v in usable {
        for &rotation in &ROTATIONS {
            let (start, top, left) = sample_window(&videos[v], len, crop, rng)?;
            specs.push(ClipSpec {
                video: v,
                start,
                top,
                left,
                rotation,
            });
        }
    }
    Ok(specs)
}

fn graph_inputs<T: Scalar>(g: &mut Graph<T>, clip: &Video<T>) -> Result<(crate::autodiff::Var, Vec<crate::autodiff::Var>)> {
    let (n, h, w) = (clip.frames(), clip.height(), clip.width());
    let stacked = g.constant(Tensor::new(&[n, 1, h, w], clip.data().to_vec())?);
    let frames = (0..n)
        .map(|t| Tensor::new(&[h, w], clip.frame_slice(t).to_vec()).map(|x| g.constant(x)))
        .collect::<Result<Vec<_>>>()?;
    Ok((stacked, frames))
}

/// Registration loss of one clip under `model`.
pub fn clip_loss<T: Scalar>(model: &Model<T>, clip: &Video<T>, loss: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let (stacked, frames) = graph_inputs(&mut g, clip)?;
    let nodes = model.forward_graph(&mut g, &bound, stacked)?;
    let l = video_registration_loss_graph(&mut g, &frames, nodes.velocities, loss)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Loss of one clip and its gradient for every parameter, in parameter
/// order.
pub fn clip_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    clip: &Video<T>,
    loss: &LossConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let (stacked, frames) = graph_inputs(&mut g, clip)?;
    let nodes = model.forward_graph(&mut g, &bound, stacked)?;
    let l = video_registration_loss_graph(&mut g, &frames, nodes.velocities, loss)?;
    let value = g.value(l).data()[0].as_f64();
    let mut grads = g.backward(l);
    let out = bound
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();
    Ok((value, out))
}

/// Per-epoch losses. Epoch 0 is the untrained model and has no train loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Largest `‖E Eᵀ − I‖∞` over the epoch's steps.
    pub max_orthonormality_error: f64,
}

/// Renders loss curves as `epoch,train_loss,val_loss` rows.
pub fn curves_csv(records: &[EpochRecord]) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        train_loss: Option<f64>,
        val_loss: f64,
    }
    crate::eval::to_csv(records.iter().map(|r| Row {
        epoch: r.epoch,
        train_loss: r.train_loss,
        val_loss: r.val_loss,
    }))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Lowest-validation-loss checkpoint among all logged epochs.
    pub best: Checkpoint<T>,
    /// State after the last epoch.
    pub last: Checkpoint<T>,
    pub curves: Vec<EpochRecord>,
    /// `‖E Eᵀ − I‖∞` after every optimizer step.
    pub orthonormality: Vec<f64>,
    /// Training videos skipped for being shorter than a clip.
    pub skipped: Vec<usize>,
}

fn usable_indices<T: Scalar>(videos: &[Video<T>], len: usize, kind: &str) -> Vec<usize> {
    videos
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            if v.frames() < len {
                log::warn!("skipping {kind} video {i}: {} frames < clip length {len}", v.frames());
                None
            } else {
                Some(i)
            }
        })
        .collect()
}

fn mean_loss<T: Scalar>(
    pool: &rayon::ThreadPool,
    model: &Model<T>,
    videos: &[Video<T>],
    specs: &[ClipSpec],
    len: usize,
    crop: usize,
    loss: &LossConfig,
) -> Result<f64> {
    let losses = pool.install(|| {
        specs
            .par_iter()
            .map(|s| clip_loss(model, &materialize(videos, s, len, crop)?, loss))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains from scratch, or from `resume` when given.
pub fn train<T: Scalar>(
    train_set: &[Video<T>],
    valid_set: &[Video<T>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint<T>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let threads = if cfg.strict_deterministic { 1 } else { cfg.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    train_inner(train_set, valid_set, model_cfg, cfg, resume, &pool, &mut on_epoch)
}

fn train_inner<T: Scalar>(
    train_set: &[Video<T>],
    valid_set: &[Video<T>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint<T>>,
    pool: &rayon::ThreadPool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    let len = cfg.clip_length;
    let crop = cfg.crop_for(model_cfg);
    let usable = usable_indices(train_set, len, "training");
    let skipped: Vec<usize> = (0..train_set.len()).filter(|i| !usable.contains(i)).collect();
    let valid_usable = usable_indices(valid_set, len, "validation");
    if usable.is_empty() || valid_usable.is_empty() {
        return Err(Error::Data(format!("no video has at least {len} frames")));
    }

    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(u64::MAX);
    let val_specs = sample_specs(valid_set, &valid_usable, len, crop, &mut val_rng)?;

    let adam_cfg = AdamConfig::with_learning_rate(cfg.learning_rate);
    let (mut model, mut adam, first_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.model.config() != model_cfg {
                return Err(Error::Config("resumed checkpoint has a different model config".into()));
            }
            let adam = match ckpt.optimizer {
                Some(a) => a,
                None => Adam::new(adam_cfg, ckpt.model.params()),
            };
            (ckpt.model, adam, ckpt.epoch + 1)
        }
        None => {
            let model = Model::new(model_cfg.clone())?;
            let adam = Adam::new(adam_cfg, model.params());
            (model, adam, 1)
        }
    };

    let snapshot = |model: &Model<T>, adam: &Adam<T>, epoch: usize, val: f64| Checkpoint {
        model: model.clone(),
        step: adam.step_count(),
        epoch,
        val_loss: Some(val),
        optimizer: Some(adam.clone()),
    };

    let mut curves = Vec::new();
    let mut orthonormality = Vec::new();
    let initial_val = mean_loss(pool, &model, valid_set, &val_specs, len, crop, &cfg.loss)?;
    let initial = EpochRecord {
        epoch: first_epoch - 1,
        train_loss: None,
        val_loss: initial_val,
        max_orthonormality_error: orthonormality_error(&model.basis()?),
    };
    on_epoch(&initial);
    curves.push(initial);
    let mut best = snapshot(&model, &adam, first_epoch - 1, initial_val);

    for epoch in first_epoch..first_epoch + cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut specs = sample_specs(train_set, &usable, len, crop, &mut rng)?;
        specs.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut worst_ortho: f64 = 0.0;
        for (batch_idx, batch) in specs.chunks(cfg.batch_size).enumerate() {
            let step = adam.step_count() as usize + 1;
            let diverged = |reason: String| Error::Divergence { epoch, step, reason };
            let results = pool
                .install(|| {
                    batch
                        .par_iter()
                        .map(|s| clip_loss_and_grads(&model, &materialize(train_set, s, len, crop)?, &cfg.loss))
                        .collect::<Result<Vec<_>>>()
                })
                .map_err(|e| match e {
                    Error::RankDeficient { .. } => diverged(e.to_string()),
                    other => other,
                })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor<T>> = model
                .params()
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi);
                }
            }
            for g in &mut grads {
                *g = g.map(|x| x * T::lit(scale));
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(diverged(format!("loss is {batch_loss} in batch {batch_idx}")));
            }
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|x| x.as_f64() * x.as_f64())
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() || norm > cfg.grad_norm_limit {
                return Err(diverged(format!("gradient norm {norm:e}")));
            }
            adam.update(model.params_mut(), &grads)?;
            let ortho = orthonormality_error(&model.basis().map_err(|e| diverged(e.to_string()))?);
            if !(ortho <= ORTHONORMALITY_TOLERANCE) {
                return Err(diverged(format!("basis orthonormality error {ortho:e}")));
            }
            orthonormality.push(ortho);
            worst_ortho = worst_ortho.max(ortho);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let val = mean_loss(pool, &model, valid_set, &val_specs, len, crop, &cfg.loss)?;
        if !val.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: adam.step_count() as usize,
                reason: format!("validation loss is {val}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: Some(epoch_loss / specs.len() as f64),
            val_loss: val,
            max_orthonormality_error: worst_ortho,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {val:.4}",
            record.train_loss.unwrap_or(f64::NAN)
        );
        on_epoch(&record);
        curves.push(record);
        if val < best.val_loss.unwrap_or(f64::INFINITY) {
            best = snapshot(&model, &adam, epoch, val);
        }
    }
    let last_epoch = first_epoch + cfg.epochs - 1;
    let last_val = curves.last().map(|r| r.val_loss).unwrap_or(f64::NAN);
    let last = snapshot(&model, &adam, last_epoch, last_val);
    Ok(TrainOutcome {
        best,
        last,
        curves,
        orthonormality,
        skipped,
    })
}

/// Deterministic split of `n` items into (train, validation) index lists.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let mut valid = idx.split_off(n - n_val);
    idx.sort_unstable();
    valid.sort_unstable();
    (idx, valid)
}
