//! Grayscale video clips and the preprocessing / augmentation pipeline.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::resize;
use crate::error::{Error, Result};
use crate::field::Image;
use crate::scalar::Scalar;

/// `T × H × W` frames, row-major per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Video<T> {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Video<T> {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Data(format!("empty video {frames}x{height}x{width}")));
        }
        if data.len() != frames * height * width {
            return Err(Error::Shape(format!(
                "video {frames}x{height}x{width} needs {} values, got {}",
                frames * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("video has non-finite values".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn from_frames(frames: &[Image<T>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Data("empty video".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(frames.len() * h * w);
        for f in frames {
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::Shape("frames differ in size".into()));
            }
            data.extend_from_slice(f.data());
        }
        Self::new(frames.len(), h, w, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn frame_slice(&self, t: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> Image<T> {
        Image::new(self.height, self.width, self.frame_slice(t).to_vec()).expect("validated video")
    }

    /// Frames `start..start + len`, cropped to the given window.
    pub fn clip(&self, start: usize, len: usize, roi: CropBox) -> Result<Self> {
        if start + len > self.frames || len == 0 {
            return Err(Error::Data(format!(
                "clip {start}..{} outside {} frames",
                start + len,
                self.frames
            )));
        }
        roi.check_within(self.height, self.width)?;
        let mut data = Vec::with_capacity(len * roi.height * roi.width);
        for t in start..start + len {
            let f = self.frame_slice(t);
            for i in roi.top..roi.top + roi.height {
                data.extend_from_slice(&f[i * self.width + roi.left..][..roi.width]);
            }
        }
        Self::new(len, roi.height, roi.width, data)
    }

    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = vec![T::zero(); self.frames * height * width];
        resize(&self.data, self.frames, self.height, self.width, height, width, &mut data);
        Self {
            frames: self.frames,
            height,
            width,
            data,
        }
    }

    /// Keeps every `factor`-th frame starting at frame 0.
    pub fn temporally_downsampled(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let keep: Vec<usize> = (0..self.frames).step_by(factor).collect();
        let mut data = Vec::with_capacity(keep.len() * self.height * self.width);
        for &t in &keep {
            data.extend_from_slice(self.frame_slice(t));
        }
        Self {
            frames: keep.len(),
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Min–max rescaling to `[0, 1]`; a constant video is clamped instead.
    pub fn normalized(&self) -> Self {
        let lo = self.data.iter().copied().fold(T::infinity(), T::min);
        let hi = self.data.iter().copied().fold(T::neg_infinity(), T::max);
        let span = hi - lo;
        let data = if span > T::zero() {
            self.data.iter().map(|&v| (v - lo) / span).collect()
        } else {
            self.data.iter().map(|&v| v.max(T::zero()).min(T::one())).collect()
        };
        Self {
            data,
            ..self.clone()
        }
    }

    /// Exact clockwise rotation by `quarter_turns × 90°`.
    pub fn rotated_cw(&self, quarter_turns: usize) -> Result<Self> {
        let k = quarter_turns % 4;
        if k == 0 {
            return Ok(self.clone());
        }
        if self.height != self.width {
            return Err(Error::Shape(format!(
                "rotation needs square frames, got {}x{}",
                self.height, self.width
            )));
        }
        let n = self.height;
        let mut data = vec![T::zero(); self.data.len()];
        for t in 0..self.frames {
            let src = self.frame_slice(t);
            let dst = &mut data[t * n * n..(t + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    let (si, sj) = rotate_source(i, j, n, k);
                    dst[i * n + j] = src[si * n + sj];
                }
            }
        }
        Ok(Self {
            data,
            ..self.clone()
        })
    }

    /// The 0°, 90°, 180° and 270° clockwise rotations.
    pub fn rotation_augment(&self) -> Result<[Self; 4]> {
        Ok([
            self.clone(),
            self.rotated_cw(1)?,
            self.rotated_cw(2)?,
            self.rotated_cw(3)?,
        ])
    }

    pub fn cast<U: Scalar>(&self) -> Video<U> {
        Video {
            frames: self.frames,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Source pixel of destination `(i, j)` after `k` clockwise quarter turns.
#[inline]
pub(crate) fn rotate_source(i: usize, j: usize, n: usize, k: usize) -> (usize, usize) {
    match k % 4 {
        0 => (i, j),
        1 => (n - 1 - j, i),
        2 => (n - 1 - i, n - 1 - j),
        _ => (j, n - 1 - i),
    }
}

/// Rotates a single square plane clockwise by `k` quarter turns.
pub fn rotate_plane_cw<T: Copy>(src: &[T], n: usize, k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = rotate_source(i, j, n, k);
            out.push(src[si * n + sj]);
        }
    }
    out
}

/// Rectangular region of interest in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || self.top + self.height > height
            || self.left + self.width > width
        {
            return Err(Error::Data(format!(
                "crop {:?} outside {}x{} frame",
                self, height, width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessMode {
    Train,
    Test,
}

/// Output geometry of [`preprocess_video`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    /// Square side after resizing in training mode (crops are taken later).
    pub train_size: usize,
    /// Square side in test mode; equals the model input size.
    pub test_size: usize,
    pub temporal_downsample: usize,
}

impl PreprocessSpec {
    /// Training resize keeps the `156 / 128` ratio between the resized
    /// frame and the crop fed to the model.
    pub fn for_input_size(input_size: usize) -> Self {
        Self {
            train_size: (input_size * 156).div_ceil(128),
            test_size: input_size,
            temporal_downsample: 2,
        }
    }
}

/// Crop, resize and rescale a raw video. Training mode also drops every
/// other frame (by `temporal_downsample`).
pub fn preprocess_video<T: Scalar>(
    raw: &Video<T>,
    roi: CropBox,
    mode: PreprocessMode,
    spec: &PreprocessSpec,
) -> Result<Video<T>> {
    roi.check_within(raw.height, raw.width)?;
    let cropped = raw.clip(0, raw.frames, roi)?;
    let out = match mode {
        PreprocessMode::Train => cropped
            .resized(spec.train_size, spec.train_size)
            .temporally_downsampled(spec.temporal_downsample),
        PreprocessMode::Test => cropped.resized(spec.test_size, spec.test_size),
    };
    Ok(out.normalized())
}
