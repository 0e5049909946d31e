//! On-disk dataset layout: one directory per video holding numbered
//! grayscale PNG frames and a `meta.json` record.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::{GroundTruth, SynthEntry, SynthParams, SynthRanges};
use crate::video::{CropBox, Video};

pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub id: String,
    pub fps: f64,
    /// Clockwise degrees; the orientation bin is `orientation / 45`.
    pub orientation: u32,
    pub num_frames: usize,
    pub crop: CropBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthParams>,
}

impl VideoMeta {
    pub fn orientation_bin(&self) -> usize {
        (self.orientation / 45) as usize % 8
    }
}

/// Seeds and parameter draws of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub ranges: SynthRanges,
    pub videos: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub params: SynthParams,
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

/// Writes a 16-bit grayscale PNG; values are clamped to `[0, 1]`.
pub fn write_png<T: Scalar>(path: &Path, height: usize, width: usize, pixels: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let png_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    let mut bytes = Vec::with_capacity(pixels.len() * 2);
    for &p in pixels {
        let v = (p.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a PNG as luminance in `[0, 1]`, returning `(height, width, pixels)`.
pub fn read_png<T: Scalar>(path: &Path) -> Result<(usize, usize, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let png_err = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Data(format!("{}: unsupported color {other:?}", path.display()))),
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |k: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * k], buf[2 * k + 1]]) as f64 / 65535.0
        } else {
            buf[k] as f64 / 255.0
        }
    };
    let pixels = (0..h * w)
        .map(|p| {
            let base = p * channels;
            let v = if channels >= 3 {
                0.299 * sample(base) + 0.587 * sample(base + 1) + 0.114 * sample(base + 2)
            } else {
                sample(base)
            };
            T::lit(v)
        })
        .collect();
    Ok((h, w, pixels))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `video` into `dir` (created if missing).
pub fn write_video<T: Scalar>(dir: &Path, meta: &VideoMeta, video: &Video<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..video.frames() {
        write_png(&dir.join(frame_name(t)), video.height(), video.width(), video.frame_slice(t))?;
    }
    write_json(&dir.join(META_FILE), meta)
}

/// Reads only the metadata record of a video directory.
pub fn read_meta(dir: &Path) -> Result<VideoMeta> {
    read_json(&dir.join(META_FILE))
}

/// Metadata of every video under `root`, in directory-name order.
pub fn load_metas(root: &Path) -> Result<Vec<VideoMeta>> {
    list_videos(root)?.iter().map(|d| read_meta(d)).collect()
}

/// Reads one video directory.
pub fn read_video<T: Scalar>(dir: &Path) -> Result<(VideoMeta, Video<T>)> {
    let meta = read_meta(dir)?;
    let mut frames = Vec::new();
    let mut data = Vec::new();
    let (mut height, mut width) = (0, 0);
    loop {
        let path = dir.join(frame_name(frames.len()));
        if !path.exists() {
            break;
        }
        let (h, w, px) = read_png::<T>(&path)?;
        if frames.is_empty() {
            (height, width) = (h, w);
        } else if (h, w) != (height, width) {
            return Err(Error::Data(format!("{}: frame size changes", path.display())));
        }
        data.extend(px);
        frames.push(path);
    }
    if frames.len() != meta.num_frames {
        return Err(Error::Data(format!(
            "{}: meta declares {} frames, found {}",
            dir.display(),
            meta.num_frames,
            frames.len()
        )));
    }
    meta.crop.check_within(height, width)?;
    Ok((meta, Video::new(frames.len(), height, width, data)?))
}

/// Sorted video directories under `root`.
pub fn list_videos(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: no video directories", root.display())));
    }
    Ok(dirs)
}

/// Reads every video under `root`, in directory-name order.
pub fn load_dataset<T: Scalar>(root: &Path) -> Result<Vec<(VideoMeta, Video<T>)>> {
    list_videos(root)?.iter().map(|d| read_video(d)).collect()
}

/// Metadata record of a generated video.
pub fn synth_meta<T: Scalar>(entry: &SynthEntry<T>) -> VideoMeta {
    VideoMeta {
        id: entry.id.clone(),
        fps: entry.params.fps,
        orientation: entry.params.orientation,
        num_frames: entry.video.frames(),
        crop: CropBox::full(entry.video.height(), entry.video.width()),
        ground_truth: Some(entry.truth.clone()),
        synth: Some(entry.params.clone()),
    }
}

/// Writes generated videos and the manifest under `root`.
pub fn write_synth_dataset<T: Scalar>(
    root: &Path,
    entries: &[SynthEntry<T>],
    ranges: &SynthRanges,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for e in entries {
        write_video(&root.join(&e.id), &synth_meta(e), &e.video)?;
    }
    let manifest = Manifest {
        seed,
        ranges: ranges.clone(),
        videos: entries
            .iter()
            .map(|e| ManifestEntry {
                id: e.id.clone(),
                params: e.params.clone(),
            })
            .collect(),
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)
}
