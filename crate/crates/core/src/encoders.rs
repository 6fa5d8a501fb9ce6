//! Frozen condition encoders (video and text), caption construction with
//! quality tags, and video-to-latent-rate feature alignment.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Dataset-level quality tag appended to captions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityTag {
    Low,
    High,
    None,
}

impl QualityTag {
    pub fn phrase(self) -> Option<&'static str> {
        match self {
            QualityTag::Low => Some("low quality"),
            QualityTag::High => Some("high quality"),
            QualityTag::None => None,
        }
    }
}

/// Caption body plus quality tag. An empty caption stands for the null
/// text condition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub body: Option<String>,
    pub quality: QualityTag,
}

impl Caption {
    pub fn new(body: impl Into<String>, quality: QualityTag) -> Self {
        Self {
            body: Some(body.into()),
            quality,
        }
    }

    pub fn null() -> Self {
        Self {
            body: None,
            quality: QualityTag::None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.render().is_none()
    }

    /// `"body, low quality"`, `"low quality"`, `"body"`, or `None` for the
    /// null caption.
    pub fn render(&self) -> Option<String> {
        let body = self.body.as_deref().filter(|b| !b.trim().is_empty());
        match (body, self.quality.phrase()) {
            (Some(b), Some(q)) => Some(format!("{b}, {q}")),
            (Some(b), None) => Some(b.to_string()),
            (None, Some(q)) => Some(q.to_string()),
            (None, None) => None,
        }
    }

    /// Same caption with the quality tag replaced.
    pub fn with_quality(&self, quality: QualityTag) -> Self {
        Self {
            body: self.body.clone(),
            quality,
        }
    }
}

/// Builds one of the four caption variants (full, tag-only, caption-only,
/// null) for a training or inference example.
pub fn make_caption(category: &str, quality: QualityTag, drop_caption: bool, drop_tag: bool) -> Result<Caption> {
    if !drop_caption && category.trim().is_empty() {
        return Err(invalid("category must be non-empty unless the caption is dropped"));
    }
    Ok(Caption {
        body: (!drop_caption).then(|| category.to_string()),
        quality: if drop_tag { QualityTag::None } else { quality },
    })
}

/// Frame sequence of a video. Toy clips carry low-dimensional frame
/// features directly (`T_v x C_pix`).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip<T> {
    pub frames: Mat<T>,
    pub fps: u32,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures<T> {
    pub feats: Mat<T>,
    pub fps: u32,
}

/// Frozen stand-in for a pretrained visual encoder: a fixed orthonormal
/// mixing of frame features into `C_v` channels.
#[derive(Clone, Debug)]
pub struct VideoEncoder<T> {
    pub fps: u32,
    pub feature_dim: usize,
    mixing: Mat<T>,
}

impl<T: Scalar> VideoEncoder<T> {
    pub fn new(input_dim: usize, feature_dim: usize, fps: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Mat<f64> = Mat::randn(feature_dim.max(input_dim), feature_dim.max(input_dim), 1.0, &mut rng);
        let q = orthonormal_columns(&raw);
        let mixing = Mat::from_fn(input_dim, feature_dim, |r, c| T::c(q.at(r, c)));
        Self {
            fps,
            feature_dim,
            mixing,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mixing.rows
    }

    pub fn encode_video(&self, clip: &VideoClip<T>) -> Result<VideoFeatures<T>> {
        if clip.fps != self.fps {
            return Err(invalid(format!("clip fps {} but encoder expects {}", clip.fps, self.fps)));
        }
        let expected = (clip.duration_s * clip.fps as f64).round() as usize;
        if clip.frames.rows != expected {
            return Err(invalid(format!(
                "{} frames for a {} s clip at {} fps (expected {expected})",
                clip.frames.rows, clip.duration_s, clip.fps
            )));
        }
        if clip.frames.cols != self.mixing.rows {
            return Err(Error::Shape(format!(
                "frame width {} but encoder takes {}",
                clip.frames.cols, self.mixing.rows
            )));
        }
        Ok(VideoFeatures {
            feats: clip.frames.matmul(&self.mixing),
            fps: clip.fps,
        })
    }

    /// Pixel adapter: `T_v x 3 x H x W` frames are average-pooled to a
    /// channel grid that fills the encoder input width.
    pub fn encode_pixels(&self, pixels: &[T], t_v: usize, h: usize, w: usize, duration_s: f64) -> Result<VideoFeatures<T>> {
        if pixels.len() != t_v * 3 * h * w {
            return Err(Error::Shape(format!("expected {} pixel values", t_v * 3 * h * w)));
        }
        let dim = self.mixing.rows;
        let per_frame = 3 * h * w;
        let frames = Mat::from_fn(t_v, dim, |r, c| {
            let lo = c * per_frame / dim;
            let hi = ((c + 1) * per_frame / dim).max(lo + 1).min(per_frame);
            let s: T = pixels[r * per_frame + lo..r * per_frame + hi].iter().copied().sum();
            s / T::from_usize(hi - lo).unwrap()
        });
        self.encode_video(&VideoClip {
            frames,
            fps: self.fps,
            duration_s,
        })
    }
}

fn orthonormal_columns(m: &Mat<f64>) -> Mat<f64> {
    let (rows, cols) = m.shape();
    let mut q = m.clone();
    for c in 0..cols {
        for p in 0..c {
            let dot: f64 = (0..rows).map(|r| q.at(r, c) * q.at(r, p)).sum();
            for r in 0..rows {
                let v = q.at(r, c) - dot * q.at(r, p);
                q.set(r, c, v);
            }
        }
        let n = (0..rows).map(|r| q.at(r, c).powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            let v = q.at(r, c) / n;
            q.set(r, c, v);
        }
    }
    q
}

/// Nearest-neighbour repeat of video feature rows up to `target_len`
/// (which must be an integer multiple of the row count).
pub fn align_video_features<T: Scalar>(vf: &VideoFeatures<T>, target_len: usize) -> Result<Mat<T>> {
    let t_v = vf.feats.rows;
    if t_v == 0 || !target_len.is_multiple_of(t_v) {
        return Err(invalid(format!("cannot align {t_v} video rows to {target_len} latent frames")));
    }
    let factor = target_len / t_v;
    let mut out = Mat::zeros(target_len, vf.feats.cols);
    for r in 0..target_len {
        out.row_mut(r).copy_from_slice(vf.feats.row(r / factor));
    }
    Ok(out)
}

/// Token embeddings of a caption (`T_t x C_t`).
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub tokens: Mat<T>,
    pub pad_mask: Vec<bool>,
}

/// Text condition: embedded tokens or the null text condition, which the
/// denoiser realises with its learned null token.
#[derive(Clone, Debug, PartialEq)]
pub enum TextCond<T> {
    Null,
    Embedded(TextEmbedding<T>),
}

impl<T> TextCond<T> {
    pub fn is_null(&self) -> bool {
        matches!(self, TextCond::Null)
    }
}

/// Frozen hash-embedding text encoder. Tokens are whitespace-separated
/// words; punctuation stays attached to its word and is embedded as an
/// additive marker on the word's row.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoder {
    fn default() -> Self {
        Self { dim: 768, max_len: 64 }
    }
}

impl TextEncoder {
    pub fn new(dim: usize, max_len: usize) -> Self {
        Self { dim, max_len }
    }

    pub fn tokenize(text: &str) -> Vec<&str> {
        text.split_whitespace().collect()
    }

    pub fn encode_text<T: Scalar>(&self, caption: &Caption) -> TextCond<T> {
        match caption.render() {
            None => TextCond::Null,
            Some(s) => TextCond::Embedded(self.encode_str(&s)),
        }
    }

    pub fn encode_str<T: Scalar>(&self, text: &str) -> TextEmbedding<T> {
        let mut toks = Self::tokenize(text);
        if toks.len() > self.max_len {
            log::warn!("caption has {} tokens, truncating to {}", toks.len(), self.max_len);
            toks.truncate(self.max_len);
        }
        let mut m = Mat::zeros(toks.len(), self.dim);
        for (r, tok) in toks.iter().enumerate() {
            let word: String = tok.trim_end_matches(|c: char| c.is_ascii_punctuation()).to_lowercase();
            let punct = &tok[tok.trim_end_matches(|c: char| c.is_ascii_punctuation()).len()..];
            let row = hash_vector(&word, self.dim);
            let mark = (!punct.is_empty()).then(|| hash_vector(&format!("<punct:{punct}>"), self.dim));
            for c in 0..self.dim {
                let v = row[c] + mark.as_ref().map_or(0.0, |p| 0.5 * p[c]);
                m.set(r, c, T::c(v));
            }
        }
        TextEmbedding {
            pad_mask: vec![false; m.rows],
            tokens: m,
        }
    }
}

/// FNV-1a, used to seed per-token embedding generators.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn hash_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token));
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Which training corpus a clip belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Paired audio-video clips (band-limited, tagged low quality).
    Av,
    /// Audio-text sound-effect library (full band, tagged high quality).
    Sfx,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub source: DatasetSource,
    pub category: String,
    pub quality: QualityTag,
    pub caption: String,
    pub audio: Option<String>,
    pub video: Option<String>,
    pub synth_seed: Option<u64>,
    pub sample_rate: u32,
    pub fps: u32,
    pub duration_s: f64,
    #[serde(default)]
    pub event_times: Vec<f64>,
    #[serde(default)]
    pub high_correspondence: bool,
}

/// Line-delimited JSON manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serialises"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })?;
            records.push(r);
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_jsonl(&text, path)
    }

    pub fn source(&self, source: DatasetSource) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.source == source).collect()
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"FGFT";

/// Feature file: magic, dtype byte (0 = f32, 1 = f64), three zero bytes,
/// `u32` rows, `u32` cols, little-endian values.
pub fn write_features<T: Scalar>(path: &Path, m: &Mat<T>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + m.len() * std::mem::size_of::<T>());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(if T::DTYPE == "f32" { 0 } else { 1 });
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    out.extend_from_slice(&T::to_le_bytes_vec(&m.data));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads a feature file, converting to `T` if stored at the other width.
pub fn read_features<T: Scalar>(path: &Path) -> Result<Mat<T>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |d: &str| Error::Format {
        path: path.to_path_buf(),
        detail: d.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing FGFT magic"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    match bytes[4] {
        0 if body.len() == rows * cols * 4 => Ok(Mat::from_vec(rows, cols, f32::from_le_bytes_slice(body)).cast()),
        1 if body.len() == rows * cols * 8 => Ok(Mat::from_vec(rows, cols, f64::from_le_bytes_slice(body)).cast()),
        0 | 1 => Err(bad("payload size does not match shape")),
        d => Err(bad(&format!("unknown dtype code {d}"))),
    }
}
