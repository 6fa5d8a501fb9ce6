//! Mono waveforms and WAV file I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// On-disk sample encoding for [`write_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    Float32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let w = Self { samples, sample_rate };
        w.validate()?;
        Ok(w)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(invalid("waveform has no samples"));
        }
        if self.sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }

    /// Samples in `[start_s, end_s)`.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> Waveform {
        let sr = self.sample_rate as f64;
        let a = ((start_s * sr).round() as usize).min(self.samples.len());
        let b = ((end_s * sr).round() as usize).clamp(a, self.samples.len());
        Waveform {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Delays the signal by `delta_s` (negative advances), keeping length.
    pub fn shifted(&self, delta_s: f64) -> Waveform {
        let n = self.samples.len() as isize;
        let d = (delta_s * self.sample_rate as f64).round() as isize;
        let samples = (0..n)
            .map(|i| {
                let j = i - d;
                if (0..n).contains(&j) {
                    self.samples[j as usize]
                } else {
                    0.0
                }
            })
            .collect();
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len().max(1) as f64).sqrt()
    }
}

/// Signal-to-noise ratio of `estimate` against `reference`, in dB.
pub fn snr_db(reference: &[f32], estimate: &[f32]) -> f64 {
    let n = reference.len().min(estimate.len());
    let sig: f64 = reference[..n].iter().map(|&s| (s as f64).powi(2)).sum();
    let err: f64 = reference[..n]
        .iter()
        .zip(&estimate[..n])
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    10.0 * (sig / err.max(1e-30)).log10()
}

pub fn write_wav(path: &Path, w: &Waveform, format: WavFormat) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        }
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        match format {
            WavFormat::Pcm16 => {
                let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
                writer.write_sample(v).map_err(wav_err)?;
            }
            WavFormat::Float32 => writer.write_sample(s).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

/// Reads a WAV file, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let full = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / full))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let samples = interleaved
        .chunks(ch)
        .map(|c| c.iter().sum::<f32>() / ch as f32)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}
