//! Procedural audio-video-text corpora with known ground truth.
//!
//! Each clip holds one sound class placed at a few event times. Audio
//! events are short harmonic bursts; the video carries a contact
//! indicator at the event frame, motion cues on the neighbouring frames
//! and a weak, noisy class-identity channel. The AV corpus is brick-wall
//! band-limited at a third of the sample rate and tagged low quality; the
//! SFX corpus is full band, tagged high quality and has no video.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, WavFormat, Waveform};
use crate::dsp::brickwall_lowpass;
use crate::encoders::{
    fnv1a64, write_features, Caption, DatasetSource, Manifest, ManifestRecord, QualityTag, VideoClip,
};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const MIN_EVENT_GAP_S: f64 = 0.25;
pub const MAX_EVENTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundClass {
    pub name: String,
    /// `(frequency_hz, amplitude)` partials.
    pub partials: Vec<(f64, f64)>,
}

/// Four spectrally disjoint classes. Every partial is a multiple of 40 Hz
/// and each class has one partial above 16 kHz / 3, so band-limiting
/// removes audible content.
pub fn default_classes() -> Vec<SoundClass> {
    let c = |name: &str, p: &[(f64, f64)]| SoundClass {
        name: name.to_string(),
        partials: p.to_vec(),
    };
    vec![
        c("tone-A", &[(440.0, 0.5), (880.0, 0.25), (6000.0, 0.3)]),
        c("tone-B", &[(600.0, 0.5), (1800.0, 0.25), (6400.0, 0.3)]),
        c("buzz", &[(240.0, 0.4), (720.0, 0.3), (1200.0, 0.2), (6800.0, 0.3)]),
        c("chime", &[(1000.0, 0.4), (2520.0, 0.3), (4200.0, 0.2), (7200.0, 0.3)]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventScript {
    pub category: usize,
    pub event_times: Vec<f64>,
    pub duration_s: f64,
}

impl EventScript {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.category >= n_classes {
            return Err(invalid(format!("category {} of {n_classes}", self.category)));
        }
        let n = self.event_times.len();
        if n == 0 || n > MAX_EVENTS {
            return Err(invalid(format!("{n} events (allowed 1..={MAX_EVENTS})")));
        }
        for w in self.event_times.windows(2) {
            if w[1] - w[0] < MIN_EVENT_GAP_S - 1e-9 {
                return Err(invalid(format!("events at {} and {} are closer than {MIN_EVENT_GAP_S} s", w[0], w[1])));
            }
        }
        if self.event_times.iter().any(|&t| !(0.0..self.duration_s).contains(&t)) {
            return Err(invalid("event time outside the clip"));
        }
        Ok(())
    }

    /// Video frame index of each event.
    pub fn event_frames(&self, fps: u32) -> Vec<usize> {
        self.event_times.iter().map(|t| (t * fps as f64).floor() as usize).collect()
    }
}

/// Video feature layout of synthetic clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoStyle {
    pub dim: usize,
    pub contact: f64,
    pub motion: f64,
    pub class_amp: f64,
    pub class_noise: f64,
    pub texture: f64,
    pub jitter: f64,
}

impl Default for VideoStyle {
    fn default() -> Self {
        Self {
            dim: 512,
            contact: 1.0,
            motion: 0.5,
            class_amp: 0.3,
            class_noise: 0.15,
            texture: 0.1,
            jitter: 0.02,
        }
    }
}

const CONTACT_DIMS: std::ops::Range<usize> = 0..8;
const MOTION_DIMS: std::ops::Range<usize> = 8..16;
const CLASS_DIMS: std::ops::Range<usize> = 16..48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub source: DatasetSource,
    pub n_clips: usize,
    pub classes: Vec<SoundClass>,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub fps: u32,
    pub band_limit_hz: Option<f64>,
    pub min_events: usize,
    pub max_events: usize,
    pub event_len_s: f64,
    pub noise_floor: f64,
    pub video: VideoStyle,
    pub seed: u64,
}

impl CorpusSpec {
    /// Band-limited audio-video corpus tagged low quality.
    pub fn av(n_clips: usize, seed: u64) -> Self {
        Self {
            source: DatasetSource::Av,
            n_clips,
            classes: default_classes(),
            sample_rate: 16000,
            duration_s: 8.0,
            fps: 8,
            band_limit_hz: Some(16000.0 / 3.0),
            min_events: 2,
            max_events: 6,
            event_len_s: 0.125,
            noise_floor: 0.002,
            video: VideoStyle::default(),
            seed,
        }
    }

    /// Full-band audio-text corpus tagged high quality.
    pub fn sfx(n_clips: usize, seed: u64) -> Self {
        Self {
            source: DatasetSource::Sfx,
            band_limit_hz: None,
            ..Self::av(n_clips, seed)
        }
    }

    pub fn quality(&self) -> QualityTag {
        match self.source {
            DatasetSource::Av => QualityTag::Low,
            DatasetSource::Sfx => QualityTag::High,
        }
    }

    pub fn n_video_frames(&self) -> usize {
        (self.duration_s * self.fps as f64).round() as usize
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(invalid("corpus needs at least one clip"));
        }
        if self.classes.is_empty() {
            return Err(invalid("corpus needs at least one class"));
        }
        if let Some(b) = self.band_limit_hz {
            if !(b > 0.0 && b < self.sample_rate as f64 / 2.0) {
                return Err(invalid(format!("band limit {b} Hz must lie below Nyquist")));
            }
        }
        if self.min_events == 0 || self.min_events > self.max_events || self.max_events > MAX_EVENTS {
            return Err(invalid("event count range must lie in 1..=8"));
        }
        if self.event_len_s >= MIN_EVENT_GAP_S {
            return Err(invalid("events must be shorter than the minimum gap"));
        }
        if self.video.dim < CLASS_DIMS.end {
            return Err(invalid(format!("video width must be at least {}", CLASS_DIMS.end)));
        }
        Ok(())
    }

    fn tag(&self) -> &'static str {
        match self.source {
            DatasetSource::Av => "av",
            DatasetSource::Sfx => "sfx",
        }
    }

    pub fn clip_seed(&self, index: usize) -> u64 {
        fnv1a64(&format!("{}:{}:{}", self.tag(), self.seed, index))
    }
}

#[derive(Clone, Debug)]
pub struct SynthClip<T> {
    pub id: String,
    pub script: EventScript,
    pub audio: Waveform,
    pub video: Option<VideoClip<T>>,
    pub caption: Caption,
    pub source: DatasetSource,
    pub high_correspondence: bool,
    pub seed: u64,
}

impl<T> SynthClip<T> {
    pub fn category<'a>(&self, spec: &'a CorpusSpec) -> &'a str {
        &spec.classes[self.script.category].name
    }
}

/// Random script on the video-frame grid with gaps of at least two frames.
pub fn random_script<R: Rng + ?Sized>(spec: &CorpusSpec, category: usize, rng: &mut R) -> EventScript {
    let t_v = spec.n_video_frames();
    let min_gap = (MIN_EVENT_GAP_S * spec.fps as f64).ceil() as usize;
    let tail = (spec.event_len_s * spec.fps as f64).ceil() as usize;
    loop {
        let n = rng.random_range(spec.min_events..=spec.max_events);
        let mut frames: Vec<usize> = (1..t_v.saturating_sub(tail)).collect();
        frames.shuffle(rng);
        let mut chosen: Vec<usize> = Vec::new();
        for f in frames {
            if chosen.iter().all(|&c| c.abs_diff(f) >= min_gap) {
                chosen.push(f);
                if chosen.len() == n {
                    break;
                }
            }
        }
        if chosen.len() < n {
            continue;
        }
        chosen.sort_unstable();
        let script = EventScript {
            category,
            event_times: chosen.iter().map(|&f| f as f64 / spec.fps as f64).collect(),
            duration_s: spec.duration_s,
        };
        if script.validate(spec.classes.len()).is_ok() {
            return script;
        }
    }
}

/// Envelope-shaped burst of the class partials, `len` samples long.
pub fn event_template(class: &SoundClass, sample_rate: u32, len: usize) -> Vec<f64> {
    let attack = (sample_rate as usize / 500).max(1);
    let release = (sample_rate as usize / 100).min(len / 2).max(1);
    let peak: f64 = class.partials.iter().map(|p| p.1).sum();
    let gain = 0.6 / peak.max(1e-9);
    (0..len)
        .map(|n| {
            let env = if n < attack {
                0.5 - 0.5 * (PI * n as f64 / attack as f64).cos()
            } else if n >= len - release {
                0.5 + 0.5 * (PI * (n - (len - release)) as f64 / release as f64).cos()
            } else {
                1.0
            };
            let t = n as f64 / sample_rate as f64;
            let s: f64 = class.partials.iter().map(|&(f, a)| a * (2.0 * PI * f * t).sin()).sum();
            gain * env * s
        })
        .collect()
}

fn class_direction(category: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&format!("class-direction:{category}")));
    let v: Vec<f64> = CLASS_DIMS.map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Renders audio, video and caption for one script.
pub fn synth_clip<T: Scalar>(script: &EventScript, spec: &CorpusSpec, seed: u64) -> Result<(Waveform, Option<VideoClip<T>>, Caption)> {
    spec.validate()?;
    script.validate(spec.classes.len())?;
    let frames = script.event_frames(spec.fps);
    if frames.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("events collide after discretisation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = spec.sample_rate;
    let n = spec.n_samples();
    let mut x: Vec<f64> = (0..n).map(|_| spec.noise_floor * rng.sample::<f64, _>(StandardNormal)).collect();
    let class = &spec.classes[script.category];
    let ev_len = (spec.event_len_s * sr as f64).round() as usize;
    let tpl = event_template(class, sr, ev_len);
    for &t in &script.event_times {
        let start = (t * sr as f64).round() as usize;
        for (i, &v) in tpl.iter().enumerate() {
            if let Some(s) = x.get_mut(start + i) {
                *s += v;
            }
        }
    }
    if let Some(cut) = spec.band_limit_hz {
        x = brickwall_lowpass(&x, sr, cut);
    }
    let audio = Waveform::new(x.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(), sr)?;

    let video = match spec.source {
        DatasetSource::Sfx => None,
        DatasetSource::Av => {
            let st = &spec.video;
            let t_v = spec.n_video_frames();
            let dir = class_direction(script.category);
            let texture: Vec<f64> = (0..st.dim).map(|_| st.texture * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut m = Mat::<f64>::zeros(t_v, st.dim);
            for r in 0..t_v {
                for c in CLASS_DIMS {
                    let v = st.class_amp * dir[c - CLASS_DIMS.start] + st.class_noise * rng.sample::<f64, _>(StandardNormal);
                    m.set(r, c, v);
                }
                for c in CLASS_DIMS.end..st.dim {
                    m.set(r, c, texture[c] + st.jitter * rng.sample::<f64, _>(StandardNormal));
                }
            }
            for &f in &frames {
                for c in CONTACT_DIMS {
                    m.set(f, c, st.contact);
                }
                for nb in [f.wrapping_sub(1), f + 1] {
                    if nb < t_v {
                        for c in MOTION_DIMS {
                            let v = m.at(nb, c).max(st.motion);
                            m.set(nb, c, v);
                        }
                    }
                }
            }
            Some(VideoClip {
                frames: m.cast(),
                fps: spec.fps,
                duration_s: spec.duration_s,
            })
        }
    };
    Ok((audio, video, Caption::new(class.name.clone(), spec.quality())))
}

/// Clip `i` belongs to class `i mod K`; every fourth instance of each class
/// is flagged high-correspondence.
pub fn generate_corpus<T: Scalar>(spec: &CorpusSpec) -> Result<Vec<SynthClip<T>>> {
    spec.validate()?;
    let k = spec.classes.len();
    (0..spec.n_clips)
        .map(|i| {
            let seed = spec.clip_seed(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let category = i % k;
            let script = random_script(spec, category, &mut rng);
            let (audio, video, caption) = synth_clip(&script, spec, rng.random())?;
            Ok(SynthClip {
                id: format!("{}-{i:05}", spec.tag()),
                script,
                audio,
                video,
                caption,
                source: spec.source,
                high_correspondence: (i / k).is_multiple_of(4),
                seed,
            })
        })
        .collect()
}

/// Writes WAV and video-frame files under `out_dir` plus `manifest.jsonl`.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    let clips = generate_corpus::<f32>(spec)?;
    let mut records = Vec::with_capacity(clips.len());
    for c in &clips {
        let audio_rel = format!("audio/{}.wav", c.id);
        write_wav(&out_dir.join(&audio_rel), &c.audio, WavFormat::Float32)?;
        let video_rel = match &c.video {
            Some(v) => {
                let rel = format!("video/{}.feat", c.id);
                write_features(&out_dir.join(&rel), &v.frames)?;
                Some(rel)
            }
            None => None,
        };
        records.push(ManifestRecord {
            id: c.id.clone(),
            source: c.source,
            category: c.category(spec).to_string(),
            quality: c.caption.quality,
            caption: c.caption.render().unwrap_or_default(),
            audio: Some(audio_rel),
            video: video_rel,
            synth_seed: Some(c.seed),
            sample_rate: spec.sample_rate,
            fps: spec.fps,
            duration_s: spec.duration_s,
            event_times: c.script.event_times.clone(),
            high_correspondence: c.high_correspondence,
        });
    }
    let manifest = Manifest { records };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
