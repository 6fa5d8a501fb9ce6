//! End-to-end glue: encoding corpora through the frozen codec and video
//! encoder, and generating audio from trained checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::checkpoint::file_hash;
use crate::codec::{Codec, LatentSequence};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, ConditionBundle, GuidanceMode, GuidanceSpec, NegativePrompt, NoiseSchedule};
use crate::encoders::{
    align_video_features, read_features, Caption, DatasetSource, Manifest, TextEncoder, VideoClip, VideoEncoder,
};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{CorpusSpec, SynthClip};
use crate::tensor::Mat;
use crate::training::{EncodedClip, TrainData, TrainState};

/// Seed of the frozen video encoder shared by training and inference.
pub const VIDEO_ENCODER_SEED: u64 = 0x5eed_0f_71de0;

pub fn default_video_encoder<T: Scalar>(input_dim: usize, feature_dim: usize, fps: u32) -> VideoEncoder<T> {
    VideoEncoder::new(input_dim, feature_dim, fps, VIDEO_ENCODER_SEED)
}

/// Encodes one clip's audio and optional video.
#[allow(clippy::too_many_arguments)]
pub fn encode_clip<T: Scalar>(
    codec: &Codec<T>,
    venc: &VideoEncoder<T>,
    id: &str,
    source: DatasetSource,
    category: &str,
    caption: &Caption,
    audio: &Waveform,
    video: Option<&VideoClip<T>>,
    high_correspondence: bool,
    event_times: &[f64],
) -> Result<EncodedClip<T>> {
    let posterior = codec.posterior(audio)?;
    let video = match video {
        Some(v) => Some(align_video_features(&venc.encode_video(v)?, posterior.mean.rows)?),
        None => None,
    };
    Ok(EncodedClip {
        id: id.to_string(),
        source,
        category: category.to_string(),
        quality: caption.quality,
        posterior,
        video,
        high_correspondence,
        event_times: event_times.to_vec(),
    })
}

/// Encodes in-memory synthetic clips into a training pool.
pub fn encode_synth<T: Scalar>(
    codec: &Codec<T>,
    venc: &VideoEncoder<T>,
    spec: &CorpusSpec,
    clips: &[SynthClip<T>],
) -> Result<Vec<EncodedClip<T>>> {
    clips
        .iter()
        .map(|c| {
            encode_clip(
                codec,
                venc,
                &c.id,
                c.source,
                c.category(spec),
                &c.caption,
                &c.audio,
                c.video.as_ref(),
                c.high_correspondence,
                &c.script.event_times,
            )
        })
        .collect()
}

/// Loads a manifest from disk and encodes every record.
pub fn encode_manifest<T: Scalar>(codec: &Codec<T>, venc: &VideoEncoder<T>, manifest_path: &Path) -> Result<Vec<EncodedClip<T>>> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let audio_rel = r
            .audio
            .as_ref()
            .ok_or_else(|| invalid(format!("record {} has no audio", r.id)))?;
        let audio = read_wav(&root.join(audio_rel))?;
        let video = match &r.video {
            Some(rel) => Some(VideoClip {
                frames: read_features::<T>(&root.join(rel))?,
                fps: r.fps,
                duration_s: r.duration_s,
            }),
            None => None,
        };
        let caption = Caption::new(r.category.clone(), r.quality);
        out.push(encode_clip(
            codec,
            venc,
            &r.id,
            r.source,
            &r.category,
            &caption,
            &audio,
            video.as_ref(),
            r.high_correspondence,
            &r.event_times,
        )?);
    }
    Ok(out)
}

/// Splits encoded clips into the two training pools.
pub fn train_data<T: Scalar>(clips: Vec<EncodedClip<T>>, latent_rate: u32) -> TrainData<T> {
    let (av, sfx) = clips.into_iter().partition(|c| c.source == DatasetSource::Av);
    TrainData { av, sfx, latent_rate }
}

/// A generation request. Durations are in seconds.
#[derive(Clone, Debug)]
pub struct GenerateRequest<T> {
    pub caption: Caption,
    pub negative: NegativePrompt,
    pub mode: GuidanceMode,
    pub gamma: f64,
    pub steps: usize,
    pub duration_s: f64,
    pub video: Option<VideoClip<T>>,
    pub audio_prefix: Option<Waveform>,
    pub seed: u64,
}

impl<T> GenerateRequest<T> {
    pub fn new(caption: Caption, duration_s: f64, seed: u64) -> Self {
        Self {
            caption,
            negative: NegativePrompt::Null,
            mode: GuidanceMode::TextNegative,
            gamma: 4.5,
            steps: 100,
            duration_s,
            video: None,
            audio_prefix: None,
            seed,
        }
    }
}

/// Inference-time bundle of frozen encoders, the codec and the denoiser.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub codec: Codec<T>,
    pub denoiser: Denoiser<T>,
    pub video_encoder: VideoEncoder<T>,
    pub text_encoder: TextEncoder,
    pub schedule: NoiseSchedule,
}

/// Everything needed to reproduce a generated clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub codec_checkpoint: Option<String>,
    pub codec_sha256: Option<String>,
    pub denoiser_checkpoint: Option<String>,
    pub denoiser_sha256: Option<String>,
    pub seed: u64,
    pub gamma: f64,
    pub mode: GuidanceMode,
    pub steps: usize,
    pub caption: Option<String>,
    pub negative: Option<String>,
    pub duration_s: f64,
    pub prefix_frames: usize,
}

impl<T: Scalar> Generator<T> {
    pub fn new(codec: Codec<T>, denoiser: Denoiser<T>, video_input_dim: usize, fps: u32) -> Result<Self> {
        if codec.cfg.latent_dim != denoiser.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "codec latent width {} differs from denoiser width {}",
                codec.cfg.latent_dim, denoiser.cfg.latent_dim
            )));
        }
        let video_encoder = default_video_encoder(video_input_dim, denoiser.cfg.video_dim, fps);
        Ok(Self {
            codec,
            denoiser,
            video_encoder,
            text_encoder: TextEncoder::default(),
            schedule: NoiseSchedule::default_cosine(),
        })
    }

    /// Loads the codec and the EMA weights of a denoiser checkpoint.
    pub fn load(codec_path: &Path, denoiser_path: &Path, video_input_dim: usize, fps: u32) -> Result<Self> {
        let codec = Codec::load(codec_path)?;
        let st = TrainState::<T>::load(denoiser_path, &Default::default())?;
        Self::new(codec, st.ema_model(), video_input_dim, fps)
    }

    /// Latent frames for `duration_s` seconds, rounded up.
    pub fn latent_len(&self, duration_s: f64) -> usize {
        (duration_s * self.codec.cfg.latent_rate as f64 - 1e-9).ceil().max(1.0) as usize
    }

    /// Builds the conditioning bundle for a request.
    pub fn bundle(&self, req: &GenerateRequest<T>) -> Result<ConditionBundle<T>> {
        let len = self.latent_len(req.duration_s);
        let video = match &req.video {
            Some(v) => Some(align_video_features(&self.video_encoder.encode_video(v)?, len)?),
            None => None,
        };
        match &req.audio_prefix {
            None => Ok(ConditionBundle::unconditional_audio(len, video)),
            Some(w) => {
                let z = self.codec.posterior(w)?.mean;
                let whole = ((w.samples.len() / self.codec.ratio()).min(z.rows)).min(len);
                if whole == 0 {
                    return Err(invalid("audio prefix is shorter than one latent frame"));
                }
                Ok(ConditionBundle::with_prefix(len, video, z.rows_range(0, whole)))
            }
        }
    }

    fn guidance(&self, req: &GenerateRequest<T>) -> GuidanceSpec {
        let spec = match req.mode {
            GuidanceMode::TextNegative => GuidanceSpec::text_negative(req.caption.clone(), req.negative.clone(), req.gamma),
            GuidanceMode::Extension => GuidanceSpec::extension(req.caption.clone(), req.gamma),
            GuidanceMode::Quality => {
                GuidanceSpec::quality(req.caption.clone(), req.gamma, matches!(req.negative, NegativePrompt::Null))
            }
        };
        spec.with_steps(req.steps)
    }

    /// Latents for a request.
    pub fn generate_latents(&self, req: &GenerateRequest<T>) -> Result<Mat<T>> {
        let bundle = self.bundle(req)?;
        sample(
            &self.denoiser,
            &self.text_encoder,
            &self.schedule,
            &self.guidance(req),
            &bundle,
            req.seed,
        )
    }

    /// Waveform for a request, trimmed to the requested duration.
    pub fn generate(&self, req: &GenerateRequest<T>) -> Result<Waveform> {
        let z = self.generate_latents(req)?;
        self.decode(z, req.duration_s)
    }

    pub fn decode(&self, z: Mat<T>, duration_s: f64) -> Result<Waveform> {
        let mut w = self.codec.decode(&LatentSequence::new(z, self.codec.cfg.latent_rate))?;
        w.samples
            .truncate((duration_s * self.codec.cfg.sample_rate as f64).round() as usize);
        Ok(w)
    }

    pub fn provenance(&self, req: &GenerateRequest<T>, codec_path: Option<&Path>, denoiser_path: Option<&Path>) -> Result<Provenance> {
        let hash = |p: Option<&Path>| p.map(file_hash).transpose();
        let spec = self.guidance(req);
        let (pos, neg) = spec.branch_captions();
        let prefix_frames = match &req.audio_prefix {
            Some(w) => (w.samples.len() / self.codec.ratio()).min(self.latent_len(req.duration_s)),
            None => 0,
        };
        Ok(Provenance {
            codec_checkpoint: codec_path.map(|p| p.display().to_string()),
            codec_sha256: hash(codec_path)?,
            denoiser_checkpoint: denoiser_path.map(|p| p.display().to_string()),
            denoiser_sha256: hash(denoiser_path)?,
            seed: req.seed,
            gamma: req.gamma,
            mode: req.mode,
            steps: req.steps,
            caption: pos.render(),
            negative: neg.and_then(|c| c.render()),
            duration_s: req.duration_s,
            prefix_frames,
        })
    }
}

