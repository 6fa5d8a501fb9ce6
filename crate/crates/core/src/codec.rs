//! Variational waveform autoencoder.
//!
//! The encoder frames the waveform with a window of two latent hops,
//! runs a residual MLP per frame and emits a Gaussian posterior over
//! `latent_dim` channels. The decoder maps each latent frame back to a
//! window of samples and overlap-adds them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autograd::{Graph, Var};
use crate::checkpoint::Archive;
use crate::dsp::StftPlan;
use crate::error::{invalid, Error, Result};
use crate::nn::{clip_grad_norm, AdamW, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Mat;

const LOGVAR_BOUND: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub latent_rate: u32,
    pub latent_dim: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    #[serde(default)]
    pub zero_init_heads: bool,
    pub logvar_init: f64,
    pub spectral_weight: f64,
    pub waveform_weight: f64,
    /// `(n_fft, hop)` pairs of the spectral reconstruction loss.
    pub stft_resolutions: Vec<(usize, usize)>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            latent_rate: 40,
            latent_dim: 64,
            hidden: 256,
            kl_weight: 1e-4,
            zero_init_heads: false,
            logvar_init: -12.0,
            spectral_weight: 0.01,
            waveform_weight: 1.0,
            stft_resolutions: vec![(512, 128), (128, 32)],
        }
    }
}

impl CodecConfig {
    /// Samples per latent frame.
    pub fn downsample_ratio(&self) -> Result<usize> {
        if self.latent_rate == 0 || !self.sample_rate.is_multiple_of(self.latent_rate) {
            return Err(invalid(format!(
                "sample rate {} is not an integer multiple of latent rate {}",
                self.sample_rate, self.latent_rate
            )));
        }
        Ok((self.sample_rate / self.latent_rate) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.downsample_ratio()?;
        if r % 2 != 0 {
            return Err(invalid("downsample ratio must be even"));
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(invalid("codec widths must be positive"));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(invalid("kl_weight must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `T_z x C_z` latents at `latent_rate`, in normalised units.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    pub frames: Mat<T>,
    pub latent_rate: u32,
    /// Zero samples appended to reach a whole number of frames.
    pub padded_samples: usize,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn new(frames: Mat<T>, latent_rate: u32) -> Self {
        Self {
            frames,
            latent_rate,
            padded_samples: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows == 0
    }
}

/// Posterior mean and standard deviation in normalised latent units.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T> {
    pub mean: Mat<T>,
    pub std: Mat<T>,
    pub padded_samples: usize,
}

impl<T: Scalar> Posterior<T> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Mat<T> {
        self.mean.zip_map(&self.std, |m, s| m + s * T::c(rng.sample::<f64, _>(StandardNormal)))
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc_in: Linear,
    enc_r1: Linear,
    enc_r2: Linear,
    enc_head: Linear,
    dec_in: Linear,
    dec_r1: Linear,
    dec_r2: Linear,
    dec_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Codec<T: Scalar> {
    pub cfg: CodecConfig,
    pub store: ParamStore<T>,
    /// Multiplier applied to raw latents so the training corpus has unit
    /// global standard deviation.
    pub latent_scale: f64,
    layers: Layers,
}

impl<T: Scalar> Codec<T> {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.downsample_ratio()?;
        let (h, c) = (cfg.hidden, cfg.latent_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head_init = if cfg.zero_init_heads { Init::Zeros } else { Init::FanIn };
        let rng = &mut rng;
        let layers = Layers {
            enc_in: Linear::new(&mut store, "enc.in", 2 * r, h, true, Init::FanIn, rng),
            enc_r1: Linear::new(&mut store, "enc.res1", h, h, true, Init::FanIn, rng),
            enc_r2: Linear::new(&mut store, "enc.res2", h, h, true, Init::Normal(0.1 / (h as f64).sqrt()), rng),
            enc_head: Linear::new(&mut store, "enc.head", h, 2 * c, true, head_init, rng),
            dec_in: Linear::new(&mut store, "dec.in", c, h, true, Init::FanIn, rng),
            dec_r1: Linear::new(&mut store, "dec.res1", h, h, true, Init::FanIn, rng),
            dec_r2: Linear::new(&mut store, "dec.res2", h, h, true, Init::Normal(0.1 / (h as f64).sqrt()), rng),
            dec_out: Linear::new(&mut store, "dec.out", h, 2 * r, true, head_init, rng),
        };
        let b = layers.enc_head.b.expect("head has bias");
        for v in &mut store.value_mut(b).data[c..] {
            *v = T::c(cfg.logvar_init);
        }
        Ok(Self {
            cfg,
            store,
            latent_scale: 1.0,
            layers,
        })
    }

    pub fn ratio(&self) -> usize {
        self.cfg.downsample_ratio().expect("validated at construction")
    }

    /// Encoder graph: `batch x len` waveforms to per-frame (mean, logvar)
    /// in raw units, each `(batch * frames) x latent_dim`.
    pub fn encoder_graph(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let r = self.ratio();
        let l = &self.layers;
        let f = g.frames(x, 2 * r, r, r / 2);
        let h = l.enc_in.forward(g, &self.store, f);
        let h = g.silu(h);
        let u = l.enc_r1.forward(g, &self.store, h);
        let u = g.silu(u);
        let u = l.enc_r2.forward(g, &self.store, u);
        let h = g.add(h, u);
        let out = l.enc_head.forward(g, &self.store, h);
        let c = self.cfg.latent_dim;
        let mu = g.slice_cols(out, 0, c);
        let raw = g.slice_cols(out, c, c);
        let lv = g.scale(raw, T::c(1.0 / LOGVAR_BOUND));
        let lv = g.tanh(lv);
        let lv = g.scale(lv, T::c(LOGVAR_BOUND));
        (mu, lv)
    }

    /// Decoder graph: `(batch * frames) x latent_dim` raw latents to
    /// `batch x (frames * ratio)` waveforms.
    pub fn decoder_graph(&self, g: &mut Graph<T>, z: Var, batch: usize) -> Var {
        let r = self.ratio();
        let l = &self.layers;
        let h = l.dec_in.forward(g, &self.store, z);
        let h = g.silu(h);
        let u = l.dec_r1.forward(g, &self.store, h);
        let u = g.silu(u);
        let u = l.dec_r2.forward(g, &self.store, u);
        let h = g.add(h, u);
        let f = l.dec_out.forward(g, &self.store, h);
        g.overlap_add(f, batch, 2 * r, r, r / 2)
    }

    fn check_input(&self, w: &Waveform) -> Result<()> {
        w.validate()?;
        if w.sample_rate != self.cfg.sample_rate {
            return Err(invalid(format!(
                "waveform at {} Hz but codec expects {} Hz",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        Ok(())
    }

    /// Posterior over normalised latents; pads right to whole frames.
    pub fn posterior(&self, w: &Waveform) -> Result<Posterior<T>> {
        self.check_input(w)?;
        let r = self.ratio();
        let pad = (r - w.samples.len() % r) % r;
        let mut x: Vec<T> = w.samples.iter().map(|&s| T::c(s as f64)).collect();
        x.resize(x.len() + pad, T::zero());
        let mut g = Graph::inference();
        let xv = g.constant(Mat::from_vec(1, x.len(), x));
        let (mu, lv) = self.encoder_graph(&mut g, xv);
        let s = T::c(self.latent_scale);
        let half = T::c(0.5);
        Ok(Posterior {
            mean: g.value(mu).map(|v| v * s),
            std: g.value(lv).map(|v| (v * half).exp() * s),
            padded_samples: pad,
        })
    }

    /// Posterior mean when `deterministic`, otherwise one posterior draw.
    pub fn encode<R: Rng + ?Sized>(&self, w: &Waveform, deterministic: bool, rng: &mut R) -> Result<LatentSequence<T>> {
        let p = self.posterior(w)?;
        let frames = if deterministic { p.mean.clone() } else { p.sample(rng) };
        Ok(LatentSequence {
            frames,
            latent_rate: self.cfg.latent_rate,
            padded_samples: p.padded_samples,
        })
    }

    pub fn decode(&self, z: &LatentSequence<T>) -> Result<Waveform> {
        if z.frames.cols != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "latents have {} channels but codec uses {}",
                z.frames.cols, self.cfg.latent_dim
            )));
        }
        if !z.frames.all_finite() {
            return Err(Error::NonFinite("latents".into()));
        }
        let inv = T::c(1.0 / self.latent_scale);
        let mut g = Graph::inference();
        let zv = g.constant(z.frames.map(|v| v * inv));
        let y = self.decoder_graph(&mut g, zv, 1);
        let samples = g.value(y).data.iter().map(|v| v.f64().clamp(-1.0, 1.0) as f32).collect();
        Ok(Waveform {
            samples,
            sample_rate: self.cfg.sample_rate,
        })
    }

    /// Encode (posterior mean) then decode, trimmed to the input length.
    pub fn roundtrip(&self, w: &Waveform) -> Result<Waveform> {
        let z = self.encode(w, true, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut out = self.decode(&z)?;
        out.samples.truncate(w.samples.len());
        Ok(out)
    }

    pub fn to_archive(&self) -> Archive<T> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "latent_scale": self.latent_scale,
        });
        let mut a = Archive::new("codec", meta);
        for (name, v) in self.store.names().iter().zip(self.store.values()) {
            a.push(name.clone(), v.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive<T>, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::Format {
            path: path.to_path_buf(),
            detail: d,
        };
        if a.kind != "codec" {
            return Err(bad(format!("expected a codec checkpoint, found {}", a.kind)));
        }
        let cfg: CodecConfig = serde_json::from_value(a.meta["config"].clone())?;
        let scale = a.meta["latent_scale"].as_f64().ok_or_else(|| bad("missing latent_scale".into()))?;
        let mut c = Self::new(cfg, 0)?;
        let mut values = Vec::with_capacity(c.store.len());
        for name in c.store.names() {
            let m = a.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            values.push(m.clone());
        }
        for (v, cur) in values.iter().zip(c.store.values()) {
            if v.shape() != cur.shape() {
                return Err(bad("tensor shape does not match config".into()));
            }
        }
        c.store.load_values(values);
        c.latent_scale = scale;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainSpec {
    pub steps: u64,
    pub batch: usize,
    pub crop_frames: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Probability that a crop is centred near a loud region.
    pub event_focus: f64,
    pub seed: u64,
}

impl Default for CodecTrainSpec {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            crop_frames: 16,
            lr: 1e-3,
            grad_clip: 1.0,
            event_focus: 0.75,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecLossRecord {
    pub step: u64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Reconstruction + weighted KL for one batch of crops; returns the
/// graph root and the (recon, kl) values.
fn batch_loss<T: Scalar, R: Rng + ?Sized>(
    codec: &Codec<T>,
    g: &mut Graph<T>,
    x: &Mat<T>,
    plans: &[StftPlan<T>],
    rng: &mut R,
) -> (Var, f64, f64) {
    let xv = g.constant(x.clone());
    let (mu, lv) = codec.encoder_graph(g, xv);
    let (rows, cols) = g.value(mu).shape();
    let noise = Mat::randn(rows, cols, 1.0, rng);
    let half_lv = g.scale(lv, T::c(0.5));
    let std = g.exp(half_lv);
    let nz = g.constant(noise);
    let eps = g.mul(std, nz);
    let z = g.add(mu, eps);
    let y = codec.decoder_graph(g, z, x.rows);
    let spec = g.stft_loss(y, x, plans);
    let spec = g.scale(spec, T::c(codec.cfg.spectral_weight));
    let l1 = g.l1_loss(y, x);
    let l1 = g.scale(l1, T::c(codec.cfg.waveform_weight));
    let recon = g.add(spec, l1);
    let recon_v = g.scalar(recon).f64();
    let mu2 = g.square(mu);
    let elv = g.exp(lv);
    let d = g.sub(elv, lv);
    let s = g.add(mu2, d);
    let kl_half = g.mean(s);
    let kl_v = 0.5 * g.scalar(kl_half).f64() - 0.5;
    if codec.cfg.kl_weight == 0.0 {
        return (recon, recon_v, kl_v.max(0.0));
    }
    let kl = g.scale(kl_half, T::c(0.5 * codec.cfg.kl_weight));
    (g.add(recon, kl), recon_v, kl_v.max(0.0))
}

fn loud_frames(w: &Waveform, ratio: usize) -> Vec<usize> {
    w.samples
        .chunks(ratio)
        .enumerate()
        .filter(|(_, c)| c.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / c.len() as f64 > 1e-3)
        .map(|(i, _)| i)
        .collect()
}

fn draw_crops<T: Scalar, R: Rng + ?Sized>(
    corpus: &[Waveform],
    loud: &[Vec<usize>],
    ratio: usize,
    spec: &CodecTrainSpec,
    rng: &mut R,
) -> Mat<T> {
    let len = spec.crop_frames * ratio;
    let mut x = Mat::zeros(spec.batch, len);
    for b in 0..spec.batch {
        let i = rng.random_range(0..corpus.len());
        let w = &corpus[i];
        let max_start = w.samples.len().saturating_sub(len);
        let start = if !loud[i].is_empty() && rng.random::<f64>() < spec.event_focus {
            let f = loud[i][rng.random_range(0..loud[i].len())] * ratio;
            let lo = f.saturating_sub(len - ratio);
            rng.random_range(lo..=f).min(max_start)
        } else {
            rng.random_range(0..=max_start)
        };
        for (j, o) in x.row_mut(b).iter_mut().enumerate() {
            *o = T::c(w.samples.get(start + j).copied().unwrap_or(0.0) as f64);
        }
    }
    x
}

/// Trains a codec on random crops of `corpus`, then fixes the latent
/// scale from posterior means over the whole corpus.
pub fn train_codec<T: Scalar>(
    corpus: &[Waveform],
    cfg: CodecConfig,
    spec: &CodecTrainSpec,
) -> Result<(Codec<T>, Vec<CodecLossRecord>)> {
    if corpus.is_empty() {
        return Err(invalid("codec corpus is empty"));
    }
    if spec.steps == 0 || spec.batch == 0 || spec.crop_frames == 0 {
        return Err(invalid("steps, batch and crop_frames must be positive"));
    }
    let mut codec = Codec::<T>::new(cfg, spec.seed)?;
    for w in corpus {
        codec.check_input(w)?;
    }
    let ratio = codec.ratio();
    let plans: Vec<StftPlan<T>> = codec.cfg.stft_resolutions.iter().map(|&(n, h)| StftPlan::new(n, h)).collect();
    let loud: Vec<Vec<usize>> = corpus.iter().map(|w| loud_frames(w, ratio)).collect();
    let mut opt = AdamW::new(&codec.store, 0.0);
    let mut trace = Vec::with_capacity(spec.steps as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c0dec);
    for step in 0..spec.steps {
        let x = draw_crops::<T, _>(corpus, &loud, ratio, spec, &mut rng);
        let mut g = Graph::new();
        let (root, recon, kl) = batch_loss(&codec, &mut g, &x, &plans, &mut rng);
        let total = g.scalar(root).f64();
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("codec loss {total} (recon {recon}, kl {kl})"),
            });
        }
        trace.push(CodecLossRecord { step, recon, kl, total });
        let grads = g.backward(root);
        let mut acc = vec![None; codec.store.len()];
        grads.accumulate_into(&mut acc);
        clip_grad_norm(&mut acc, spec.grad_clip);
        let lr = spec.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / spec.steps as f64).cos());
        opt.update(&mut codec.store, &acc, lr);
    }
    codec.latent_scale = 1.0 / raw_latent_std(&codec, corpus)?;
    Ok((codec, trace))
}

fn raw_latent_std<T: Scalar>(codec: &Codec<T>, corpus: &[Waveform]) -> Result<f64> {
    let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
    for w in corpus {
        let p = codec.posterior(w)?;
        for &v in &p.mean.data {
            let v = v.f64() / codec.latent_scale;
            n += 1;
            s += v;
            s2 += v * v;
        }
    }
    let mean = s / n as f64;
    let std = (s2 / n as f64 - mean * mean).max(0.0).sqrt();
    if !(std > 1e-12) {
        return Err(invalid("codec latents are degenerate (zero variance)"));
    }
    Ok(std)
}
