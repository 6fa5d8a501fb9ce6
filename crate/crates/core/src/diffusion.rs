//! Noise schedule, forward noising, the masked noise-prediction loss,
//! deterministic DDIM updates and guided sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::denoiser::{Denoiser, DenoiserInput};
use crate::encoders::{Caption, QualityTag, TextCond, TextEncoder};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Cumulative signal coefficients `alpha_bar[t]` for `t = 0..=T`
/// (`alpha_bar[0] = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    /// Cosine schedule over `steps` timesteps, truncated so that the last
    /// timestep keeps `terminal` of the signal power.
    pub fn cosine(steps: usize, terminal: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if !(terminal > 0.0 && terminal < 1.0) {
            return Err(invalid("terminal alpha_bar must lie in (0, 1)"));
        }
        let s = COSINE_OFFSET;
        let f = |u: f64| (((u + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let u_end = ((terminal * f0).sqrt().acos() / std::f64::consts::FRAC_PI_2) * (1.0 + s) - s;
        let alpha_bar = (0..=steps).map(|t| f(u_end * t as f64 / steps as f64) / f0).collect();
        Ok(Self { alpha_bar })
    }

    /// Default: 1000 steps ending at `alpha_bar = 0.005`.
    pub fn default_cosine() -> Self {
        Self::cosine(1000, 0.005).expect("valid constants")
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(invalid("alpha_bar must start at 1 and have at least one step"));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || alpha_bar.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(invalid("alpha_bar must be strictly decreasing within [0, 1]"));
        }
        Ok(Self { alpha_bar })
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `t ~ U{1..T}`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps())
    }

    /// Descending DDIM timesteps, `n` of them uniformly spaced in `1..=T`,
    /// paired with their successors (the last successor is 0).
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        let big_t = self.steps();
        if n == 0 || n > big_t {
            return Err(invalid(format!("DDIM steps must lie in 1..={big_t}")));
        }
        let ts: Vec<usize> = (0..n).map(|i| ((big_t * (n - i)) as f64 / n as f64).round() as usize).collect();
        Ok(ts.iter().enumerate().map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0))).collect())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn add_noise<T: Scalar>(z0: &Mat<T>, t: usize, eps: &Mat<T>, sched: &NoiseSchedule) -> Result<Mat<T>> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Shape("noise shape differs from latents".into()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// `(gamma + 1) pos - gamma neg`.
pub fn cfg_combine<T: Scalar>(pos: &Mat<T>, neg: &Mat<T>, gamma: f64) -> Result<Mat<T>> {
    if pos.shape() != neg.shape() {
        return Err(Error::Shape("guidance branches differ in shape".into()));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(invalid("guidance scale must be finite and non-negative"));
    }
    let (a, b) = (T::c(gamma + 1.0), T::c(gamma));
    Ok(pos.zip_map(neg, |p, n| a * p - b * n))
}

/// Deterministic DDIM update from `t` to `t_prev` (`t_prev = 0` lands on
/// the clean estimate).
pub fn ddim_step<T: Scalar>(z_t: &Mat<T>, eps: &Mat<T>, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Mat<T>> {
    sched.check_t(t)?;
    if t_prev > t {
        return Err(invalid(format!("t_prev {t_prev} exceeds t {t}")));
    }
    if z_t.shape() != eps.shape() {
        return Err(Error::Shape("noise estimate shape differs from latents".into()));
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(invalid(format!("alpha_bar at t={t} is zero")));
    }
    let ab_prev = sched.alpha_bar(t_prev);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(z_t.zip_map(eps, |z, e| {
        let x0 = (z.f64() - sb * e.f64()) / sa;
        T::c(pa * x0 + pb * e.f64())
    }))
}

/// Squared-error map of a prediction: `(loss, per_position)` where the
/// loss averages `||eps - pred||^2` over non-conditional rows and
/// conditional rows report exactly 0. `None` when every row is masked.
pub fn masked_loss<T: Scalar>(pred: &Mat<T>, eps: &Mat<T>, cond_mask: &[bool]) -> Option<(f64, Vec<f64>)> {
    assert_eq!(pred.shape(), eps.shape(), "masked_loss shapes");
    assert_eq!(cond_mask.len(), pred.rows, "masked_loss mask length");
    let free = cond_mask.iter().filter(|&&m| !m).count();
    if free == 0 {
        return None;
    }
    let per: Vec<f64> = (0..pred.rows)
        .map(|r| {
            if cond_mask[r] {
                0.0
            } else {
                pred.row(r).iter().zip(eps.row(r)).map(|(&p, &e)| (p - e).f64().powi(2)).sum()
            }
        })
        .collect();
    Some((per.iter().sum::<f64>() / free as f64, per))
}

/// One training example: clean latents, the clean conditional span and
/// the conditions the denoiser sees.
#[derive(Clone, Debug)]
pub struct TrainItem<T> {
    pub z0: Mat<T>,
    pub cond_mask: Vec<bool>,
    pub video: Option<Mat<T>>,
    pub text: TextCond<T>,
    /// Absolute index of the first frame within its clip.
    pub offset: usize,
}

#[derive(Debug)]
pub struct LossGraph {
    pub root: Var,
    /// Stacked denoiser output for the kept items.
    pub pred: Var,
    pub loss: f64,
    /// Per-item, per-frame squared error (0 on conditional frames).
    pub per_position: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
    /// Items dropped because every frame was conditional.
    pub skipped: usize,
}

/// Builds the batch loss on `g`: each item is noised at its own
/// `t ~ U{1..T}`, conditional frames keep their clean latents, and the
/// loss is the mean over items of their masked mean squared error.
pub fn training_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    den: &Denoiser<T>,
    items: &[TrainItem<T>],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossGraph> {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for it in items {
        if it.cond_mask.iter().all(|&m| m) {
            log::warn!("skipping training item whose frames are all conditional");
            skipped += 1;
        } else {
            kept.push(it);
        }
    }
    if kept.is_empty() {
        return Err(invalid("no training item has a non-conditional frame"));
    }
    let mut inputs = Vec::with_capacity(kept.len());
    let mut noises = Vec::with_capacity(kept.len());
    let mut timesteps = Vec::with_capacity(kept.len());
    for it in &kept {
        let t = sched.sample_timestep(rng);
        let eps = Mat::randn(it.z0.rows, it.z0.cols, 1.0, rng);
        let mut zt = add_noise(&it.z0, t, &eps, sched)?;
        for (r, &m) in it.cond_mask.iter().enumerate() {
            if m {
                zt.row_mut(r).copy_from_slice(it.z0.row(r));
            }
        }
        inputs.push(zt);
        noises.push(eps);
        timesteps.push(t);
    }
    let batch: Vec<DenoiserInput<T>> = kept
        .iter()
        .zip(&inputs)
        .zip(&timesteps)
        .map(|((it, zt), &t)| DenoiserInput {
            latents: zt,
            cond_mask: &it.cond_mask,
            video: it.video.as_ref(),
            text: &it.text,
            t,
            offset: it.offset,
        })
        .collect();
    let pred = den.forward_graph(g, &batch)?;
    let refs: Vec<&Mat<T>> = noises.iter().collect();
    let target = Mat::vstack(&refs);
    let n_items = kept.len() as f64;
    let mut weights = Vec::with_capacity(target.rows);
    for it in &kept {
        let free = it.cond_mask.iter().filter(|&&m| !m).count() as f64;
        weights.extend(it.cond_mask.iter().map(|&m| if m { T::zero() } else { T::c(1.0 / (free * n_items)) }));
    }
    let root = g.weighted_sq_err(pred, &target, &weights);
    let loss = g.scalar(root).f64();
    let pv = g.value(pred);
    let mut per_position = Vec::with_capacity(kept.len());
    let mut r0 = 0;
    for (it, eps) in kept.iter().zip(&noises) {
        let p = pv.rows_range(r0, r0 + eps.rows);
        per_position.push(masked_loss(&p, eps, &it.cond_mask).expect("non-empty").1);
        r0 += eps.rows;
    }
    Ok(LossGraph {
        root,
        pred,
        loss,
        per_position,
        timesteps,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Positive prompt with video against a negative prompt without video.
    TextNegative,
    /// Continue a clean conditional prefix; the negative branch swaps the
    /// prefix for fresh noise and drops video and text.
    Extension,
    /// Positive prompt tagged high quality against a low-quality (or null)
    /// negative prompt.
    Quality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePrompt {
    Null,
    Caption(Caption),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub gamma: f64,
    pub positive: Caption,
    pub negative: NegativePrompt,
    pub steps: usize,
}

impl GuidanceSpec {
    pub fn text_negative(positive: Caption, negative: NegativePrompt, gamma: f64) -> Self {
        Self {
            mode: GuidanceMode::TextNegative,
            gamma,
            positive,
            negative,
            steps: 100,
        }
    }

    pub fn extension(positive: Caption, gamma: f64) -> Self {
        Self {
            mode: GuidanceMode::Extension,
            gamma,
            positive,
            negative: NegativePrompt::Null,
            steps: 100,
        }
    }

    /// Negative prompt is the tag-only caption "low quality", or the null
    /// text when `null_negative`.
    pub fn quality(caption: Caption, gamma: f64, null_negative: bool) -> Self {
        let negative = if null_negative {
            NegativePrompt::Null
        } else {
            NegativePrompt::Caption(Caption {
                body: None,
                quality: QualityTag::Low,
            })
        };
        Self {
            mode: GuidanceMode::Quality,
            gamma,
            positive: caption,
            negative,
            steps: 100,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// Captions seen by the positive and negative branches.
    pub fn branch_captions(&self) -> (Caption, Option<Caption>) {
        let pos = match self.mode {
            GuidanceMode::Quality => self.positive.with_quality(QualityTag::High),
            _ => self.positive.clone(),
        };
        let neg = match (&self.mode, &self.negative) {
            (GuidanceMode::Extension, _) | (_, NegativePrompt::Null) => None,
            (_, NegativePrompt::Caption(c)) => Some(c.clone()),
        };
        (pos, neg)
    }
}

/// Everything except the text that conditions one generation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle<T> {
    /// Total latent frames to produce.
    pub len: usize,
    /// Video features aligned to `len` frames, or `None` for the null video.
    pub video: Option<Mat<T>>,
    /// Clean latents for the conditional frames, in frame order.
    pub cond_latents: Option<Mat<T>>,
    pub cond_mask: Vec<bool>,
}

impl<T: Scalar> ConditionBundle<T> {
    pub fn unconditional_audio(len: usize, video: Option<Mat<T>>) -> Self {
        Self {
            len,
            video,
            cond_latents: None,
            cond_mask: vec![false; len],
        }
    }

    /// Conditional latents occupy the first `z_c.rows` frames.
    pub fn with_prefix(len: usize, video: Option<Mat<T>>, z_c: Mat<T>) -> Self {
        let mut cond_mask = vec![false; len];
        for m in cond_mask.iter_mut().take(z_c.rows) {
            *m = true;
        }
        Self {
            len,
            video,
            cond_latents: Some(z_c),
            cond_mask,
        }
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.len == 0 {
            return Err(invalid("nothing to generate"));
        }
        if self.cond_mask.len() != self.len {
            return Err(Error::Shape("condition mask length differs from sequence length".into()));
        }
        let n_cond = self.cond_mask.iter().filter(|&&m| m).count();
        match &self.cond_latents {
            Some(z) => {
                if z.rows != n_cond || z.cols != latent_dim {
                    return Err(Error::Shape(format!(
                        "conditional latents {}x{} but mask marks {n_cond} frames of width {latent_dim}",
                        z.rows, z.cols
                    )));
                }
            }
            None if n_cond > 0 => return Err(invalid("condition mask set without conditional latents")),
            None => {}
        }
        if let Some(v) = &self.video {
            if v.rows != self.len {
                return Err(Error::Shape(format!("video has {} rows for {} frames", v.rows, self.len)));
            }
        }
        Ok(())
    }

    fn assert_condition(&self, z: &mut Mat<T>) {
        if let Some(zc) = &self.cond_latents {
            let mut k = 0;
            for (r, &m) in self.cond_mask.iter().enumerate() {
                if m {
                    z.row_mut(r).copy_from_slice(zc.row(k));
                    k += 1;
                }
            }
        }
    }
}

/// Guided DDIM sampling. Returns `len x C_z` latents whose conditional
/// frames equal the bundle's conditional latents exactly.
pub fn sample<T: Scalar>(
    den: &Denoiser<T>,
    text_encoder: &TextEncoder,
    sched: &NoiseSchedule,
    spec: &GuidanceSpec,
    bundle: &ConditionBundle<T>,
    seed: u64,
) -> Result<Mat<T>> {
    let c_z = den.cfg.latent_dim;
    bundle.validate(c_z)?;
    if spec.mode == GuidanceMode::Extension && bundle.cond_latents.is_none() {
        return Err(invalid("extension mode needs conditional latents"));
    }
    if !(spec.gamma >= 0.0 && spec.gamma.is_finite()) {
        return Err(invalid("guidance scale must be finite and non-negative"));
    }
    let (pos_cap, neg_cap) = spec.branch_captions();
    let pos_text: TextCond<T> = text_encoder.encode_text(&pos_cap);
    let neg_text: TextCond<T> = match neg_cap {
        Some(c) => text_encoder.encode_text(&c),
        None => TextCond::Null,
    };
    let neg_mask = vec![false; bundle.len];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Mat::randn(bundle.len, c_z, 1.0, &mut rng);
    bundle.assert_condition(&mut z);
    for (t, t_prev) in sched.ddim_timesteps(spec.steps)? {
        let pos = DenoiserInput {
            latents: &z,
            cond_mask: &bundle.cond_mask,
            video: bundle.video.as_ref(),
            text: &pos_text,
            t,
            offset: 0,
        };
        let eps = if spec.gamma == 0.0 {
            den.forward(&pos)?
        } else {
            let mut z_neg = z.clone();
            for (r, &m) in bundle.cond_mask.iter().enumerate() {
                if m {
                    for v in z_neg.row_mut(r) {
                        *v = T::c(rng.sample::<f64, _>(rand_distr::StandardNormal));
                    }
                }
            }
            let neg = DenoiserInput {
                latents: &z_neg,
                cond_mask: &neg_mask,
                video: None,
                text: &neg_text,
                t,
                offset: 0,
            };
            let out = den.forward_batch(&[pos, neg])?;
            cfg_combine(&out[0], &out[1], spec.gamma)?
        };
        z = ddim_step(&z, &eps, t, t_prev, sched)?;
        bundle.assert_condition(&mut z);
    }
    Ok(z)
}
