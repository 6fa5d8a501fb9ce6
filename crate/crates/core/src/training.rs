//! Two-stage denoiser training: dataset mixing with condition dropout,
//! conditional span masking, AdamW with warm-up and cosine decay, EMA,
//! resumable checkpoints and the subset finetune stage.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Archive;
use crate::codec::Posterior;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{training_graph, NoiseSchedule, TrainItem};
use crate::encoders::{make_caption, Caption, DatasetSource, QualityTag, TextCond, TextEncoder};
use crate::error::{invalid, io_err, Error, Result};
use crate::nn::{clip_grad_norm, warmup_cosine_lr, AdamW, Ema};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Which conditions an example keeps after dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CondVariant {
    pub video: bool,
    pub caption: bool,
    pub tag: bool,
}

impl CondVariant {
    pub const fn new(video: bool, caption: bool, tag: bool) -> Self {
        Self { video, caption, tag }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.video {
            parts.push("video");
        }
        if self.caption {
            parts.push("text");
        }
        if self.tag {
            parts.push("tag");
        }
        if parts.is_empty() {
            "unconditional".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixPolicy {
    pub p_av: f64,
    pub av: Vec<(CondVariant, f64)>,
    pub sfx: Vec<(CondVariant, f64)>,
}

impl Default for MixPolicy {
    fn default() -> Self {
        let v = CondVariant::new;
        let drop = 0.4 / 7.0;
        Self {
            p_av: 0.6,
            av: vec![
                (v(true, true, true), 0.6),
                (v(true, false, true), drop),
                (v(true, true, false), drop),
                (v(true, false, false), drop),
                (v(false, true, true), drop),
                (v(false, true, false), drop),
                (v(false, false, true), drop),
                (v(false, false, false), drop),
            ],
            sfx: vec![
                (v(false, true, true), 0.6),
                (v(false, true, false), 0.1),
                (v(false, false, true), 0.15),
                (v(false, false, false), 0.15),
            ],
        }
    }
}

impl MixPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_av) {
            return Err(invalid("p_av must lie in [0, 1]"));
        }
        for (name, group) in [("av", &self.av), ("sfx", &self.sfx)] {
            let s: f64 = group.iter().map(|g| g.1).sum();
            if (s - 1.0).abs() > 1e-9 || group.iter().any(|g| g.1 < 0.0) {
                return Err(invalid(format!("{name} variant probabilities sum to {s}, not 1")));
            }
        }
        if self.sfx.iter().any(|(v, p)| v.video && *p > 0.0) {
            return Err(invalid("sfx items carry no video"));
        }
        Ok(())
    }

    fn pick<R: Rng + ?Sized>(group: &[(CondVariant, f64)], rng: &mut R) -> CondVariant {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(v, p) in group {
            acc += p;
            if u < acc {
                return v;
            }
        }
        group.last().expect("non-empty group").0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    pub p_mask: f64,
    pub max_span_s: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            p_mask: 0.25,
            max_span_s: 2.0,
        }
    }
}

impl MaskPolicy {
    /// Longest span in latent frames (rounded down).
    pub fn max_span_frames(&self, latent_rate: u32) -> usize {
        (self.max_span_s * latent_rate as f64).floor() as usize
    }

    /// `(start, len)` of a conditional span inside `len_frames`, or `None`.
    pub fn draw<R: Rng + ?Sized>(&self, len_frames: usize, latent_rate: u32, rng: &mut R) -> Option<(usize, usize)> {
        if rng.random::<f64>() >= self.p_mask {
            return None;
        }
        let span = rng.random_range(0..=self.max_span_frames(latent_rate).min(len_frames));
        let start = rng.random_range(0..=len_frames - span);
        Some((start, span))
    }
}

/// A training clip after the frozen encoders: codec posterior and video
/// features aligned to the latent rate.
#[derive(Clone, Debug)]
pub struct EncodedClip<T> {
    pub id: String,
    pub source: DatasetSource,
    pub category: String,
    pub quality: QualityTag,
    pub posterior: Posterior<T>,
    pub video: Option<Mat<T>>,
    pub high_correspondence: bool,
    pub event_times: Vec<f64>,
}

impl<T: Scalar> EncodedClip<T> {
    pub fn len(&self) -> usize {
        self.posterior.mean.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sampled example before materialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub source: DatasetSource,
    pub clip: usize,
    pub variant: CondVariant,
    /// First frame and length of the training window.
    pub window: (usize, usize),
    /// Conditional span relative to the window.
    pub span: Option<(usize, usize)>,
}

/// Samples one example description. `n_av`/`n_sfx` are pool sizes and
/// `clip_len` the latent length of every clip.
#[allow(clippy::too_many_arguments)]
pub fn draw_example<R: Rng + ?Sized>(
    policy: &MixPolicy,
    mask: &MaskPolicy,
    n_av: usize,
    n_sfx: usize,
    clip_len: usize,
    window: Option<usize>,
    latent_rate: u32,
    rng: &mut R,
) -> Draw {
    let av = if n_sfx == 0 {
        true
    } else if n_av == 0 {
        false
    } else {
        rng.random::<f64>() < policy.p_av
    };
    let (source, variant, clip) = if av {
        (DatasetSource::Av, MixPolicy::pick(&policy.av, rng), rng.random_range(0..n_av))
    } else {
        (DatasetSource::Sfx, MixPolicy::pick(&policy.sfx, rng), rng.random_range(0..n_sfx))
    };
    let w = window.unwrap_or(clip_len).min(clip_len);
    let start = rng.random_range(0..=clip_len - w);
    let span = if av { mask.draw(w, latent_rate, rng) } else { None };
    Draw {
        source,
        clip,
        variant,
        window: (start, w),
        span,
    }
}

/// Training data: both pools, checked non-empty where the policy needs them.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub av: Vec<EncodedClip<T>>,
    pub sfx: Vec<EncodedClip<T>>,
    pub latent_rate: u32,
}

impl<T: Scalar> TrainData<T> {
    pub fn validate(&self, policy: &MixPolicy) -> Result<()> {
        if policy.p_av > 0.0 && self.av.is_empty() {
            return Err(invalid("mixing policy requests AV items but the AV pool is empty"));
        }
        if policy.p_av < 1.0 && self.sfx.is_empty() {
            return Err(invalid("mixing policy requests SFX items but the SFX pool is empty"));
        }
        let lens: Vec<usize> = self.av.iter().chain(&self.sfx).map(|c| c.len()).collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            return Err(invalid("all clips must share one latent length"));
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        self.av.first().or(self.sfx.first()).map_or(0, |c| c.len())
    }

    /// Clips flagged high-correspondence, for the finetune stage.
    pub fn subset(&self) -> Self {
        Self {
            av: self.av.iter().filter(|c| c.high_correspondence).cloned().collect(),
            sfx: self.sfx.iter().filter(|c| c.high_correspondence).cloned().collect(),
            latent_rate: self.latent_rate,
        }
    }

    fn clip(&self, d: &Draw) -> &EncodedClip<T> {
        match d.source {
            DatasetSource::Av => &self.av[d.clip],
            DatasetSource::Sfx => &self.sfx[d.clip],
        }
    }
}

/// Caches hash text embeddings by rendered caption.
#[derive(Clone, Debug, Default)]
pub struct TextCache<T> {
    map: HashMap<String, TextCond<T>>,
}

impl<T: Scalar> TextCache<T> {
    pub fn get(&mut self, enc: &TextEncoder, c: &Caption) -> TextCond<T> {
        match c.render() {
            None => TextCond::Null,
            Some(s) => self.map.entry(s).or_insert_with(|| enc.encode_text(c)).clone(),
        }
    }
}

/// Turns a draw into a denoiser training item.
pub fn materialize<T: Scalar, R: Rng + ?Sized>(
    data: &TrainData<T>,
    d: &Draw,
    text_enc: &TextEncoder,
    cache: &mut TextCache<T>,
    posterior_sampling: bool,
    rng: &mut R,
) -> Result<(TrainItem<T>, Caption)> {
    let clip = data.clip(d);
    let (s, w) = d.window;
    let mean = clip.posterior.mean.rows_range(s, s + w);
    let z0 = if posterior_sampling {
        let std = clip.posterior.std.rows_range(s, s + w);
        Posterior {
            mean,
            std,
            padded_samples: 0,
        }
        .sample(rng)
    } else {
        mean
    };
    let mut cond_mask = vec![false; w];
    if let Some((a, l)) = d.span {
        for m in &mut cond_mask[a..a + l] {
            *m = true;
        }
    }
    let video = if d.variant.video {
        clip.video.as_ref().map(|v| v.rows_range(s, s + w))
    } else {
        None
    };
    let caption = make_caption(&clip.category, clip.quality, !d.variant.caption, !d.variant.tag)?;
    let text = cache.get(text_enc, &caption);
    Ok((
        TrainItem {
            z0,
            cond_mask,
            video,
            text,
            offset: s,
        },
        caption,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub lr: f64,
    pub warmup: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub batch: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup: 4000,
            total_steps: 20_000,
            weight_decay: 0.01,
            ema_decay: 0.99,
            grad_clip: 1.0,
            batch: 8,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.total_steps {
            return Err(invalid("warm-up must be shorter than training"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid("EMA decay must lie in (0, 1)"));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(invalid("batch and lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub stage: Stage,
    pub optim: OptimSpec,
    pub mix: MixPolicy,
    pub mask: MaskPolicy,
    /// Training window in latent frames (`None` = whole clip).
    pub window: Option<usize>,
    /// Draw latents from the codec posterior instead of using its mean.
    pub posterior_sampling: bool,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            optim: OptimSpec::default(),
            mix: MixPolicy::default(),
            mask: MaskPolicy::default(),
            window: None,
            posterior_sampling: true,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub ema_distance: f64,
}

/// Per-step RNG: depends only on the run seed and the step index.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

/// Draws a batch for `step`; identical for identical `(seed, step)`.
pub fn sample_batch<T: Scalar>(
    data: &TrainData<T>,
    spec: &TrainSpec,
    text_enc: &TextEncoder,
    cache: &mut TextCache<T>,
    step: u64,
) -> Result<(Vec<TrainItem<T>>, Vec<(Draw, Caption)>, ChaCha8Rng)> {
    let mut rng = step_rng(spec.seed, step);
    let mut items = Vec::with_capacity(spec.optim.batch);
    let mut draws = Vec::with_capacity(spec.optim.batch);
    for _ in 0..spec.optim.batch {
        let d = draw_example(
            &spec.mix,
            &spec.mask,
            data.av.len(),
            data.sfx.len(),
            data.clip_len(),
            spec.window,
            data.latent_rate,
            &mut rng,
        );
        let (item, cap) = materialize(data, &d, text_enc, cache, spec.posterior_sampling, &mut rng)?;
        items.push(item);
        draws.push((d, cap));
    }
    Ok((items, draws, rng))
}

/// Live parameters, optimiser moments and EMA shadow.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub model: Denoiser<T>,
    pub opt: AdamW<T>,
    pub ema: Ema<T>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: DenoiserConfig, optim: &OptimSpec, seed: u64) -> Result<Self> {
        let model = Denoiser::new(cfg, seed)?;
        Ok(Self::from_model(model, optim))
    }

    pub fn from_model(model: Denoiser<T>, optim: &OptimSpec) -> Self {
        let opt = AdamW::new(&model.store, optim.weight_decay);
        let ema = Ema::new(&model.store, optim.ema_decay);
        Self { model, opt, ema, step: 0 }
    }

    /// Copy of the model carrying the EMA weights.
    pub fn ema_model(&self) -> Denoiser<T> {
        let mut m = self.model.clone();
        m.store.load_values(self.ema.shadow.clone());
        m
    }

    pub fn to_archive(&self, spec: &TrainSpec, sched: &NoiseSchedule) -> Archive<T> {
        let meta = serde_json::json!({
            "config": self.model.cfg,
            "step": self.step,
            "adam_step": self.opt.step,
            "train": spec,
            "schedule": {"kind": "cosine", "steps": sched.steps(), "terminal_alpha_bar": sched.alpha_bar(sched.steps())},
            "positional_encoding": if self.model.cfg.positional { "sinusoidal" } else { "none" },
        });
        let mut a = Archive::new("denoiser", meta);
        let names = self.model.store.names();
        for (i, n) in names.iter().enumerate() {
            a.push(format!("param/{n}"), self.model.store.value(i).clone());
        }
        for (i, n) in names.iter().enumerate() {
            a.push(format!("ema/{n}"), self.ema.shadow[i].clone());
        }
        for (i, n) in names.iter().enumerate() {
            a.push(format!("adam_m/{n}"), self.opt.m[i].clone());
            a.push(format!("adam_v/{n}"), self.opt.v[i].clone());
        }
        a
    }

    pub fn from_archive(a: &Archive<T>, optim: &OptimSpec, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::Format {
            path: path.to_path_buf(),
            detail: d,
        };
        if a.kind != "denoiser" {
            return Err(bad(format!("expected a denoiser checkpoint, found {}", a.kind)));
        }
        let cfg: DenoiserConfig = serde_json::from_value(a.meta["config"].clone())?;
        let mut st = Self::new(cfg, optim, 0)?;
        let names: Vec<String> = st.model.store.names().to_vec();
        let fetch = |prefix: &str| -> Result<Vec<Mat<T>>> {
            names
                .iter()
                .map(|n| a.get(&format!("{prefix}/{n}")).cloned().ok_or_else(|| bad(format!("missing tensor {prefix}/{n}"))))
                .collect()
        };
        let params = fetch("param")?;
        for (p, cur) in params.iter().zip(st.model.store.values()) {
            if p.shape() != cur.shape() {
                return Err(bad("tensor shape does not match config".into()));
            }
        }
        st.model.store.load_values(params);
        st.ema.shadow = fetch("ema")?;
        st.opt.m = fetch("adam_m")?;
        st.opt.v = fetch("adam_v")?;
        st.opt.step = a.meta["adam_step"].as_u64().unwrap_or(0);
        st.step = a.meta["step"].as_u64().ok_or_else(|| bad("missing step".into()))?;
        Ok(st)
    }

    pub fn save(&self, path: &Path, spec: &TrainSpec, sched: &NoiseSchedule) -> Result<()> {
        self.to_archive(spec, sched).save(path)
    }

    pub fn load(path: &Path, optim: &OptimSpec) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, optim, path)
    }
}

/// Where a run writes its checkpoints and metrics.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join(format!("step-{step:07}.fgck"))
    }

    pub fn latest(&self) -> PathBuf {
        self.root.join("latest.fgck")
    }

    pub fn last_good(&self) -> PathBuf {
        self.root.join("last-good.fgck")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
}

/// Advances `state` to `until` steps. Metrics go to `on_metric`; with a
/// run directory, checkpoints are written every `checkpoint_every` steps
/// and at the end.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData<T>,
    spec: &TrainSpec,
    sched: &NoiseSchedule,
    text_enc: &TextEncoder,
    until: u64,
    run: Option<&RunDir>,
    mut on_metric: impl FnMut(&MetricRecord),
) -> Result<()> {
    spec.optim.validate()?;
    spec.mix.validate()?;
    data.validate(&spec.mix)?;
    if let Some(r) = run {
        fs::create_dir_all(&r.root).map_err(io_err(&r.root))?;
    }
    let mut log_file = match run {
        Some(r) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(r.metrics())
                .map_err(io_err(r.metrics()))?,
        ),
        None => None,
    };
    let mut cache = TextCache::default();
    while state.step < until {
        let step = state.step;
        let (items, _, mut rng) = sample_batch(data, spec, text_enc, &mut cache, step)?;
        let mut g = Graph::new();
        let lg = training_graph(&mut g, &state.model, &items, sched, &mut rng)?;
        if !lg.loss.is_finite() {
            if let Some(r) = run {
                state.save(&r.last_good(), spec, sched)?;
            }
            return Err(Error::Diverged {
                step,
                detail: format!("loss {}", lg.loss),
            });
        }
        let grads = g.backward(lg.root);
        let mut acc = vec![None; state.model.store.len()];
        grads.accumulate_into(&mut acc);
        drop(g);
        let gn = clip_grad_norm(&mut acc, spec.optim.grad_clip);
        if !gn.is_finite() {
            if let Some(r) = run {
                state.save(&r.last_good(), spec, sched)?;
            }
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {gn}"),
            });
        }
        let lr = warmup_cosine_lr(step, spec.optim.lr, spec.optim.warmup, spec.optim.total_steps);
        state.opt.update(&mut state.model.store, &acc, lr);
        state.ema.update(&state.model.store);
        state.step += 1;
        let rec = MetricRecord {
            step,
            loss: lg.loss,
            lr,
            grad_norm: gn,
            ema_distance: state.ema.distance(&state.model.store),
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(io_err(run.expect("log implies run").metrics()))?;
        }
        on_metric(&rec);
        if let Some(r) = run {
            if spec.checkpoint_every > 0 && state.step.is_multiple_of(spec.checkpoint_every) {
                state.save(&r.checkpoint(state.step), spec, sched)?;
                state.save(&r.latest(), spec, sched)?;
            }
        }
    }
    if let Some(r) = run {
        state.save(&r.latest(), spec, sched)?;
    }
    Ok(())
}

/// Starts the finetune stage from a pretrained state: weights and EMA
/// carry over, the optimiser and step counter restart.
pub fn begin_finetune<T: Scalar>(pretrained: &TrainState<T>, optim: &OptimSpec) -> TrainState<T> {
    let mut st = TrainState::from_model(pretrained.model.clone(), optim);
    st.ema.shadow = pretrained.ema.shadow.clone();
    st
}
