//! Metrics for generated audio: onset synchronisation, class semantics via a
//! small trained classifier, spectral rolloff, Fréchet distance over the
//! classifier's embeddings and class-distribution KL divergence.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autograd::{Graph, Var};
use crate::checkpoint::Archive;
use crate::dsp::{power_spectrum, StftPlan};
use crate::error::{invalid, Error, Result};
use crate::nn::{AdamW, Init, Linear, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnsetParams {
    pub n_fft: usize,
    pub hop: usize,
    /// Log compression `ln(1 + c * |X|)` applied before differencing.
    pub compression: f64,
    /// Peaks must exceed this fraction of the largest flux value.
    pub rel_threshold: f64,
    /// ...and this absolute flux value.
    pub abs_threshold: f64,
    pub min_gap_s: f64,
}

impl Default for OnsetParams {
    fn default() -> Self {
        Self {
            n_fft: 256,
            hop: 160,
            compression: 10.0,
            rel_threshold: 0.25,
            abs_threshold: 5.0,
            min_gap_s: 0.1,
        }
    }
}

/// Half-wave rectified spectral flux per hop; entry `f` compares frame `f`
/// with frame `f - 1`.
pub fn spectral_flux(w: &Waveform, p: &OnsetParams) -> Vec<f64> {
    let x: Vec<f64> = w.to_f64();
    let plan = StftPlan::<f64>::new(p.n_fft, p.hop);
    let mags = plan.magnitudes(&x);
    let comp: Vec<Vec<f64>> = mags
        .iter()
        .map(|fr| fr.iter().map(|m| (p.compression * m).ln_1p()).collect())
        .collect();
    let mut flux = vec![0.0; comp.len()];
    for f in 1..comp.len() {
        flux[f] = comp[f].iter().zip(&comp[f - 1]).map(|(a, b)| (a - b).max(0.0)).sum();
    }
    flux
}

/// Onset times in seconds from spectral-flux peak picking.
pub fn detect_onsets(w: &Waveform, p: &OnsetParams) -> Vec<f64> {
    let flux = spectral_flux(w, p);
    let max = flux.iter().cloned().fold(0.0, f64::max);
    let thr = (p.rel_threshold * max).max(p.abs_threshold);
    let sr = w.sample_rate as f64;
    let gap = ((p.min_gap_s * sr) / p.hop as f64).round() as usize;
    let mut peaks: Vec<usize> = (1..flux.len())
        .filter(|&f| {
            let lo = f.saturating_sub(gap);
            let hi = (f + gap + 1).min(flux.len());
            flux[f] >= thr && (lo..hi).all(|g| flux[g] < flux[f] || (flux[g] == flux[f] && g >= f))
        })
        .collect();
    peaks.dedup();
    // A frame's new energy sits in its last hop, so the onset lies there.
    let offset = (p.n_fft - p.hop) as f64;
    peaks.iter().map(|&f| (f as f64 * p.hop as f64 + offset) / sr).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    /// Mean absolute offset over matched pairs; `None` when nothing matched.
    pub mean_abs_offset: Option<f64>,
    pub f1: f64,
    pub matched: usize,
    pub detected: usize,
    pub truth: usize,
    /// No onsets were detected at all.
    pub silent: bool,
}

/// Greedy one-to-one matching of detected onsets to truth events, closest
/// pairs first, within `window_s`.
pub fn match_onsets(detected: &[f64], truth: &[f64], window_s: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let dist = (d - t).abs();
            if dist <= window_s {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_d = vec![false; detected.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub const MATCH_WINDOW_S: f64 = 0.5;

pub fn sync_offset(generated: &Waveform, truth_events: &[f64], p: &OnsetParams) -> Result<SyncResult> {
    if truth_events.is_empty() {
        return Err(invalid("synchronisation needs at least one truth event"));
    }
    let det = detect_onsets(generated, p);
    Ok(score_onsets(&det, truth_events))
}

pub fn score_onsets(det: &[f64], truth: &[f64]) -> SyncResult {
    let m = match_onsets(det, truth, MATCH_WINDOW_S);
    let mean_abs_offset = if m.is_empty() {
        None
    } else {
        Some(m.iter().map(|&(i, j)| (det[i] - truth[j]).abs()).sum::<f64>() / m.len() as f64)
    };
    let f1 = if det.is_empty() || truth.is_empty() {
        0.0
    } else {
        2.0 * m.len() as f64 / (det.len() + truth.len()) as f64
    };
    SyncResult {
        mean_abs_offset,
        f1,
        matched: m.len(),
        detected: det.len(),
        truth: truth.len(),
        silent: det.is_empty(),
    }
}

/// Frequency below which `fraction` of the spectral energy lies; `None` for
/// silent input.
pub fn rolloff(w: &Waveform, fraction: f64) -> Option<f64> {
    let (power, freqs) = power_spectrum(&w.to_f64(), w.sample_rate);
    let total: f64 = power.iter().sum();
    if !(total > 1e-20) {
        return None;
    }
    let mut acc = 0.0;
    for (p, f) in power.iter().zip(&freqs) {
        acc += p;
        if acc >= fraction * total {
            return Some(*f);
        }
    }
    freqs.last().copied()
}

pub fn quality_rolloff(w: &Waveform) -> Option<f64> {
    rolloff(w, 0.95)
}

const FEATURE_FFT: usize = 512;
const FEATURE_POOL: usize = 2;

/// Mean-removed log power spectrum (in units of 20 dB), pooled over pairs
/// of bins.
pub fn spectral_features(w: &Waveform) -> Vec<f64> {
    let plan = StftPlan::<f64>::new(FEATURE_FFT, FEATURE_FFT / 2);
    let mags = plan.magnitudes(&w.to_f64());
    let bins = FEATURE_FFT / 2;
    let mut mean = vec![0.0; bins / FEATURE_POOL];
    for fr in &mags {
        for k in 0..bins {
            mean[k / FEATURE_POOL] += fr[k] * fr[k];
        }
    }
    let n = mags.len().max(1) as f64;
    let logs: Vec<f64> = mean.iter().map(|p| (p / n + 1e-10).log10()).collect();
    let mu = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.iter().map(|v| (v - mu) / 2.0).collect()
}

pub fn feature_dim() -> usize {
    FEATURE_FFT / 2 / FEATURE_POOL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub hidden: usize,
    pub embed: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 32,
            steps: 600,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Class posterior plus embedding for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Small MLP over spectral features. Its penultimate activations serve as
/// the embedding for distribution distances.
#[derive(Clone, Debug)]
pub struct ToyClassifier {
    pub classes: Vec<String>,
    pub spec: ClassifierSpec,
    store: ParamStore<f64>,
    l1: Linear,
    l2: Linear,
    head: Linear,
}

impl ToyClassifier {
    pub fn new(classes: Vec<String>, spec: ClassifierSpec) -> Result<Self> {
        if classes.len() < 2 {
            return Err(invalid("classifier needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", feature_dim(), spec.hidden, true, Init::FanIn, &mut rng);
        let l2 = Linear::new(&mut store, "l2", spec.hidden, spec.embed, true, Init::FanIn, &mut rng);
        let head = Linear::new(&mut store, "head", spec.embed, classes.len(), true, Init::FanIn, &mut rng);
        Ok(Self {
            classes,
            spec,
            store,
            l1,
            l2,
            head,
        })
    }

    fn graph(&self, g: &mut Graph<f64>, x: Var) -> (Var, Var) {
        let h = self.l1.forward(g, &self.store, x);
        let h = g.tanh(h);
        let e = self.l2.forward(g, &self.store, h);
        let e = g.tanh(e);
        let logits = self.head.forward(g, &self.store, e);
        (e, logits)
    }

    /// Trains on labelled clips; `noise` clips get a uniform target.
    pub fn train(classes: Vec<String>, labelled: &[(Waveform, usize)], noise: &[Waveform], spec: ClassifierSpec) -> Result<Self> {
        let mut clf = Self::new(classes, spec)?;
        let k = clf.classes.len();
        if labelled.iter().any(|(_, c)| *c >= k) {
            return Err(invalid("label out of range"));
        }
        let rows: Vec<Vec<f64>> = labelled.iter().map(|(w, _)| spectral_features(w)).chain(noise.iter().map(spectral_features)).collect();
        let n = rows.len();
        let x = Mat::from_fn(n, feature_dim(), |r, c| rows[r][c]);
        let y = Mat::from_fn(n, k, |r, c| {
            if r < labelled.len() {
                if labelled[r].1 == c {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 / k as f64
            }
        });
        let mut opt = AdamW::new(&clf.store, 0.0);
        for _ in 0..clf.spec.steps {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (_, logits) = clf.graph(&mut g, xv);
            let loss = g.softmax_xent(logits, &y);
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite("classifier loss".into()));
            }
            let grads = g.backward(loss);
            let mut acc = vec![None; clf.store.len()];
            grads.accumulate_into(&mut acc);
            opt.update(&mut clf.store, &acc, clf.spec.lr);
        }
        Ok(clf)
    }

    pub fn run(&self, w: &Waveform) -> ClassifierOutput {
        let f = spectral_features(w);
        let mut g = Graph::inference();
        let xv = g.constant(Mat::from_vec(1, f.len(), f));
        let (e, logits) = self.graph(&mut g, xv);
        let l = g.value(logits).data.clone();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        ClassifierOutput {
            probs: ex.iter().map(|v| v / s).collect(),
            embedding: g.value(e).data.clone(),
        }
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| invalid(format!("unknown category {name:?}")))
    }

    pub fn predict(&self, w: &Waveform) -> usize {
        argmax(&self.run(w).probs)
    }

    pub fn to_archive(&self) -> Archive<f64> {
        let meta = serde_json::json!({"classes": self.classes, "spec": self.spec});
        let mut a = Archive::new("classifier", meta);
        for (i, n) in self.store.names().iter().enumerate() {
            a.push(n.clone(), self.store.value(i).clone());
        }
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::<f64>::load(path)?;
        let bad = |d: &str| Error::Format {
            path: path.to_path_buf(),
            detail: d.into(),
        };
        if a.kind != "classifier" {
            return Err(bad("not a classifier checkpoint"));
        }
        let classes: Vec<String> = serde_json::from_value(a.meta["classes"].clone())?;
        let spec: ClassifierSpec = serde_json::from_value(a.meta["spec"].clone())?;
        let mut c = Self::new(classes, spec)?;
        let vals = c
            .store
            .names()
            .iter()
            .map(|n| a.get(n).cloned().ok_or_else(|| bad("missing tensor")))
            .collect::<Result<Vec<_>>>()?;
        c.store.load_values(vals);
        Ok(c)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticScore {
    pub probability: f64,
    pub top1: bool,
}

pub fn semantic_score(clf: &ToyClassifier, generated: &Waveform, target: &str) -> Result<SemanticScore> {
    let idx = clf.class_index(target)?;
    let out = clf.run(generated);
    Ok(SemanticScore {
        probability: out.probs[idx],
        top1: argmax(&out.probs) == idx,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub frechet: f64,
    pub kld: f64,
    /// A covariance was singular and regularised.
    pub regularised: bool,
}

pub const COV_EPS: f64 = 1e-6;
pub const MIN_SET: usize = 16;

fn gaussian_fit(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mu = vec![0.0; d];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n as f64 - 1.0);
            }
        }
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().any(|&v| v < COV_EPS)
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("Fréchet distance needs at least two embeddings per set"));
    }
    if a[0].len() != b[0].len() {
        return Err(Error::Shape("embedding widths differ".into()));
    }
    let (ma, mut ca) = gaussian_fit(a);
    let (mb, mut cb) = gaussian_fit(b);
    let singular = is_singular(&ca) || is_singular(&cb);
    if singular {
        let d = ca.nrows();
        ca += DMatrix::identity(d, d) * COV_EPS;
        cb += DMatrix::identity(d, d) * COV_EPS;
    }
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    // Average both orderings so the result is symmetric to rounding.
    let cross = |p: &DMatrix<f64>, q: &DMatrix<f64>| {
        let sp = sym_sqrt(p);
        let inner = &sp * q * &sp;
        sym_sqrt(&((&inner + inner.transpose()) * 0.5)).trace()
    };
    let tr = 0.5 * (cross(&ca, &cb) + cross(&cb, &ca));
    let fd = mean_term + ca.trace() + cb.trace() - 2.0 * tr;
    Ok((fd.max(0.0), singular))
}

/// Mean KL(reference || generated) over paired class distributions.
pub fn mean_kld(reference: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    if reference.len() != generated.len() || reference.is_empty() {
        return Err(invalid("KL divergence needs equally sized, non-empty paired sets"));
    }
    let tiny = 1e-12;
    let total: f64 = reference
        .iter()
        .zip(generated)
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, qi)| pi * ((pi + tiny).ln() - (qi + tiny).ln()))
                .sum::<f64>()
                .max(0.0)
        })
        .sum();
    Ok(total / reference.len() as f64)
}

pub fn frechet_and_kld(clf: &ToyClassifier, generated: &[Waveform], reference: &[Waveform]) -> Result<Distances> {
    if generated.len() < MIN_SET || reference.len() < MIN_SET {
        return Err(invalid(format!("distribution metrics need at least {MIN_SET} clips per set")));
    }
    let g: Vec<ClassifierOutput> = generated.iter().map(|w| clf.run(w)).collect();
    let r: Vec<ClassifierOutput> = reference.iter().map(|w| clf.run(w)).collect();
    let ge: Vec<Vec<f64>> = g.iter().map(|o| o.embedding.clone()).collect();
    let re: Vec<Vec<f64>> = r.iter().map(|o| o.embedding.clone()).collect();
    let (frechet, regularised) = frechet_distance(&re, &ge)?;
    let gp: Vec<Vec<f64>> = g.into_iter().map(|o| o.probs).collect();
    let rp: Vec<Vec<f64>> = r.into_iter().map(|o| o.probs).collect();
    Ok(Distances {
        frechet,
        kld: mean_kld(&rp, &gp)?,
        regularised,
    })
}

/// One generated clip to score.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub generated: Waveform,
    pub reference: Option<Waveform>,
    pub target_category: String,
    pub truth_events: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_clips: usize,
    pub sync_mean_abs_offset: Option<f64>,
    pub onset_f1: f64,
    pub silent_clips: usize,
    pub class_accuracy: f64,
    /// Rows: target class; columns: predicted class.
    pub class_confusion: Vec<Vec<usize>>,
    pub spectral_rolloff_hz: Vec<Option<f64>>,
    pub mean_rolloff_hz: Option<f64>,
    pub frechet_distance: Option<f64>,
    pub kld: Option<f64>,
    pub covariance_regularised: bool,
}

pub fn evaluate(clf: &ToyClassifier, items: &[EvalItem], p: &OnsetParams) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    let k = clf.classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut offsets = Vec::new();
    let mut f1s = Vec::new();
    let mut silent = 0;
    let mut rolloffs = Vec::new();
    let mut correct = 0;
    for it in items {
        let target = clf.class_index(&it.target_category)?;
        let pred = clf.predict(&it.generated);
        confusion[target][pred] += 1;
        if pred == target {
            correct += 1;
        }
        if !it.truth_events.is_empty() {
            let s = sync_offset(&it.generated, &it.truth_events, p)?;
            if let Some(o) = s.mean_abs_offset {
                offsets.push(o);
            }
            if s.silent {
                silent += 1;
            }
            f1s.push(s.f1);
        }
        rolloffs.push(quality_rolloff(&it.generated));
    }
    let defined: Vec<f64> = rolloffs.iter().flatten().copied().collect();
    let refs: Vec<Waveform> = items.iter().filter_map(|i| i.reference.clone()).collect();
    let dist = if refs.len() == items.len() && items.len() >= MIN_SET {
        let gens: Vec<Waveform> = items.iter().map(|i| i.generated.clone()).collect();
        Some(frechet_and_kld(clf, &gens, &refs)?)
    } else {
        None
    };
    Ok(EvalReport {
        n_clips: items.len(),
        sync_mean_abs_offset: mean(&offsets),
        onset_f1: mean(&f1s).unwrap_or(0.0),
        silent_clips: silent,
        class_accuracy: correct as f64 / items.len() as f64,
        class_confusion: confusion,
        spectral_rolloff_hz: rolloffs,
        mean_rolloff_hz: mean(&defined),
        frechet_distance: dist.as_ref().map(|d| d.frechet),
        kld: dist.as_ref().map(|d| d.kld),
        covariance_regularised: dist.is_some_and(|d| d.regularised),
    })
}

pub fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl EvalReport {
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        s.push_str(&format!("{:<28}{}\n", "clips", self.n_clips));
        s.push_str(&format!("{:<28}{}\n", "sync mean |offset| (s)", opt(self.sync_mean_abs_offset)));
        s.push_str(&format!("{:<28}{:.4}\n", "onset F1", self.onset_f1));
        s.push_str(&format!("{:<28}{}\n", "silent clips", self.silent_clips));
        s.push_str(&format!("{:<28}{:.4}\n", "class accuracy", self.class_accuracy));
        s.push_str(&format!("{:<28}{}\n", "mean rolloff (Hz)", opt(self.mean_rolloff_hz)));
        s.push_str(&format!("{:<28}{}\n", "Fréchet distance", opt(self.frechet_distance)));
        s.push_str(&format!("{:<28}{}\n", "KLD", opt(self.kld)));
        s
    }
}

/// Noise clips at random levels with a random one-pole spectral tilt, for
/// the classifier's uniform target.
pub fn noise_clips(n: usize, len: usize, sample_rate: u32, seed: u64) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let level = 10f64.powf(rng.random_range(-4.0..-0.7));
            let pole: f64 = rng.random_range(-0.9..0.9);
            let mut prev = 0.0;
            let s = (0..len)
                .map(|_| {
                    prev = pole * prev + rng.sample::<f64, _>(StandardNormal);
                    (level * prev * (1.0 - pole.abs())).clamp(-1.0, 1.0) as f32
                })
                .collect();
            Waveform { samples: s, sample_rate }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, secs: f64) -> Waveform {
        let sr = 16000;
        let n = (secs * sr as f64) as usize;
        Waveform {
            samples: (0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin()) as f32).collect(),
            sample_rate: sr,
        }
    }

    #[test]
    fn sine_rolloff_is_its_frequency() {
        let r = quality_rolloff(&sine(440.0, 1.0)).unwrap();
        assert!((400.0..=500.0).contains(&r), "{r}");
        assert!(quality_rolloff(&Waveform::silence(1600, 16000)).is_none());
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        let m = match_onsets(&[1.0, 1.05, 3.0], &[1.02, 2.9, 6.0], 0.5);
        assert_eq!(m.len(), 2);
        let r = score_onsets(&[1.0, 1.05, 3.0], &[1.02, 2.9, 6.0]);
        assert!((r.f1 - 4.0 / 6.0).abs() < 1e-12);
        let e = score_onsets(&[], &[1.0]);
        assert_eq!(e.f1, 0.0);
        assert!(e.silent && e.mean_abs_offset.is_none());
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<Vec<f64>> = (0..20).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let (fd, _) = frechet_distance(&a, &a).unwrap();
        assert!(fd.abs() < 1e-6, "{fd}");
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 1.0).collect()).collect();
        let (fd2, _) = frechet_distance(&a, &b).unwrap();
        assert!((fd2 - 8.0).abs() < 1e-6, "{fd2}");
    }

    #[test]
    fn kld_of_identical_distributions_is_zero() {
        let p = vec![vec![0.2, 0.8], vec![0.5, 0.5]];
        assert!(mean_kld(&p, &p).unwrap().abs() < 1e-12);
        let q = vec![vec![0.8, 0.2], vec![0.5, 0.5]];
        assert!(mean_kld(&p, &q).unwrap() > 0.0);
    }
}
