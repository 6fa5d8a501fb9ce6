//! Diffusion transformer noise estimator.
//!
//! Audio latents (plus a mask embedding marking clean conditional frames)
//! and aligned video features are projected by separate MLPs, concatenated
//! along channels and passed through pre-norm transformer blocks. Each block
//! has self-attention, cross-attention to text tokens and a gated FFN, all
//! modulated by the timestep embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnSegment, Graph, Var};
use crate::encoders::TextCond;
use crate::error::{invalid, Error, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Mat;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Modulation projections and the output head start at zero, so an
    /// untrained model predicts zero noise.
    AdaLnZero,
    /// Every projection random; used by structural tests.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub audio_proj_dim: usize,
    pub video_proj_dim: usize,
    pub latent_dim: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    pub time_embed_dim: usize,
    pub init: InitScheme,
    /// Absolute positional encoding over latent frames.
    pub positional: bool,
}

impl DenoiserConfig {
    pub fn paper() -> Self {
        Self {
            layers: 12,
            hidden_dim: 1024,
            heads: 8,
            ffn_dim: 3072,
            audio_proj_dim: 512,
            video_proj_dim: 512,
            latent_dim: 64,
            video_dim: 512,
            text_dim: 768,
            time_embed_dim: 256,
            init: InitScheme::AdaLnZero,
            positional: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            layers: 4,
            hidden_dim: 256,
            heads: 4,
            ffn_dim: 768,
            audio_proj_dim: 128,
            video_proj_dim: 128,
            ..Self::paper()
        }
    }

    /// Narrow configuration sized for single-core acceptance runs.
    pub fn compact() -> Self {
        Self {
            layers: 3,
            hidden_dim: 128,
            heads: 4,
            ffn_dim: 256,
            audio_proj_dim: 64,
            video_proj_dim: 64,
            time_embed_dim: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio_proj_dim + self.video_proj_dim != self.hidden_dim {
            return Err(invalid(format!(
                "audio_proj_dim {} + video_proj_dim {} must equal hidden_dim {}",
                self.audio_proj_dim, self.video_proj_dim, self.hidden_dim
            )));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(invalid("hidden_dim must be divisible by heads"));
        }
        if !self.time_embed_dim.is_multiple_of(2) || self.time_embed_dim == 0 {
            return Err(invalid("time_embed_dim must be even and positive"));
        }
        if [self.latent_dim, self.video_dim, self.text_dim, self.ffn_dim].contains(&0) {
            return Err(invalid("denoiser widths must be positive"));
        }
        Ok(())
    }
}

/// Parameter counts per component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embeddings: usize,
    pub audio_mlp: usize,
    pub video_mlp: usize,
    pub text_proj: usize,
    pub time_mlp: usize,
    pub blocks: usize,
    pub final_layer: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embeddings + self.audio_mlp + self.video_mlp + self.text_proj + self.time_mlp + self.blocks + self.final_layer
    }
}

/// Closed-form parameter count of a configuration.
pub fn count_parameters(cfg: &DenoiserConfig) -> ParamBreakdown {
    let lin = |i: usize, o: usize| i * o + o;
    let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
    let block = 8 * lin(d, d) + 2 * lin(d, f) + lin(f, d) + lin(d, 9 * d);
    ParamBreakdown {
        embeddings: 2 * cfg.latent_dim + cfg.video_dim + cfg.text_dim,
        audio_mlp: lin(cfg.latent_dim, cfg.audio_proj_dim) + lin(cfg.audio_proj_dim, cfg.audio_proj_dim),
        video_mlp: lin(cfg.video_dim, cfg.video_proj_dim) + lin(cfg.video_proj_dim, cfg.video_proj_dim),
        text_proj: lin(cfg.text_dim, d),
        time_mlp: lin(cfg.time_embed_dim, d) + lin(d, d),
        blocks: cfg.layers * block,
        final_layer: lin(d, 2 * d) + 2 * lin(d, cfg.latent_dim),
    }
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
    gate: Linear,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    mask_table: usize,
    null_video: usize,
    null_text: usize,
    audio1: Linear,
    audio2: Linear,
    video1: Linear,
    video2: Linear,
    text_proj: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    head: Linear,
    skip: Linear,
}

/// One sequence to denoise. `video: None` selects the null video row;
/// `TextCond::Null` selects the null text token.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserInput<'a, T> {
    pub latents: &'a Mat<T>,
    pub cond_mask: &'a [bool],
    pub video: Option<&'a Mat<T>>,
    pub text: &'a TextCond<T>,
    pub t: usize,
    /// Absolute index of the first frame, for the positional encoding.
    pub offset: usize,
}

#[derive(Clone, Debug)]
pub struct Denoiser<T: Scalar> {
    pub cfg: DenoiserConfig,
    pub store: ParamStore<T>,
    layout: Layout,
}

/// Sinusoidal embedding of scalar positions, `positions.len() x dim`.
pub fn sinusoidal<T: Scalar>(positions: &[f64], dim: usize) -> Mat<T> {
    let half = dim / 2;
    Mat::from_fn(positions.len(), dim, |r, c| {
        let i = c % half;
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = positions[r] * freq;
        T::c(if c < half { a.sin() } else { a.cos() })
    })
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let d = cfg.hidden_dim;
        let zero_or = |init: Init| if cfg.init == InitScheme::AdaLnZero { Init::Zeros } else { init };
        let out_std = Init::Normal(0.5 / (d as f64).sqrt());
        let mask_table = s.add("mask_embed", Mat::randn(2, cfg.latent_dim, 0.5, rng), true);
        let null_video = s.add("null_video", Mat::randn(1, cfg.video_dim, 0.1, rng), true);
        let null_text = s.add("null_text", Mat::randn(1, cfg.text_dim, 1.0, rng), true);
        let lin = |s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize, init: Init| {
            Linear::new(s, name, i, o, true, init, rng)
        };
        let audio1 = lin(&mut s, rng, "audio.fc1", cfg.latent_dim, cfg.audio_proj_dim, Init::FanIn);
        let audio2 = lin(&mut s, rng, "audio.fc2", cfg.audio_proj_dim, cfg.audio_proj_dim, Init::FanIn);
        let video1 = lin(&mut s, rng, "video.fc1", cfg.video_dim, cfg.video_proj_dim, Init::FanIn);
        let video2 = lin(&mut s, rng, "video.fc2", cfg.video_proj_dim, cfg.video_proj_dim, Init::FanIn);
        let text_proj = lin(&mut s, rng, "text.proj", cfg.text_dim, d, Init::FanIn);
        let time1 = lin(&mut s, rng, "time.fc1", cfg.time_embed_dim, d, Init::FanIn);
        let time2 = lin(&mut s, rng, "time.fc2", d, d, Init::FanIn);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |n: &str| format!("block{l}.{n}");
            blocks.push(Block {
                modulation: lin(&mut s, rng, &p("modulation"), d, 9 * d, zero_or(Init::Normal(0.02))),
                q: lin(&mut s, rng, &p("attn.q"), d, d, Init::FanIn),
                k: lin(&mut s, rng, &p("attn.k"), d, d, Init::FanIn),
                v: lin(&mut s, rng, &p("attn.v"), d, d, Init::FanIn),
                o: lin(&mut s, rng, &p("attn.o"), d, d, out_std),
                cq: lin(&mut s, rng, &p("cross.q"), d, d, Init::FanIn),
                ck: lin(&mut s, rng, &p("cross.k"), d, d, Init::FanIn),
                cv: lin(&mut s, rng, &p("cross.v"), d, d, Init::FanIn),
                co: lin(&mut s, rng, &p("cross.o"), d, d, out_std),
                gate: lin(&mut s, rng, &p("ffn.gate"), d, cfg.ffn_dim, Init::FanIn),
                up: lin(&mut s, rng, &p("ffn.up"), d, cfg.ffn_dim, Init::FanIn),
                down: Linear::new(&mut s, &p("ffn.down"), cfg.ffn_dim, d, true, Init::Normal(0.5 / (cfg.ffn_dim as f64).sqrt()), rng),
            });
        }
        let final_mod = lin(&mut s, rng, "final.modulation", d, 2 * d, zero_or(Init::Normal(0.02)));
        let head = lin(&mut s, rng, "final.head", d, cfg.latent_dim, zero_or(Init::FanIn));
        let skip = lin(&mut s, rng, "final.skip", d, cfg.latent_dim, zero_or(Init::Normal(0.02)));
        let layout = Layout {
            mask_table,
            null_video,
            null_text,
            audio1,
            audio2,
            video1,
            video2,
            text_proj,
            time1,
            time2,
            blocks,
            final_mod,
            head,
            skip,
        };
        Ok(Self { cfg, store: s, layout })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check(&self, inp: &DenoiserInput<T>) -> Result<()> {
        let n = inp.latents.rows;
        if n == 0 {
            return Err(invalid("empty latent sequence"));
        }
        if inp.latents.cols != self.cfg.latent_dim {
            return Err(Error::Shape(format!("latents have {} channels, expected {}", inp.latents.cols, self.cfg.latent_dim)));
        }
        if inp.cond_mask.len() != n {
            return Err(Error::Shape(format!("mask length {} vs {n} frames", inp.cond_mask.len())));
        }
        if let Some(v) = inp.video {
            if v.rows != n {
                return Err(Error::Shape(format!("video has {} rows but latents have {n}", v.rows)));
            }
            if v.cols != self.cfg.video_dim {
                return Err(Error::Shape(format!("video has {} channels, expected {}", v.cols, self.cfg.video_dim)));
            }
        }
        if let TextCond::Embedded(e) = inp.text {
            if e.tokens.cols != self.cfg.text_dim {
                return Err(Error::Shape(format!("text has {} channels, expected {}", e.tokens.cols, self.cfg.text_dim)));
            }
            if e.pad_mask.len() != e.tokens.rows {
                return Err(Error::Shape("pad mask length differs from token count".into()));
            }
            if e.pad_mask.iter().all(|&p| p) {
                return Err(invalid("text embedding has no unpadded tokens"));
            }
        }
        Ok(())
    }

    /// Builds the forward pass for a batch on `g`; returns the stacked
    /// `(sum of lengths) x latent_dim` noise estimates.
    pub fn forward_graph(&self, g: &mut Graph<T>, batch: &[DenoiserInput<T>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        for inp in batch {
            self.check(inp)?;
        }
        let cfg = &self.cfg;
        let st = &self.store;
        let ly = &self.layout;
        let d = cfg.hidden_dim;
        let lens: Vec<usize> = batch.iter().map(|b| b.latents.rows).collect();

        let lat_refs: Vec<&Mat<T>> = batch.iter().map(|b| b.latents).collect();
        let lat = g.constant(Mat::vstack(&lat_refs));
        let idx: Vec<usize> = batch.iter().flat_map(|b| b.cond_mask.iter().map(|&m| usize::from(m))).collect();
        let table = g.param(st, ly.mask_table);
        let memb = g.gather(table, &idx);
        let a = g.add(lat, memb);
        let a = ly.audio1.forward(g, st, a);
        let a = g.silu(a);
        let a = ly.audio2.forward(g, st, a);

        let null_v = g.param(st, ly.null_video);
        let mut vparts = Vec::with_capacity(batch.len());
        for b in batch {
            vparts.push(match b.video {
                Some(v) => g.constant(v.clone()),
                None => g.expand_segments(null_v, &[b.latents.rows]),
            });
        }
        let v = if vparts.len() == 1 { vparts[0] } else { g.concat_rows(&vparts) };
        let v = ly.video1.forward(g, st, v);
        let v = g.silu(v);
        let v = ly.video2.forward(g, st, v);

        let mut x = g.concat_cols(&[a, v]);
        if cfg.positional {
            let pos: Vec<f64> = batch
                .iter()
                .flat_map(|b| (b.offset..b.offset + b.latents.rows).map(|i| i as f64))
                .collect();
            let pe = g.constant(sinusoidal(&pos, d));
            x = g.add(x, pe);
        }

        let ts: Vec<f64> = batch.iter().map(|b| b.t as f64).collect();
        let temb = g.constant(sinusoidal(&ts, cfg.time_embed_dim));
        let c = ly.time1.forward(g, st, temb);
        let c = g.silu(c);
        let c = ly.time2.forward(g, st, c);
        let c_act = g.silu(c);

        let null_t = g.param(st, ly.null_text);
        let mut tparts = Vec::with_capacity(batch.len());
        let mut tlens = Vec::with_capacity(batch.len());
        for b in batch {
            match b.text {
                TextCond::Null => {
                    tparts.push(null_t);
                    tlens.push(1);
                }
                TextCond::Embedded(e) => {
                    let keep: Vec<&[T]> = (0..e.tokens.rows).filter(|&r| !e.pad_mask[r]).map(|r| e.tokens.row(r)).collect();
                    let m = Mat::from_vec(keep.len(), e.tokens.cols, keep.concat());
                    tlens.push(m.rows);
                    tparts.push(g.constant(m));
                }
            }
        }
        let text = if tparts.len() == 1 { tparts[0] } else { g.concat_rows(&tparts) };
        let text = ly.text_proj.forward(g, st, text);

        let mut self_segs = Vec::with_capacity(batch.len());
        let mut cross_segs = Vec::with_capacity(batch.len());
        let (mut q0, mut k0) = (0, 0);
        for (&l, &tl) in lens.iter().zip(&tlens) {
            self_segs.push(AttnSegment {
                q_start: q0,
                q_len: l,
                k_start: q0,
                k_len: l,
            });
            cross_segs.push(AttnSegment {
                q_start: q0,
                q_len: l,
                k_start: k0,
                k_len: tl,
            });
            q0 += l;
            k0 += tl;
        }

        for blk in &ly.blocks {
            let m = blk.modulation.forward(g, st, c_act);
            let m = g.expand_segments(m, &lens);
            let chunk = |g: &mut Graph<T>, i: usize| g.slice_cols(m, i * d, d);

            let (sh, sc, gt) = (chunk(g, 0), chunk(g, 1), chunk(g, 2));
            let h = modulated_norm(g, x, sh, sc);
            let q = blk.q.forward(g, st, h);
            let k = blk.k.forward(g, st, h);
            let vv = blk.v.forward(g, st, h);
            let att = g.attention(q, k, vv, cfg.heads, &self_segs);
            let att = blk.o.forward(g, st, att);
            let att = g.mul(gt, att);
            x = g.add(x, att);

            let (sh, sc, gt) = (chunk(g, 3), chunk(g, 4), chunk(g, 5));
            let h = modulated_norm(g, x, sh, sc);
            let q = blk.cq.forward(g, st, h);
            let k = blk.ck.forward(g, st, text);
            let vv = blk.cv.forward(g, st, text);
            let att = g.attention(q, k, vv, cfg.heads, &cross_segs);
            let att = blk.co.forward(g, st, att);
            let att = g.mul(gt, att);
            x = g.add(x, att);

            let (sh, sc, gt) = (chunk(g, 6), chunk(g, 7), chunk(g, 8));
            let h = modulated_norm(g, x, sh, sc);
            let a = blk.gate.forward(g, st, h);
            let a = g.silu(a);
            let u = blk.up.forward(g, st, h);
            let f = g.mul(a, u);
            let f = blk.down.forward(g, st, f);
            let f = g.mul(gt, f);
            x = g.add(x, f);
        }

        let m = ly.final_mod.forward(g, st, c_act);
        let m = g.expand_segments(m, &lens);
        let sh = g.slice_cols(m, 0, d);
        let sc = g.slice_cols(m, d, d);
        let h = modulated_norm(g, x, sh, sc);
        let out = ly.head.forward(g, st, h);
        // Time-dependent per-channel pass-through of the noisy input.
        let gain = ly.skip.forward(g, st, c_act);
        let gain = g.expand_segments(gain, &lens);
        let through = g.mul(gain, lat);
        Ok(g.add(out, through))
    }

    /// Inference over a batch; returns one `T_z x C_z` estimate per item.
    pub fn forward_batch(&self, batch: &[DenoiserInput<T>]) -> Result<Vec<Mat<T>>> {
        let mut g = Graph::inference();
        let out = self.forward_graph(&mut g, batch)?;
        let y = g.take_value(out);
        if !y.all_finite() {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        let mut res = Vec::with_capacity(batch.len());
        let mut r = 0;
        for b in batch {
            res.push(y.rows_range(r, r + b.latents.rows));
            r += b.latents.rows;
        }
        Ok(res)
    }

    pub fn forward(&self, inp: &DenoiserInput<T>) -> Result<Mat<T>> {
        Ok(self.forward_batch(std::slice::from_ref(inp))?.remove(0))
    }

    /// The learned null text token, as an explicit embedding.
    pub fn null_text_embedding(&self) -> Mat<T> {
        self.store.value(self.layout.null_text).clone()
    }

    /// The learned null video row broadcast over `len` frames.
    pub fn null_video_features(&self, len: usize) -> Mat<T> {
        let row = self.store.value(self.layout.null_video);
        Mat::from_fn(len, row.cols, |_, c| row.at(0, c))
    }
}

/// `LN(x) * (1 + scale) + shift`.
fn modulated_norm<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(x, T::c(LN_EPS));
    let ns = g.mul(n, scale);
    let y = g.add(n, ns);
    g.add(y, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TextEmbedding;

    fn tiny(init: InitScheme) -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            hidden_dim: 16,
            heads: 2,
            ffn_dim: 24,
            audio_proj_dim: 8,
            video_proj_dim: 8,
            latent_dim: 4,
            video_dim: 6,
            text_dim: 5,
            time_embed_dim: 8,
            init,
            positional: true,
        }
    }

    fn text(rows: usize, seed: u64) -> TextCond<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TextCond::Embedded(TextEmbedding {
            tokens: Mat::randn(rows, 5, 1.0, &mut rng),
            pad_mask: vec![false; rows],
        })
    }

    #[test]
    fn closed_form_count_matches_built_model() {
        for cfg in [tiny(InitScheme::Random), DenoiserConfig::compact(), DenoiserConfig::desk()] {
            let m = Denoiser::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(count_parameters(&cfg).total(), m.num_parameters());
        }
        let zero = DenoiserConfig {
            layers: 0,
            ..tiny(InitScheme::Random)
        };
        let b = count_parameters(&zero);
        assert_eq!(b.blocks, 0);
        assert_eq!(b.total(), Denoiser::<f32>::new(zero, 0).unwrap().num_parameters());
    }

    #[test]
    fn config_invariants() {
        let mut c = tiny(InitScheme::Random);
        c.video_proj_dim = 9;
        assert!(c.validate().is_err());
        let mut c = tiny(InitScheme::Random);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adaln_zero_starts_at_zero_output() {
        let m = Denoiser::<f64>::new(tiny(InitScheme::AdaLnZero), 1).unwrap();
        let z = Mat::from_fn(7, 4, |r, c| (r + c) as f64 * 0.1);
        let mask = vec![false; 7];
        let out = m
            .forward(&DenoiserInput {
                latents: &z,
                cond_mask: &mask,
                video: None,
                text: &TextCond::Null,
                t: 10,
                offset: 0,
            })
            .unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_forward_matches_single_items() {
        let m = Denoiser::<f64>::new(tiny(InitScheme::Random), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z1 = Mat::randn(5, 4, 1.0, &mut rng);
        let z2 = Mat::randn(3, 4, 1.0, &mut rng);
        let v1 = Mat::randn(5, 6, 1.0, &mut rng);
        let m1 = vec![true, true, false, false, false];
        let m2 = vec![false; 3];
        let t1 = text(2, 4);
        let a = DenoiserInput {
            latents: &z1,
            cond_mask: &m1,
            video: Some(&v1),
            text: &t1,
            t: 5,
            offset: 0,
        };
        let b = DenoiserInput {
            latents: &z2,
            cond_mask: &m2,
            video: None,
            text: &TextCond::Null,
            t: 900,
            offset: 0,
        };
        let both = m.forward_batch(&[a, b]).unwrap();
        assert!(both[0].max_abs_diff(&m.forward(&a).unwrap()) < 1e-12);
        assert!(both[1].max_abs_diff(&m.forward(&b).unwrap()) < 1e-12);
    }

    #[test]
    fn null_text_is_the_learned_token() {
        let m = Denoiser::<f64>::new(tiny(InitScheme::Random), 5).unwrap();
        let z = Mat::from_fn(4, 4, |r, c| (r * c) as f64 * 0.3 - 0.5);
        let mask = vec![false; 4];
        let explicit = TextCond::Embedded(TextEmbedding {
            tokens: m.null_text_embedding(),
            pad_mask: vec![false],
        });
        let run = |t: &TextCond<f64>| {
            m.forward(&DenoiserInput {
                latents: &z,
                cond_mask: &mask,
                video: None,
                text: t,
                t: 100,
                offset: 0,
            })
            .unwrap()
        };
        assert_eq!(run(&TextCond::Null), run(&explicit));
    }

    #[test]
    fn rejects_length_mismatch() {
        let m = Denoiser::<f64>::new(tiny(InitScheme::Random), 5).unwrap();
        let z = Mat::zeros(4, 4);
        let v = Mat::zeros(3, 6);
        let mask = vec![false; 4];
        let r = m.forward(&DenoiserInput {
            latents: &z,
            cond_mask: &mask,
            video: Some(&v),
            text: &TextCond::Null,
            t: 1,
            offset: 0,
        });
        assert!(r.is_err());
    }
}
