use foleygen::audio::Waveform;
use foleygen::autograd::Graph;
use foleygen::codec::{Codec, CodecConfig, LatentSequence};
use foleygen::denoiser::{count_parameters, Denoiser, DenoiserConfig, DenoiserInput, InitScheme};
use foleygen::encoders::{Caption, QualityTag, TextCond, TextEncoder, VideoClip};
use foleygen::pipeline::default_video_encoder;
use foleygen::synthdata::{synth_clip, CorpusSpec, EventScript};
use foleygen::{Mat, Mat64};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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
        text_dim: 768,
        time_embed_dim: 8,
        init,
        positional: true,
    }
}

fn caption() -> TextCond<f64> {
    TextEncoder::default().encode_text(&Caption::new("tone-A", QualityTag::Low))
}

#[test]
fn codec_at_48k_maps_eight_seconds_to_320_frames() {
    let cfg = CodecConfig {
        sample_rate: 48_000,
        hidden: 16,
        ..CodecConfig::default()
    };
    let c = Codec::<f32>::new(cfg, 4).unwrap();
    assert_eq!(c.ratio(), 1200);
    let w = Waveform::silence(384_000, 48_000);
    let z = c.encode(&w, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(z.frames.shape(), (320, 64));
    let back = c.decode(&LatentSequence::new(Mat::zeros(320, 64), 40)).unwrap();
    assert_eq!(back.samples.len(), 384_000);
}

#[test]
fn zero_waveform_through_zero_head_encoder_gives_zero_mean() {
    let cfg = CodecConfig {
        zero_init_heads: true,
        ..CodecConfig::default()
    };
    let c = Codec::<f64>::new(cfg, 1).unwrap();
    let post = c.posterior(&Waveform::silence(16_000, 16_000)).unwrap();
    assert!(post.mean.data.iter().all(|&v| v == 0.0));
}

#[test]
fn video_encoder_shapes_and_event_rows() {
    let spec = CorpusSpec::av(1, 0);
    let script = EventScript {
        category: 0,
        event_times: vec![4.0],
        duration_s: 8.0,
    };
    let (_, video, _) = synth_clip::<f64>(&script, &spec, 3).unwrap();
    let video = video.unwrap();
    let enc = default_video_encoder::<f64>(spec.video.dim, 512, spec.fps);
    let f = enc.encode_video(&video).unwrap();
    assert_eq!(f.feats.shape(), (64, 512));
    assert_eq!(enc.encode_video(&video).unwrap(), f);

    let background: Vec<usize> = (0..64).filter(|r| !(29..=35).contains(r)).collect();
    let mut bg_mean = vec![0.0; 512];
    for &r in &background {
        for (m, v) in bg_mean.iter_mut().zip(f.feats.row(r)) {
            *m += v / background.len() as f64;
        }
    }
    let dist = |r: usize| f.feats.row(r).iter().zip(&bg_mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let spread = background.iter().map(|&r| dist(r)).fold(0.0, f64::max);
    for r in 31..=33 {
        assert!(dist(r) > spread, "row {r}: {} vs background spread {spread}", dist(r));
    }
}

#[test]
fn desk_denoiser_output_matches_latent_shape() {
    let den = Denoiser::<f32>::new(DenoiserConfig::desk(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Mat::randn(320, 64, 1.0, &mut rng);
    let v = Mat::randn(320, 512, 1.0, &mut rng);
    let mask = vec![false; 320];
    let text = TextCond::Null;
    let out = den
        .forward(&DenoiserInput {
            latents: &z,
            cond_mask: &mask,
            video: Some(&v),
            text: &text,
            t: 500,
            offset: 0,
        })
        .unwrap();
    assert_eq!(out.shape(), (320, 64));
}

#[test]
fn paper_width_and_parameter_counts() {
    let paper = DenoiserConfig::paper();
    assert_eq!(paper.audio_proj_dim + paper.video_proj_dim, 1024);
    assert_eq!(paper.hidden_dim, 1024);
    let n = count_parameters(&paper).total();
    assert!((300_000_000..=360_000_000).contains(&n), "{n}");
    let desk = count_parameters(&DenoiserConfig::desk()).total();
    assert_eq!(desk, DESK_PARAMETERS);
    let built = Denoiser::<f32>::new(DenoiserConfig::desk(), 0).unwrap();
    let allocated: usize = built.store.values().iter().map(|m| m.len()).sum();
    assert_eq!(allocated, desk);

    let zero = DenoiserConfig {
        layers: 0,
        ..tiny(InitScheme::Random)
    };
    let b = count_parameters(&zero);
    assert_eq!(b.total(), b.embeddings + b.audio_mlp + b.video_mlp + b.text_proj + b.time_mlp + b.final_layer);
}

const DESK_PARAMETERS: usize = 7_441_664;

fn forward(den: &Denoiser<f64>, z: &Mat64, mask: &[bool], v: &Mat64, text: &TextCond<f64>) -> Mat64 {
    den.forward(&DenoiserInput {
        latents: z,
        cond_mask: mask,
        video: Some(v),
        text,
        t: 300,
        offset: 0,
    })
    .unwrap()
}

#[test]
fn mask_flag_changes_the_output() {
    let den = Denoiser::<f64>::new(tiny(InitScheme::Random), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Mat64::randn(10, 4, 1.0, &mut rng);
    let v = Mat64::randn(10, 6, 1.0, &mut rng);
    let text = caption();
    let a = forward(&den, &z, &[false; 10], &v, &text);
    let mut m = [false; 10];
    m[4] = true;
    let b = forward(&den, &z, &m, &v, &text);
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn shuffling_frames_changes_the_output() {
    let den = Denoiser::<f64>::new(tiny(InitScheme::Random), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Mat64::randn(12, 4, 1.0, &mut rng);
    let v = Mat64::randn(12, 6, 1.0, &mut rng);
    let text = caption();
    let mask = [false; 12];
    let out = forward(&den, &z, &mask, &v, &text);
    let mut perm: Vec<usize> = (0..12).collect();
    perm.shuffle(&mut rng);
    let pz = Mat::from_fn(12, 4, |r, c| z.at(perm[r], c));
    let pv = Mat::from_fn(12, 6, |r, c| v.at(perm[r], c));
    let pout = forward(&den, &pz, &mask, &pv, &text);
    let unpermuted = Mat::from_fn(12, 4, |r, c| out.at(perm[r], c));
    assert!(pout.max_abs_diff(&unpermuted) > 1e-6);
}

#[test]
fn gradients_are_finite_and_match_finite_differences() {
    let mut den = Denoiser::<f64>::new(tiny(InitScheme::Random), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = Mat64::randn(9, 4, 1.0, &mut rng);
    let v = Mat64::randn(9, 6, 1.0, &mut rng);
    let mut mask = vec![false; 9];
    mask[0] = true;
    let text = caption();
    let loss = |den: &Denoiser<f64>| -> (f64, Graph<f64>, foleygen::autograd::Var) {
        let mut g = Graph::new();
        let inp = DenoiserInput {
            latents: &z,
            cond_mask: &mask,
            video: Some(&v),
            text: &text,
            t: 420,
            offset: 3,
        };
        let out = den.forward_graph(&mut g, &[inp]).unwrap();
        let sq = g.square(out);
        let root = g.mean(sq);
        (g.scalar(root), g, root)
    };
    let (_, g, root) = loss(&den);
    let grads = g.backward(root);
    let mut acc: Vec<Option<Mat64>> = (0..den.store.len()).map(|_| None).collect();
    grads.accumulate_into(&mut acc);
    for (id, gr) in acc.iter().enumerate() {
        if den.store.is_trainable(id) && !den.store.name(id).starts_with("null_") {
            let gr = gr.as_ref().unwrap_or_else(|| panic!("{} has no gradient", den.store.name(id)));
            assert!(gr.all_finite(), "{}", den.store.name(id));
        }
    }
    let h = 1e-6;
    let mut checked = 0;
    while checked < 6 {
        let id = rng.random_range(0..den.store.len());
        let Some(gr) = acc[id].as_ref() else { continue };
        let k = rng.random_range(0..gr.len());
        let analytic = gr.data[k];
        let orig = den.store.value(id).data[k];
        den.store.value_mut(id).data[k] = orig + h;
        let up = loss(&den).0;
        den.store.value_mut(id).data[k] = orig - h;
        let down = loss(&den).0;
        den.store.value_mut(id).data[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
        assert!(err <= 1e-3, "{}[{k}]: numeric {numeric} analytic {analytic}", den.store.name(id));
        checked += 1;
    }
}

#[test]
fn video_clip_validation_rejects_wrong_frame_count() {
    let enc = default_video_encoder::<f32>(512, 512, 8);
    let clip = VideoClip {
        frames: Mat::zeros(63, 512),
        fps: 8,
        duration_s: 8.0,
    };
    assert!(enc.encode_video(&clip).is_err());
}
