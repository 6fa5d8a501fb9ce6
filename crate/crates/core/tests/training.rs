use foleygen::codec::{Codec, CodecConfig};
use foleygen::denoiser::{DenoiserConfig, InitScheme};
use foleygen::diffusion::NoiseSchedule;
use foleygen::encoders::TextEncoder;
use foleygen::pipeline::{default_video_encoder, encode_synth, train_data};
use foleygen::synthdata::{generate_corpus, CorpusSpec};
use foleygen::training::*;
use foleygen::{Error, Mat};

fn model() -> DenoiserConfig {
    DenoiserConfig {
        layers: 1,
        hidden_dim: 32,
        heads: 2,
        ffn_dim: 32,
        audio_proj_dim: 16,
        video_proj_dim: 16,
        latent_dim: 8,
        video_dim: 512,
        text_dim: 768,
        time_embed_dim: 16,
        init: InitScheme::AdaLnZero,
        positional: true,
    }
}

fn data() -> TrainData<f64> {
    let codec = Codec::<f64>::new(
        CodecConfig {
            hidden: 16,
            latent_dim: 8,
            ..CodecConfig::default()
        },
        1,
    )
    .unwrap();
    let venc = default_video_encoder::<f64>(512, 512, 8);
    let av = CorpusSpec::av(4, 1);
    let sfx = CorpusSpec::sfx(4, 2);
    let mut clips = encode_synth(&codec, &venc, &av, &generate_corpus(&av).unwrap()).unwrap();
    clips.extend(encode_synth(&codec, &venc, &sfx, &generate_corpus(&sfx).unwrap()).unwrap());
    train_data(clips, 40)
}

fn spec() -> TrainSpec {
    TrainSpec {
        optim: OptimSpec {
            lr: 1e-3,
            warmup: 2,
            total_steps: 6,
            batch: 3,
            ..OptimSpec::default()
        },
        window: Some(24),
        checkpoint_every: 2,
        seed: 4,
        ..TrainSpec::default()
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let d = data();
    let s = spec();
    let sched = NoiseSchedule::default_cosine();
    let enc = TextEncoder::default();
    let mut straight = TrainState::<f64>::new(model(), &s.optim, 9).unwrap();
    let mut losses = Vec::new();
    train(&mut straight, &d, &s, &sched, &enc, 6, None, |m| losses.push(m.loss)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let run = RunDir {
        root: dir.path().join("run"),
    };
    let mut first = TrainState::<f64>::new(model(), &s.optim, 9).unwrap();
    train(&mut first, &d, &s, &sched, &enc, 3, Some(&run), |_| {}).unwrap();
    let mut resumed = TrainState::<f64>::load(&run.latest(), &s.optim).unwrap();
    assert_eq!(resumed.step, 3);
    let mut tail = Vec::new();
    train(&mut resumed, &d, &s, &sched, &enc, 6, Some(&run), |m| tail.push(m.loss)).unwrap();
    assert_eq!(tail, losses[3..]);
    assert_eq!(resumed.model.store.values(), straight.model.store.values());
    assert_eq!(resumed.ema.shadow, straight.ema.shadow);

    let metrics = std::fs::read_to_string(run.metrics()).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(run.checkpoint(2).exists() && run.checkpoint(6).exists());
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let d = data();
    let s = spec();
    let enc = TextEncoder::default();
    let mut c1 = TextCache::default();
    let mut c2 = TextCache::default();
    let (a, da, _) = sample_batch(&d, &s, &enc, &mut c1, 5).unwrap();
    let _ = sample_batch(&d, &s, &enc, &mut c2, 2).unwrap();
    let (b, db, _) = sample_batch(&d, &s, &enc, &mut c2, 5).unwrap();
    assert_eq!(da, db);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.z0, y.z0);
        assert_eq!(x.cond_mask, y.cond_mask);
        assert_eq!(x.offset, y.offset);
    }
}

#[test]
fn frozen_encoders_give_identical_latents_across_epochs() {
    let first = data();
    let again = data();
    for (a, b) in first.av.iter().chain(&first.sfx).zip(again.av.iter().chain(&again.sfx)) {
        assert_eq!(a.posterior.mean, b.posterior.mean);
        assert_eq!(a.video, b.video);
    }
    let d = data();
    let before: Vec<Mat<f64>> = d.av.iter().map(|c| c.posterior.mean.clone()).collect();
    let s = spec();
    let mut st = TrainState::<f64>::new(model(), &s.optim, 1).unwrap();
    train(&mut st, &d, &s, &NoiseSchedule::default_cosine(), &TextEncoder::default(), 3, None, |_| {}).unwrap();
    let after: Vec<Mat<f64>> = d.av.iter().map(|c| c.posterior.mean.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn non_finite_parameters_stop_training_and_keep_a_checkpoint() {
    let d = data();
    let s = spec();
    let mut st = TrainState::<f64>::new(model(), &s.optim, 2).unwrap();
    let id = st.model.store.id("final.head.w").unwrap();
    st.model.store.value_mut(id).data[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir {
        root: dir.path().to_path_buf(),
    };
    let err = train(&mut st, &d, &s, &NoiseSchedule::default_cosine(), &TextEncoder::default(), 4, Some(&run), |_| {});
    assert!(matches!(err, Err(Error::Diverged { step: 0, .. })), "{err:?}");
    assert!(run.last_good().exists());
}

#[test]
fn finetune_keeps_weights_and_restarts_the_optimiser() {
    let d = data();
    let s = spec();
    let mut st = TrainState::<f64>::new(model(), &s.optim, 3).unwrap();
    train(&mut st, &d, &s, &NoiseSchedule::default_cosine(), &TextEncoder::default(), 2, None, |_| {}).unwrap();
    let ft = begin_finetune(&st, &s.optim);
    assert_eq!(ft.step, 0);
    assert_eq!(ft.model.store.values(), st.model.store.values());
    assert_eq!(ft.ema.shadow, st.ema.shadow);
    assert!(d.subset().av.iter().all(|c| c.high_correspondence));
}
