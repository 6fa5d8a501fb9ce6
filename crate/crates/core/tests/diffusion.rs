use foleygen::autograd::Graph;
use foleygen::denoiser::{Denoiser, DenoiserConfig, InitScheme};
use foleygen::diffusion::*;
use foleygen::encoders::{Caption, QualityTag, TextEncoder};
use foleygen::Mat64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn l2(m: &Mat64) -> f64 {
    m.sq_norm().sqrt()
}

fn model(init: InitScheme, latent_dim: usize) -> Denoiser<f64> {
    Denoiser::new(
        DenoiserConfig {
            layers: 1,
            hidden_dim: 16,
            heads: 2,
            ffn_dim: 16,
            audio_proj_dim: 8,
            video_proj_dim: 8,
            latent_dim,
            video_dim: 6,
            text_dim: 768,
            time_embed_dim: 8,
            init,
            positional: true,
        },
        11,
    )
    .unwrap()
}

#[test]
fn schedule_endpoints() {
    let s = NoiseSchedule::default_cosine();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = Mat64::randn(320, 64, 1.0, &mut rng);
    let eps = Mat64::randn(320, 64, 1.0, &mut rng);
    let first = add_noise(&z0, 1, &eps, &s).unwrap();
    let d = first.zip_map(&z0, |a, b| a - b);
    assert!(l2(&d) / l2(&z0) <= 0.01);
    let last = add_noise(&z0, 1000, &eps, &s).unwrap();
    let d = last.zip_map(&eps, |a, b| a - b);
    assert!(l2(&d) / l2(&eps) <= 0.1, "terminal step keeps {:.3} of the signal", l2(&d) / l2(&eps));
    for t in 1..1000 {
        assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
    }
}

#[test]
fn ddim_step_to_same_time_is_identity() {
    let s = NoiseSchedule::default_cosine();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Mat64::randn(5, 3, 1.0, &mut rng);
    let e = Mat64::randn(5, 3, 1.0, &mut rng);
    assert_eq!(ddim_step(&z, &e, 400, 400, &s).unwrap(), z);
    assert!(ddim_step(&z, &e, 400, 401, &s).is_err());
    let zero = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.0]).unwrap();
    assert!(ddim_step(&z, &e, 2, 1, &zero).is_err());
}

#[test]
fn unmasked_loss_is_plain_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = Mat64::randn(7, 4, 1.0, &mut rng);
    let e = Mat64::randn(7, 4, 1.0, &mut rng);
    let (l, per) = masked_loss(&p, &e, &[false; 7]).unwrap();
    let direct: f64 = p.zip_map(&e, |a, b| (a - b) * (a - b)).sum() / 7.0;
    assert!((l - direct).abs() < 1e-12);
    assert_eq!(per.len(), 7);

    let mut mask = vec![false; 320];
    mask[..120].iter_mut().for_each(|m| *m = true);
    let p = Mat64::randn(320, 4, 1.0, &mut rng);
    let e = Mat64::randn(320, 4, 1.0, &mut rng);
    let (_, per) = masked_loss(&p, &e, &mask).unwrap();
    assert!(per[..120].iter().all(|&v| v == 0.0));
    assert!(per[120..].iter().all(|&v| v > 0.0));
}

#[test]
fn zero_denoiser_loss_is_latent_width() {
    // An adaLN-Zero model predicts exactly zero, so the loss is E||eps||^2 = C_z.
    let den = model(InitScheme::AdaLnZero, 16);
    let sched = NoiseSchedule::default_cosine();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = TextEncoder::default();
    let items: Vec<TrainItem<f64>> = (0..8)
        .map(|i| TrainItem {
            z0: Mat64::randn(200, 16, 1.0, &mut rng),
            cond_mask: (0..200).map(|r| r < 20 * i).collect(),
            video: None,
            text: enc.encode_text(&Caption::new("buzz", QualityTag::High)),
            offset: 0,
        })
        .collect();
    let mut g = Graph::inference();
    let lg = training_graph(&mut g, &den, &items, &sched, &mut rng).unwrap();
    // Std of the mean of ~1100 chi-square(16) rows is about 0.17.
    assert!((lg.loss - 16.0).abs() < 1.0, "loss {}", lg.loss);
}

#[test]
fn guidance_scale_changes_the_sample() {
    let den = model(InitScheme::Random, 4);
    let enc = TextEncoder::default();
    let sched = NoiseSchedule::default_cosine();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bundle = ConditionBundle::unconditional_audio(12, Some(Mat64::randn(12, 6, 1.0, &mut rng)));
    let cap = Caption::new("tone-B", QualityTag::Low);
    let run = |gamma: f64| {
        let spec = GuidanceSpec::text_negative(cap.clone(), NegativePrompt::Null, gamma).with_steps(20);
        sample(&den, &enc, &sched, &spec, &bundle, 9).unwrap()
    };
    let (a, b) = (run(3.0), run(5.0));
    assert!(a.all_finite() && b.all_finite());
    assert!(a.max_abs_diff(&b) > 0.0);
    assert_eq!(run(3.0), a);
}

#[test]
fn gamma_zero_ignores_the_negative_prompt() {
    let den = model(InitScheme::Random, 4);
    let enc = TextEncoder::default();
    let sched = NoiseSchedule::default_cosine();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bundle = ConditionBundle::unconditional_audio(10, Some(Mat64::randn(10, 6, 1.0, &mut rng)));
    let cap = Caption::new("chime", QualityTag::Low);
    let neg = NegativePrompt::Caption(Caption::new("buzz", QualityTag::Low));
    let g0 = GuidanceSpec::text_negative(cap.clone(), neg.clone(), 0.0).with_steps(10);
    let g0_null = GuidanceSpec::text_negative(cap.clone(), NegativePrompt::Null, 0.0).with_steps(10);
    assert_eq!(
        sample(&den, &enc, &sched, &g0, &bundle, 1).unwrap(),
        sample(&den, &enc, &sched, &g0_null, &bundle, 1).unwrap()
    );
    let g2 = GuidanceSpec::text_negative(cap, neg, 2.0).with_steps(10);
    assert!(sample(&den, &enc, &sched, &g2, &bundle, 1).unwrap().all_finite());
}
