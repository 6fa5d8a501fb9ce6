use foleygen::checkpoint::Archive;
use foleygen::diffusion::{add_noise, cfg_combine, ddim_step, NoiseSchedule};
use foleygen::encoders::{align_video_features, make_caption, QualityTag, TextEncoder, VideoFeatures};
use foleygen::eval::{detect_onsets, frechet_distance, score_onsets, OnsetParams};
use foleygen::nn::warmup_cosine_lr;
use foleygen::synthdata::{synth_clip, CorpusSpec, EventScript};
use foleygen::training::{draw_example, MaskPolicy, MixPolicy};
use foleygen::encoders::DatasetSource;
use foleygen::Mat64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(rows: usize, cols: usize, seed: u64) -> Mat64 {
    Mat64::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #[test]
    fn guidance_is_affine_in_both_branches(seed in any::<u64>(), gamma in 0.0f64..12.0, a in -3.0f64..3.0) {
        let (p1, n1, p2, n2) = (mat(6, 5, seed), mat(6, 5, seed ^ 1), mat(6, 5, seed ^ 2), mat(6, 5, seed ^ 3));
        let mix = |x: &Mat64, y: &Mat64| x.zip_map(y, |u, v| a * u + (1.0 - a) * v);
        let lhs = cfg_combine(&mix(&p1, &p2), &mix(&n1, &n2), gamma).unwrap();
        let rhs = mix(&cfg_combine(&p1, &n1, gamma).unwrap(), &cfg_combine(&p2, &n2, gamma).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9);
        prop_assert!(cfg_combine(&p1, &p1, gamma).unwrap().max_abs_diff(&p1) <= 1e-12);
        prop_assert_eq!(cfg_combine(&p1, &n1, 0.0).unwrap(), p1);
    }

    #[test]
    fn perfect_noise_estimate_inverts_from_any_timestep(seed in any::<u64>(), t in 1usize..=1000, n in 1usize..=50) {
        let s = NoiseSchedule::default_cosine();
        let z0 = mat(4, 3, seed);
        let eps = mat(4, 3, !seed);
        let zt = add_noise(&z0, t, &eps, &s).unwrap();
        prop_assert!(ddim_step(&zt, &eps, t, 0, &s).unwrap().max_abs_diff(&z0) <= 1e-9);
        let mut z = add_noise(&z0, 1000, &eps, &s).unwrap();
        for (t, tp) in s.ddim_timesteps(n).unwrap() {
            z = ddim_step(&z, &eps, t, tp, &s).unwrap();
        }
        prop_assert!(z.max_abs_diff(&z0) <= 1e-9);
    }

    #[test]
    fn alignment_repeats_rows_in_order(t_v in 1usize..12, factor in 1usize..7, cols in 1usize..5, seed in any::<u64>()) {
        let vf = VideoFeatures { feats: mat(t_v, cols, seed), fps: 8 };
        let out = align_video_features(&vf, t_v * factor).unwrap();
        prop_assert_eq!(out.rows, t_v * factor);
        for r in 0..out.rows {
            prop_assert_eq!(out.row(r), vf.feats.row(r / factor));
        }
    }

    #[test]
    fn mask_spans_stay_inside_the_window(len in 1usize..400, seed in any::<u64>(), rate in 1u32..80) {
        let policy = MaskPolicy { p_mask: 1.0, ..MaskPolicy::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some((start, l)) = policy.draw(len, rate, &mut rng) {
            prop_assert!(l <= (2.0 * rate as f64) as usize);
            prop_assert!(start + l <= len);
        }
    }

    #[test]
    fn drawn_examples_are_legal(seed in any::<u64>(), clip_len in 1usize..400, window in proptest::option::of(1usize..400)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..16 {
            let d = draw_example(&MixPolicy::default(), &MaskPolicy::default(), 5, 7, clip_len, window, 40, &mut rng);
            let (start, w) = d.window;
            prop_assert!(start + w <= clip_len && w >= 1);
            if let Some((s, l)) = d.span {
                prop_assert!(s + l <= w && l <= 80);
            }
            if d.source == DatasetSource::Sfx {
                prop_assert!(!d.variant.video && d.span.is_none());
                prop_assert!(d.clip < 7);
            } else {
                prop_assert!(d.clip < 5);
            }
        }
    }

    #[test]
    fn frechet_distance_is_symmetric_and_order_free(seed in any::<u64>(), na in 4usize..12, nb in 4usize..12, shift in -2.0f64..2.0) {
        let rows = |n: usize, s: u64, off: f64| -> Vec<Vec<f64>> {
            let m = mat(n, 3, s);
            (0..n).map(|r| m.row(r).iter().map(|v| v + off).collect()).collect()
        };
        let a = rows(na, seed, 0.0);
        let b = rows(nb, seed ^ 7, shift);
        let (ab, _) = frechet_distance(&a, &b).unwrap();
        let (ba, _) = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        let mut rev = a.clone();
        rev.reverse();
        let (rb, _) = frechet_distance(&rev, &b).unwrap();
        prop_assert!((ab - rb).abs() <= 1e-9 * ab.max(1.0));
    }

    #[test]
    fn onset_scores_are_translation_covariant(times in proptest::collection::vec(0.0f64..8.0, 1..6), jitter in -0.04f64..0.04, delta in -1.0f64..1.0) {
        let truth: Vec<f64> = times.clone();
        let det: Vec<f64> = times.iter().map(|t| t + jitter).collect();
        let a = score_onsets(&det, &truth);
        let shifted = |v: &[f64]| v.iter().map(|t| t + delta).collect::<Vec<_>>();
        let b = score_onsets(&shifted(&det), &shifted(&truth));
        prop_assert_eq!(a.f1, b.f1);
        prop_assert_eq!(a.matched, b.matched);
        let (x, y) = (a.mean_abs_offset.unwrap(), b.mean_abs_offset.unwrap());
        prop_assert!((x - y).abs() <= 1e-9);
    }

    #[test]
    fn captions_render_body_then_tag(body in "[a-z]{1,8}( [a-z]{1,8}){0,2}", tag in 0usize..3, drop_c in any::<bool>(), drop_t in any::<bool>()) {
        let q = [QualityTag::Low, QualityTag::High, QualityTag::None][tag];
        let c = make_caption(&body, q, drop_c, drop_t).unwrap();
        let phrase = if drop_t { None } else { q.phrase() };
        let expect = match (drop_c, phrase) {
            (false, Some(p)) => Some(format!("{body}, {p}")),
            (false, None) => Some(body.clone()),
            (true, Some(p)) => Some(p.to_string()),
            (true, None) => None,
        };
        prop_assert_eq!(c.render(), expect.clone());
        if let Some(text) = expect {
            let words = TextEncoder::tokenize(&text).len();
            let e = TextEncoder::default().encode_str::<f32>(&text);
            prop_assert_eq!(e.tokens.rows, words.min(64));
        }
    }

    #[test]
    fn archives_roundtrip_bit_exactly(vals in proptest::collection::vec(any::<f64>(), 1..40)) {
        let mut a = Archive::<f64>::new("test", serde_json::json!({"k": 1}));
        let n = vals.len();
        a.push("x", Mat64::from_vec(1, n, vals.clone()));
        let b = Archive::<f64>::from_bytes(&a.to_bytes(), std::path::Path::new("mem")).unwrap();
        let got = &b.get("x").unwrap().data;
        prop_assert!(got.iter().zip(&vals).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn learning_rate_stays_within_peak(step in 0u64..30_000, warmup in 0u64..5000, total in 1u64..30_000) {
        let lr = warmup_cosine_lr(step, 1e-4, warmup, total.max(warmup + 1));
        prop_assert!((0.0..=1e-4 * (1.0 + 1e-12)).contains(&lr));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn detected_onsets_follow_a_delayed_clip(k in 1usize..40, category in 0usize..4) {
        let spec = CorpusSpec::sfx(1, 0);
        let script = EventScript { category, event_times: vec![1.0, 3.5, 6.0], duration_s: 8.0 };
        let (w, _, _) = synth_clip::<f32>(&script, &spec, 5).unwrap();
        let p = OnsetParams::default();
        let hop_s = p.hop as f64 / 16_000.0;
        let base = detect_onsets(&w, &p);
        let moved = detect_onsets(&w.shifted(k as f64 * hop_s), &p);
        prop_assert_eq!(base.len(), moved.len());
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((b - a - k as f64 * hop_s).abs() <= 1e-9);
        }
    }
}
