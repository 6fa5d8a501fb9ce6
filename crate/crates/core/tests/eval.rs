use foleygen::audio::Waveform;
use foleygen::eval::*;
use foleygen::synthdata::{default_classes, generate_corpus, synth_clip, CorpusSpec, EventScript};

fn script(category: usize, times: &[f64]) -> EventScript {
    EventScript {
        category,
        event_times: times.to_vec(),
        duration_s: 8.0,
    }
}

fn clip(spec: &CorpusSpec, category: usize, times: &[f64], seed: u64) -> Waveform {
    synth_clip::<f32>(&script(category, times), spec, seed).unwrap().0
}

fn classifier() -> (ToyClassifier, Vec<String>) {
    let names: Vec<String> = default_classes().into_iter().map(|c| c.name).collect();
    let mut labelled = Vec::new();
    for s in [CorpusSpec::av(16, 11), CorpusSpec::sfx(16, 12)] {
        for c in generate_corpus::<f32>(&s).unwrap() {
            labelled.push((c.audio, c.script.category));
        }
    }
    let noise = noise_clips(48, 128_000, 16_000, 3);
    (ToyClassifier::train(names.clone(), &labelled, &noise, ClassifierSpec::default()).unwrap(), names)
}

#[test]
fn clean_clip_onsets_match_script() {
    let spec = CorpusSpec::av(1, 0);
    let w = clip(&spec, 0, &[1.0, 4.0], 5);
    let s = sync_offset(&w, &[1.0, 4.0], &OnsetParams::default()).unwrap();
    assert_eq!(s.f1, 1.0);
    assert!(s.mean_abs_offset.unwrap() <= 0.025, "{s:?}");
}

#[test]
fn shifted_audio_reports_the_shift() {
    let spec = CorpusSpec::av(1, 0);
    let w = clip(&spec, 1, &[1.0, 4.0], 6).shifted(0.2);
    let s = sync_offset(&w, &[1.0, 4.0], &OnsetParams::default()).unwrap();
    let off = s.mean_abs_offset.unwrap();
    assert!((off - 0.2).abs() <= 0.025, "offset {off}");
}

#[test]
fn silent_audio_scores_zero() {
    let w = Waveform::silence(128_000, 16_000);
    let s = sync_offset(&w, &[1.0, 4.0], &OnsetParams::default()).unwrap();
    assert_eq!(s.f1, 0.0);
    assert!(s.silent && s.mean_abs_offset.is_none());
}

#[test]
fn corpus_onsets_agree_with_scripts_within_a_latent_frame() {
    let p = OnsetParams::default();
    for spec in [CorpusSpec::av(16, 21), CorpusSpec::sfx(16, 22)] {
        for c in generate_corpus::<f32>(&spec).unwrap() {
            let det = detect_onsets(&c.audio, &p);
            let m = match_onsets(&det, &c.script.event_times, MATCH_WINDOW_S);
            assert_eq!(m.len(), det.len(), "{}: spurious onsets {det:?}", c.id);
            assert_eq!(m.len(), c.script.event_times.len(), "{}: missed events", c.id);
            for (i, j) in m {
                assert!((det[i] - c.script.event_times[j]).abs() <= 0.025, "{}: {det:?}", c.id);
            }
        }
    }
}

#[test]
fn classes_are_linearly_separable_on_mean_spectra() {
    // Nearest class mean is a linear decision rule.
    let train = generate_corpus::<f32>(&CorpusSpec::sfx(32, 31)).unwrap();
    let k = default_classes().len();
    let dim = feature_dim();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0.0; k];
    for c in &train {
        for (m, v) in centroids[c.script.category].iter_mut().zip(spectral_features(&c.audio)) {
            *m += v;
        }
        counts[c.script.category] += 1.0;
    }
    for (m, n) in centroids.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n);
    }
    let mut test = generate_corpus::<f32>(&CorpusSpec::sfx(32, 32)).unwrap();
    test.extend(generate_corpus::<f32>(&CorpusSpec::av(32, 33)).unwrap());
    let correct = test
        .iter()
        .filter(|c| {
            let f = spectral_features(&c.audio);
            let d: Vec<f64> = centroids
                .iter()
                .map(|m| -m.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            argmax(&d) == c.script.category
        })
        .count();
    assert!(correct as f64 / test.len() as f64 >= 0.99, "{correct}/{}", test.len());
}

#[test]
fn classifier_is_confident_on_clean_clips_and_hedges_on_noise() {
    let (clf, names) = classifier();
    let spec = CorpusSpec::sfx(1, 0);
    for a in 0..names.len() {
        let w = clip(&spec, a, &[0.5, 2.0, 5.0], 40 + a as u64);
        let s = semantic_score(&clf, &w, &names[a]).unwrap();
        assert!(s.probability >= 0.99, "class {a}: {}", s.probability);
        let b = (a + 1) % names.len();
        assert!(semantic_score(&clf, &w, &names[b]).unwrap().probability <= 0.01);
    }
    for n in noise_clips(8, 128_000, 16_000, 777) {
        let p = clf.run(&n).probs;
        assert!(p.iter().cloned().fold(0.0, f64::max) <= 0.5, "{p:?}");
    }
}

#[test]
fn rolloff_tracks_band_limit() {
    let av = CorpusSpec::av(1, 0);
    let sfx = CorpusSpec::sfx(1, 0);
    let limit = 16_000.0 / 3.0;
    for k in 0..4 {
        let lo = quality_rolloff(&clip(&av, k, &[1.0, 3.0, 6.0], 50 + k as u64)).unwrap();
        let hi = quality_rolloff(&clip(&sfx, k, &[1.0, 3.0, 6.0], 50 + k as u64)).unwrap();
        assert!(lo <= limit * 1.05, "band-limited rolloff {lo}");
        assert!(hi > limit, "full-band rolloff {hi}");
    }
}

#[test]
fn distribution_distances_separate_sets() {
    let (clf, _) = classifier();
    let spec = CorpusSpec::sfx(1, 0);
    let set = |k: usize, base: u64| -> Vec<Waveform> {
        (0..16).map(|i| clip(&spec, k, &[0.5 + 0.25 * (i % 4) as f64, 3.0, 6.0], base + i as u64)).collect()
    };
    let a = set(0, 100);
    let b = set(2, 200);
    let same = frechet_and_kld(&clf, &a, &a).unwrap();
    assert!(same.frechet.abs() <= 1e-6 && same.kld.abs() <= 1e-9, "{same:?}");
    let apart = frechet_and_kld(&clf, &b, &a).unwrap();
    assert!(apart.frechet > 0.0 && apart.kld > 0.0, "{apart:?}");
    let mut noisy = a.clone();
    noisy[3] = noise_clips(1, 128_000, 16_000, 9).remove(0);
    let one_off = frechet_and_kld(&clf, &noisy, &a).unwrap();
    assert!(one_off.frechet > same.frechet);
    assert!(frechet_and_kld(&clf, &a[..8], &a).is_err());
}
