use std::collections::BTreeMap;
use std::f64::consts::PI;

use proptest::prelude::*;

use miipher::audio::{load_wav, resample, save_wav, AudioClip};
use miipher::cleaner::{cleaner_loss_tensors, CleanerConfig, CleanerModel, IterationOutput};
use miipher::degrade::{degrade, sample_recipe, Pattern, SurrogateCodec};
use miipher::features::{ExtractorSpec, FeatureExtractor, SurrogateExtractor};
use miipher::nn::Tensor;
use miipher::pipeline::{fixture_noises, EvalReport, EvalRow};
use miipher::seed;
use miipher::vocoder::{gain_normalize, VocoderConfig, VocoderModel};

fn sines(freqs: &[(f64, f64, f64)], len: usize, rate: u32) -> AudioClip {
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / rate as f64;
            freqs
                .iter()
                .map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum()
        })
        .collect();
    AudioClip::new(samples, rate)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    (num / den).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Band-limited content below 0.4 x 16 kHz survives 24 kHz -> 16 kHz -> 24 kHz.
    // The first and last 20 ms are excluded: the round trip cannot see past the clip edges.
    #[test]
    fn resample_round_trip(
        comps in prop::collection::vec((50.0f64..6000.0, 0.05f64..0.3, 0.0f64..6.28), 1..5),
        thirds in 1600usize..8000,
    ) {
        let len = 3 * thirds;
        let clip = sines(&comps, len, 24_000);
        let down = resample(&clip, 16_000).unwrap();
        prop_assert_eq!(down.len(), (len as f64 * 16_000.0 / 24_000.0).round() as usize);
        let back = resample(&down, 24_000).unwrap();
        prop_assert_eq!(back.len(), len);
        let edge = 480;
        let err = rel_l2(&clip.samples[edge..len - edge], &back.samples[edge..len - edge]);
        prop_assert!(err < 1e-3, "relative L2 error {err}");
    }

    #[test]
    fn wav_round_trip_is_within_quantization(
        samples in prop::collection::vec(-1.0f64..1.0, 1..2000),
        rate in prop::sample::select(vec![8_000u32, 16_000, 22_050, 24_000, 48_000]),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        save_wav(&AudioClip::new(samples.clone(), rate), &path).unwrap();
        let back = load_wav(&path).unwrap();
        prop_assert_eq!(back.sample_rate, rate);
        prop_assert_eq!(back.len(), samples.len());
        let worst = samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 2f64.powi(-15), "max error {worst}");
    }

    #[test]
    fn gain_normalize_is_idempotent_and_scale_free(
        y in prop::collection::vec(-3.0f64..3.0, 1..200).prop_filter("not silent", |v| v.iter().any(|x| x.abs() > 1e-3)),
        lambda in 0.05f64..=1.0,
        c in 1e-3f64..1e3,
    ) {
        let once = gain_normalize(&y, lambda).unwrap();
        let twice = gain_normalize(&once, lambda).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-15 * lambda.max(1.0));
        }
        let scaled: Vec<f64> = y.iter().map(|v| v * c).collect();
        for (a, b) in once.iter().zip(&gain_normalize(&scaled, lambda).unwrap()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let peak = once.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!((peak - lambda).abs() <= 1e-15);
    }

    #[test]
    fn loss_components_are_homogeneous(
        seed_value in any::<u64>(),
        rows in 1usize..6,
        cols in 1usize..6,
        c in 0.1f64..10.0,
    ) {
        let mut rng = seed::rng(seed_value);
        let s = Tensor::randn(&[rows, cols], 1.0, &mut rng);
        let out = IterationOutput {
            pre_postnet: Tensor::randn(&[rows, cols], 1.0, &mut rng),
            post_postnet: Tensor::randn(&[rows, cols], 1.0, &mut rng),
        };
        let scaled = IterationOutput {
            pre_postnet: out.pre_postnet.scale(c),
            post_postnet: out.post_postnet.scale(c),
        };
        let a = cleaner_loss_tensors(&s, &[out]).unwrap();
        let b = cleaner_loss_tensors(&s.scale(c), &[scaled]).unwrap();
        prop_assert!(a.l1 >= 0.0 && a.l2sq >= 0.0 && a.sc >= 0.0);
        prop_assert!((b.l1 - c * a.l1).abs() <= 1e-9 * b.l1.max(1.0));
        prop_assert!((b.l2sq - c * c * a.l2sq).abs() <= 1e-9 * b.l2sq.max(1.0));
        prop_assert!((b.sc - a.sc).abs() <= 1e-9 * a.sc.max(1.0));
    }

    #[test]
    fn evaluation_aggregates_ignore_row_order(
        values in prop::collection::vec((-1.0f64..1.0, 0.0f64..20.0, -10.0f64..40.0), 1..12),
        shuffle_seed in any::<u64>(),
    ) {
        let mut rows = Vec::new();
        for (i, (spk, l2, snr)) in values.iter().enumerate() {
            for (system, shift) in [("restored", 0.0), ("degraded", 0.5)] {
                rows.push(EvalRow {
                    utt_id: format!("u{i:03}"),
                    system: system.into(),
                    spk_similarity: spk * (1.0 - shift),
                    logmel_l2: l2 + shift,
                    snr_proxy: snr - shift,
                    word_errors: None,
                    reference_words: None,
                });
            }
        }
        let base = EvalReport::from_rows(rows.clone());
        let mut rng = seed::rng(shuffle_seed);
        use rand::seq::SliceRandom;
        rows.shuffle(&mut rng);
        let shuffled = EvalReport::from_rows(rows);
        prop_assert_eq!(&base.per_utt, &shuffled.per_utt);
        for (sys, a) in &base.aggregates {
            let b = &shuffled.aggregates[sys];
            for (x, y) in [
                (a.spk_similarity, b.spk_similarity),
                (a.logmel_l2, b.logmel_l2),
                (a.snr_proxy, b.snr_proxy),
            ] {
                prop_assert!((x.mean - y.mean).abs() <= 1e-12 && (x.ci95 - y.ci95).abs() <= 1e-12);
                prop_assert_eq!(x.n, y.n);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // Frame count law of the surrogate extractor: K = (1 + floor(T16 / 160)) div 4,
    // with T16 the sample count after resampling to 16 kHz.
    #[test]
    fn speech_feature_frame_count_law(
        seconds in 0.05f64..3.0,
        rate in prop::sample::select(vec![16_000u32, 24_000]),
    ) {
        let fx = SurrogateExtractor::new(&ExtractorSpec { d: 8, w: 4, q: 4, ..ExtractorSpec::desk_scale() });
        let len = (seconds * rate as f64) as usize;
        let clip = sines(&[(220.0, 0.3, 0.0), (1500.0, 0.1, 1.0)], len, rate);
        let t16 = (len as f64 * 16_000.0 / rate as f64).round() as usize;
        let feats = fx.speech_features(&clip).unwrap();
        prop_assert_eq!(feats.num_frames(), (1 + t16 / 160) / 4);
        prop_assert_eq!(feats.dim(), 8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn vocoder_length_law(k in 1usize..60, noise_seed in any::<u64>()) {
        let model = VocoderModel::new(VocoderConfig::tiny()).unwrap();
        let mut rng = seed::rng(noise_seed);
        let s = miipher::features::SpeechFeatures::new(Tensor::randn(&[k, 8], 0.5, &mut rng)).unwrap();
        let d = miipher::features::SpeakerEmbedding::normalized(vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let y = model.synthesize(&s, &d, noise_seed).unwrap();
        prop_assert_eq!(y.len(), k * 4 * (5 * 4 * 3 * 2 * 2));
        prop_assert_eq!(y.sample_rate, 24_000);
    }

    // The degradation chain is a pure function of clip, noise bank and recipe.
    #[test]
    fn degrade_is_pure(
        recipe_seed in any::<u64>(),
        pattern in prop::sample::select(Pattern::ALL.to_vec()),
        f0 in 90.0f64..300.0,
    ) {
        let clean = sines(&[(f0, 0.3, 0.0), (3.0 * f0, 0.1, 0.5)], 24_000, 24_000);
        let bank: BTreeMap<String, AudioClip> =
            fixture_noises(3).into_iter().map(|n| (n.utt_id.clone(), n)).collect();
        let recipe = miipher::degrade::DegradationRecipe {
            noise_id: "noise_babble".into(),
            ..sample_recipe(recipe_seed, pattern)
        };
        let a = degrade(&clean, &bank, &recipe, &SurrogateCodec).unwrap();
        let b = degrade(&clean, &bank, &recipe.clone(), &SurrogateCodec).unwrap();
        prop_assert_eq!(&a.samples, &b.samples);
        prop_assert_eq!(a.len(), clean.len());
        prop_assert!(a.samples.iter().all(|v| v.is_finite()));
    }

    // Reordering text tokens changes the cleaner output for random models and inputs.
    #[test]
    fn text_token_order_matters(init_seed in 0u64..1000, data_seed in any::<u64>()) {
        let cfg = CleanerConfig { init_seed, ..CleanerConfig::tiny() };
        let model = CleanerModel::new(cfg.clone()).unwrap();
        let mut rng = seed::rng(data_seed);
        let x = Tensor::randn(&[6, cfg.d], 0.5, &mut rng);
        let e = Tensor::randn(&[4, cfg.w], 1.0, &mut rng);
        let d = Tensor::randn(&[cfg.q], 1.0, &mut rng).into_data();
        let rows: Vec<Vec<f64>> = (0..4).rev().map(|i| e.row(i).to_vec()).collect();
        let reversed = Tensor::from_rows(&rows);
        let a = model.clean_outputs(&x, &e, &d).unwrap();
        let b = model.clean_outputs(&x, &reversed, &d).unwrap();
        let diff = a.last().unwrap().post_postnet.zip_map(&b.last().unwrap().post_postnet, |p, q| p - q).max_abs();
        prop_assert!(diff > 0.0);
    }
}
