use miipher::cleaner::{cleaner_loss, CleanerConfig, CleanerModel};
use miipher::features::{ExtractorSpec, SpeechFeatures};
use miipher::pipeline::{
    fixture_pairs, fixture_utterances, train_cleaner, train_vocoder, TrainConfig, TrainingPair,
    VocoderStage,
};
use miipher::vocoder::{stft_loss, VocoderConfig, VocoderModel};
use miipher::Error;

fn desk_pairs() -> Vec<TrainingPair> {
    fixture_pairs(0, 0, ExtractorSpec::desk_scale().build().unwrap().as_ref()).unwrap()
}

fn tiny_spec() -> ExtractorSpec {
    ExtractorSpec {
        d: 8,
        w: 4,
        q: 4,
        ..ExtractorSpec::desk_scale()
    }
}

/// Summed cleaner loss over every pair at full length.
fn corpus_loss(model: &CleanerModel, pairs: &[TrainingPair]) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let outs = model
                .clean_outputs(&p.degraded.values, &p.text.values, &p.speaker.values)
                .unwrap();
            cleaner_loss(&p.clean, &outs).unwrap().total
        })
        .sum()
}

#[test]
fn cleaner_overfits_the_fixture_pairs() {
    let pairs = desk_pairs();
    assert_eq!(pairs.len(), 8);
    let mut model = CleanerModel::new(CleanerConfig::desk_scale()).unwrap();
    let before = corpus_loss(&model, &pairs);
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 8,
        lr: 1e-3,
        warmup_steps: 20,
        seed: 1,
        ..TrainConfig::default()
    };
    let log = train_cleaner(&mut model, &pairs, &cfg, None).unwrap();
    let after = corpus_loss(&model, &pairs);
    let curve = log.curve("cleaner_loss");
    assert_eq!(curve.len(), 500);
    assert!(curve.iter().all(|v| v.is_finite()));
    assert!(
        after <= 0.1 * before,
        "full-length loss {before:.2} -> {after:.2}"
    );
    assert!(
        curve[499] <= 0.1 * curve[0],
        "training loss {:.2} -> {:.2}",
        curve[0],
        curve[499]
    );
}

#[test]
fn cleaner_training_is_deterministic_and_checkpoints_reload() {
    let pairs = desk_pairs();
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 2,
        seed: 9,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut a = CleanerModel::new(CleanerConfig::desk_scale()).unwrap();
    let log_a = train_cleaner(&mut a, &pairs, &cfg, Some(dir.path())).unwrap();
    let mut b = CleanerModel::new(CleanerConfig::desk_scale()).unwrap();
    let log_b = train_cleaner(&mut b, &pairs, &cfg, None).unwrap();
    assert_eq!(log_a.records, log_b.records);
    assert_eq!(log_a.input_source, "degraded_features");

    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["cleaner_step000002.ckpt", "cleaner_step000004.ckpt"]
    );
    let reloaded = CleanerModel::load(dir.path().join("cleaner_step000004.ckpt")).unwrap();
    assert_eq!(corpus_loss(&reloaded, &pairs), corpus_loss(&a, &pairs));

    let other = TrainConfig { seed: 10, ..cfg };
    let mut c = CleanerModel::new(CleanerConfig::desk_scale()).unwrap();
    assert_ne!(
        train_cleaner(&mut c, &pairs, &other, None).unwrap().records,
        log_a.records
    );
}

#[test]
fn non_finite_input_aborts_with_a_diagnostic() {
    let mut pairs = desk_pairs();
    let mut poisoned = pairs[0].degraded.values.clone();
    poisoned.data_mut().fill(f64::NAN);
    pairs[0].degraded = SpeechFeatures {
        values: poisoned,
        ..pairs[0].degraded.clone()
    };
    let pairs = vec![pairs[0].clone()];
    let mut model = CleanerModel::new(CleanerConfig::desk_scale()).unwrap();
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 1,
        ..TrainConfig::default()
    };
    match train_cleaner(&mut model, &pairs, &cfg, None) {
        Err(e @ Error::NonFiniteLoss { .. }) => {
            let msg = e.to_string();
            assert!(
                msg.contains("utt00") && msg.contains("cleaner_loss"),
                "{msg}"
            );
            assert_eq!(e.category(), "non-finite-loss");
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn vocoder_stages_read_different_inputs() {
    let fx = tiny_spec().build().unwrap();
    let pairs = fixture_pairs(0, 0, fx.as_ref()).unwrap();
    let cfg = TrainConfig {
        steps: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let mut vocoder = VocoderModel::new(VocoderConfig::tiny()).unwrap();
    match train_vocoder(
        &mut vocoder,
        &pairs,
        VocoderStage::FinetunePredicted,
        None,
        &cfg,
        None,
    ) {
        Err(Error::Validation(msg)) => assert!(msg.contains("cleaner"), "{msg}"),
        other => panic!("expected a validation error, got {other:?}"),
    }
    let pre = train_vocoder(
        &mut vocoder,
        &pairs,
        VocoderStage::PretrainClean,
        None,
        &cfg,
        None,
    )
    .unwrap();
    let cleaner = CleanerModel::new(CleanerConfig::tiny()).unwrap();
    let fine = train_vocoder(
        &mut vocoder,
        &pairs,
        VocoderStage::FinetunePredicted,
        Some(&cleaner),
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(pre.input_source, "clean_features");
    assert_eq!(fine.input_source, "cleaner_predicted_features");
    assert_ne!(pre.curve("stft_loss"), fine.curve("stft_loss"));
}

/// Final-iteration STFT loss against the peak-normalized target, averaged over
/// three fixed initial-noise seeds.
fn overfit_score(model: &VocoderModel, pair: &TrainingPair) -> f64 {
    let peak = pair.clean_wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target: Vec<f64> = pair.clean_wave.iter().map(|v| 0.9 * v / peak).collect();
    let resolutions = &model.config.stft_loss_resolutions;
    [101u64, 202, 303]
        .iter()
        .map(|&s| {
            let y = model.synthesize(&pair.clean, &pair.speaker, s).unwrap();
            stft_loss(&y.samples, &target, resolutions).unwrap()
        })
        .sum::<f64>()
        / 3.0
}

#[test]
fn tiny_vocoder_overfits_one_crop() {
    let fx = tiny_spec().build().unwrap();
    let clean = fixture_utterances(0).remove(0);
    let full = TrainingPair::from_clips(
        &clean,
        &clean,
        clean.transcript.as_deref().unwrap(),
        fx.as_ref(),
    )
    .unwrap();
    // Frames 20..35 (0.6 s) and the matching 24 kHz samples.
    let crop = |f: &SpeechFeatures| SpeechFeatures {
        values: f.values.slice_rows(20, 15),
        ..f.clone()
    };
    let pair = TrainingPair {
        clean: crop(&full.clean),
        degraded: crop(&full.degraded),
        clean_wave: full.clean_wave[20 * 960..35 * 960].to_vec(),
        ..full
    };
    let mut model = VocoderModel::new(VocoderConfig::tiny()).unwrap();
    let before = overfit_score(&model, &pair);
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 1,
        lr: 1e-2,
        warmup_steps: 20,
        adv_start_step: usize::MAX,
        ..TrainConfig::default()
    };
    let log = train_vocoder(
        &mut model,
        &[pair.clone()],
        VocoderStage::PretrainClean,
        None,
        &cfg,
        None,
    )
    .unwrap();
    assert!(log.curve("adv_loss").is_empty());
    let after = overfit_score(&model, &pair);
    assert!(
        after < 0.3 * before,
        "STFT loss {before:.4} -> {after:.4} ({:.1}%)",
        100.0 * after / before
    );
}
