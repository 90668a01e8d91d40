use std::path::Path;

use miipher::audio::{save_wav, AudioClip, Manifest, ManifestEntry};
use miipher::cleaner::{CleanerConfig, CleanerModel};
use miipher::features::{
    cosine_similarity, extract_text_condition, write_bundle, ExtractorKind, ExtractorSpec,
};
use miipher::pipeline::{
    degrade_corpus, degraded_feature_id, evaluate, fixture_utterances, prepare_pairs, restore,
    train_cleaner, train_vocoder, write_fixture_corpus, CorpusOptions, PairedManifest,
    PatternChoice, TrainConfig, VocoderStage,
};
use miipher::vocoder::{VocoderConfig, VocoderModel};

fn segment(clip: &AudioClip, from: f64, to: f64) -> AudioClip {
    let rate = clip.sample_rate as f64;
    let samples = clip.samples[(from * rate) as usize..(to * rate) as usize].to_vec();
    clip.with_samples(samples)
}

#[test]
fn speaker_embedding_separates_fixture_speakers() {
    let fx = ExtractorSpec::desk_scale().build().unwrap();
    let utts = fixture_utterances(0);
    // Speaker i reads utt0i and utt0(i+4).
    for s in 0..4 {
        let own = &utts[s];
        let half = own.duration_seconds() / 2.0;
        let a = fx.speaker_embedding(&segment(own, 0.0, half)).unwrap();
        let b = fx
            .speaker_embedding(&segment(own, half, 2.0 * half))
            .unwrap();
        let same = cosine_similarity(&a, &b).unwrap();
        for other in (0..4).filter(|&o| o != s) {
            let c = fx.speaker_embedding(&utts[other]).unwrap();
            let across = cosine_similarity(&a, &c).unwrap();
            assert!(
                same > across,
                "speaker {s}: same {same:.4} vs speaker {other}: {across:.4}"
            );
        }
        let norm: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}

#[test]
fn one_character_edit_changes_its_text_row() {
    let spec = ExtractorSpec::desk_scale();
    let a = extract_text_condition("hello world", &spec).unwrap();
    let b = extract_text_condition("hello wOrld", &spec).unwrap();
    let c = extract_text_condition("hello xorld", &spec).unwrap();
    assert_eq!(a, b, "the tokenizer lowercases");
    assert_eq!(a.num_tokens(), 11);
    assert_ne!(a.values.row(6), c.values.row(6));
    assert!(extract_text_condition("", &spec).is_err());
}

fn tiny_spec() -> ExtractorSpec {
    ExtractorSpec {
        d: 8,
        w: 4,
        q: 4,
        ..ExtractorSpec::desk_scale()
    }
}

/// Writes surrogate features in the external layout: `<id>` for the clean side,
/// `<id>.degraded` for the degraded side.
fn write_mock_features(paired: &PairedManifest, dir: &Path) {
    let fx = tiny_spec().build().unwrap();
    let clean = paired.clean_manifest().unwrap();
    let degraded = paired.degraded_manifest().unwrap();
    for e in &paired.entries {
        let c = clean.load_clip(clean.get(&e.utt_id).unwrap()).unwrap();
        let d = degraded
            .load_clip(degraded.get(&e.utt_id).unwrap())
            .unwrap();
        let mut c = c.with_id(e.utt_id.clone());
        c.transcript = e.transcript.clone();
        let mut d = d.with_id(degraded_feature_id(&e.utt_id));
        d.transcript = e.transcript.clone();
        write_bundle(dir, &e.utt_id, &fx.bundle(&c, &c).unwrap()).unwrap();
        write_bundle(
            dir,
            &degraded_feature_id(&e.utt_id),
            &fx.bundle(&d, &d).unwrap(),
        )
        .unwrap();
    }
}

#[test]
fn pipeline_runs_against_a_mock_external_extractor() {
    let tmp = tempfile::tempdir().unwrap();
    let fixtures = write_fixture_corpus(&tmp.path().join("fixtures"), 0).unwrap();
    let clean = Manifest::load(&fixtures.clean_manifest).unwrap();
    let noise = Manifest::load(&fixtures.noise_manifest).unwrap();
    let corpus = degrade_corpus(
        &clean,
        &noise,
        &CorpusOptions {
            pattern: PatternChoice::Mixed,
            seed: 3,
            ..CorpusOptions::default()
        },
        &tmp.path().join("corpus"),
    )
    .unwrap();

    let feature_dir = tmp.path().join("features");
    write_mock_features(&corpus.paired, &feature_dir);
    let external = ExtractorSpec {
        kind: ExtractorKind::External,
        external_dir: Some(feature_dir.clone()),
        ..tiny_spec()
    }
    .build()
    .unwrap();

    let pairs = prepare_pairs(&corpus.paired, external.as_ref(), 2).unwrap();
    assert_eq!(pairs.len(), 8);
    let surrogate = tiny_spec().build().unwrap();
    let direct = prepare_pairs(&corpus.paired, surrogate.as_ref(), 1).unwrap();
    for (p, q) in pairs.iter().zip(&direct) {
        assert_eq!(p.utt_id, q.utt_id);
        // The exchange format stores float32.
        let err = p
            .degraded
            .values
            .zip_map(&q.degraded.values, |a, b| a - b)
            .max_abs();
        assert!(err < 1e-6, "{}: {err}", p.utt_id);
    }

    let train = TrainConfig {
        steps: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut cleaner = CleanerModel::new(CleanerConfig::tiny()).unwrap();
    let log = train_cleaner(&mut cleaner, &pairs, &train, None).unwrap();
    assert_eq!(log.curve("cleaner_loss").len(), 3);
    let mut vocoder = VocoderModel::new(VocoderConfig::tiny()).unwrap();
    train_vocoder(
        &mut vocoder,
        &pairs,
        VocoderStage::FinetunePredicted,
        Some(&cleaner),
        &train,
        None,
    )
    .unwrap();

    // Restoration looks features up by the clip's id; point it at the degraded bundle.
    let degraded = corpus.paired.degraded_manifest().unwrap();
    let restored_dir = tmp.path().join("restored");
    std::fs::create_dir_all(&restored_dir).unwrap();
    let mut entries = Vec::new();
    for e in &degraded.entries {
        let clip = degraded
            .load_clip(e)
            .unwrap()
            .with_id(degraded_feature_id(&e.utt_id));
        let transcript = e.transcript.as_deref().unwrap();
        let y = restore(&clip, transcript, &cleaner, &vocoder, external.as_ref(), 11).unwrap();
        let frames = external.speech_features(&clip).unwrap().num_frames();
        assert_eq!(y.sample_rate, 24_000);
        assert_eq!(y.len(), frames * 960);
        let path = restored_dir.join(format!("{}.wav", e.utt_id));
        save_wav(&y, &path).unwrap();
        entries.push(ManifestEntry {
            audio_path: path,
            ..e.clone()
        });
    }
    let restored = Manifest::new(entries).unwrap();
    let report = evaluate(&restored, &clean, &degraded, surrogate.as_ref(), None, 2).unwrap();
    assert_eq!(report.per_utt.len(), 16);
    assert!(report
        .per_utt
        .iter()
        .all(|r| (-1.0..=1.0).contains(&r.spk_similarity)));

    // Manifest row order does not change the report.
    let mut reversed = restored.clone();
    reversed.entries.reverse();
    let again = evaluate(&reversed, &clean, &degraded, surrogate.as_ref(), None, 1).unwrap();
    assert_eq!(report, again);
}

#[test]
fn evaluation_identities() {
    let tmp = tempfile::tempdir().unwrap();
    let fixtures = write_fixture_corpus(tmp.path(), 0).unwrap();
    let clean = Manifest::load(&fixtures.clean_manifest).unwrap();
    let fx = ExtractorSpec::desk_scale().build().unwrap();
    let report = evaluate(&clean, &clean, &clean, fx.as_ref(), None, 1).unwrap();
    for r in &report.per_utt {
        assert!((r.spk_similarity - 1.0).abs() < 1e-12);
        assert_eq!(r.logmel_l2, 0.0);
    }
    assert_eq!(report.aggregates["restored"], report.aggregates["degraded"]);

    let mut short = clean.clone();
    short.entries.pop();
    assert!(evaluate(&short, &clean, &clean, fx.as_ref(), None, 1).is_err());
}
