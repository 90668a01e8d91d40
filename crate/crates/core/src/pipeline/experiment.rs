//! End-to-end run on the fixture corpus: degrade, train both models, restore every
//! degraded fixture and score it against the clean originals.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{degrade_corpus, CorpusOptions, PatternChoice};
use super::eval::{evaluate, EvalReport};
use super::fixtures::write_fixture_corpus;
use super::parallel_map;
use super::restore::Restorer;
use super::train::{
    prepare_pairs, train_cleaner, train_vocoder, TrainConfig, TrainLog, VocoderStage,
};
use crate::audio::{save_wav, Manifest, ManifestEntry};
use crate::cleaner::{CleanerConfig, CleanerModel};
use crate::error::{Error, Result};
use crate::features::ExtractorSpec;
use crate::seed;
use crate::vocoder::{VocoderConfig, VocoderModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub fixture_seed: u64,
    pub corpus: CorpusOptions,
    pub extractor: ExtractorSpec,
    pub cleaner: CleanerConfig,
    pub vocoder: VocoderConfig,
    pub train_cleaner: TrainConfig,
    pub pretrain_vocoder: TrainConfig,
    /// Skipped when `None`.
    pub finetune_vocoder: Option<TrainConfig>,
    pub restore_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            fixture_seed: 0,
            corpus: CorpusOptions {
                pattern: PatternChoice::Mixed,
                seed: 7,
                codec_backend: "surrogate".into(),
                workers: 1,
            },
            extractor: ExtractorSpec::desk_scale(),
            cleaner: CleanerConfig::desk_scale(),
            vocoder: VocoderConfig::desk_scale(),
            train_cleaner: TrainConfig {
                steps: 800,
                batch_size: 8,
                lr: 1e-3,
                warmup_steps: 20,
                seed: 1,
                ..TrainConfig::default()
            },
            pretrain_vocoder: TrainConfig {
                steps: 200,
                batch_size: 2,
                lr: 3e-3,
                warmup_steps: 20,
                seed: 2,
                adv_start_step: usize::MAX,
                ..TrainConfig::default()
            },
            finetune_vocoder: None,
            restore_seed: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub cleaner_log: TrainLog,
    pub vocoder_logs: Vec<TrainLog>,
    pub restored_manifest: PathBuf,
}

pub fn run_fixture_experiment(dir: &Path, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let fixtures = write_fixture_corpus(&dir.join("fixtures"), cfg.fixture_seed)?;
    let clean = Manifest::load(&fixtures.clean_manifest)?;
    let noise = Manifest::load(&fixtures.noise_manifest)?;
    let corpus = degrade_corpus(&clean, &noise, &cfg.corpus, &dir.join("corpus"))?;
    let fx = cfg.extractor.build()?;
    let workers = cfg.corpus.workers;
    let pairs = prepare_pairs(&corpus.paired, fx.as_ref(), workers)?;

    let mut cleaner = CleanerModel::new(cfg.cleaner.clone())?;
    let cleaner_log = train_cleaner(&mut cleaner, &pairs, &cfg.train_cleaner, None)?;
    let mut vocoder = VocoderModel::new(cfg.vocoder.clone())?;
    let mut vocoder_logs = vec![train_vocoder(
        &mut vocoder,
        &pairs,
        VocoderStage::PretrainClean,
        None,
        &cfg.pretrain_vocoder,
        None,
    )?];
    if let Some(ft) = &cfg.finetune_vocoder {
        vocoder_logs.push(train_vocoder(
            &mut vocoder,
            &pairs,
            VocoderStage::FinetunePredicted,
            Some(&cleaner),
            ft,
            None,
        )?);
    }
    cleaner.save(dir.join("cleaner.ckpt"))?;
    vocoder.save(dir.join("vocoder.ckpt"))?;

    let restorer = Restorer::new(cleaner, vocoder)?;
    let degraded = corpus.paired.degraded_manifest()?;
    let out_dir = dir.join("restored");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let entries = parallel_map(&degraded.entries, workers, |e| {
        let clip = degraded.load_clip(e)?;
        let transcript = e.transcript.clone().unwrap_or_default();
        let utt_seed = seed::derive_seed(cfg.restore_seed, super::stable_hash(&e.utt_id));
        let y = restorer.restore(&clip, &transcript, fx.as_ref(), utt_seed)?;
        let rel = PathBuf::from("restored").join(format!("{}.wav", e.utt_id));
        save_wav(&y, dir.join(&rel))?;
        Ok(ManifestEntry {
            utt_id: e.utt_id.clone(),
            audio_path: rel,
            transcript: e.transcript.clone(),
            speaker_id: e.speaker_id.clone(),
        })
    })?;
    let restored_manifest = dir.join("restored.jsonl");
    Manifest::new(entries)?.save(&restored_manifest)?;
    let restored = Manifest::load(&restored_manifest)?;
    let report = evaluate(&restored, &clean, &degraded, fx.as_ref(), None, workers)?;
    Ok(ExperimentOutcome {
        report,
        cleaner_log,
        vocoder_logs,
        restored_manifest,
    })
}
