use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::PairedManifest;
use super::parallel_map;
use crate::audio::{resample, AudioClip, OUTPUT_RATE};
use crate::cleaner::{crop_training_frames, loss_graph, CleanerModel};
use crate::error::{ensure, Error, Result};
use crate::features::{FeatureExtractor, SpeakerEmbedding, SpeechFeatures, TextCondition};
use crate::nn::{warmup_lr, Adam, AdamConfig, Graph, Tensor};
use crate::seed;
use crate::vocoder::{
    discriminator_loss, feature_matching_loss, generator_adv_loss, mpd_forward, stft_loss_graph,
    StftResolution, VocoderModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; `0` saves only the final one.
    pub checkpoint_every: usize,
    pub crop_frames: usize,
    /// First step at which the vocoder's adversarial and feature-matching terms apply.
    pub adv_start_step: usize,
    /// After warm-up the learning rate follows a cosine from `lr` down to
    /// `lr * final_lr_fraction`; `1.0` keeps it constant.
    pub final_lr_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 4,
            lr: 2e-3,
            warmup_steps: 20,
            seed: 0,
            checkpoint_every: 0,
            crop_frames: 15,
            adv_start_step: 0,
            final_lr_fraction: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "steps must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.crop_frames >= 1, "crop_frames must be at least 1");
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            "learning rate must be positive"
        );
        ensure!(
            (0.0..=1.0).contains(&self.final_lr_fraction),
            "final_lr_fraction must lie in [0, 1]"
        );
        Ok(())
    }

    /// Learning rate for `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = warmup_lr(self.lr, self.warmup_steps, step);
        if step < self.warmup_steps || self.final_lr_fraction == 1.0 {
            return warm;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.final_lr_fraction;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub component: String,
    pub value: f64,
}

/// Loss curve plus the description of what the model was trained on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub input_source: String,
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    fn push(&mut self, step: usize, component: &str, value: f64) {
        self.records.push(LossRecord {
            step,
            component: component.to_string(),
            value,
        });
    }

    /// Values of one component in step order.
    pub fn curve(&self, component: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.component == component)
            .map(|r| r.value)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::corpus::write_jsonl(path, &self.records)
    }
}

/// Everything training needs from one clean/degraded pair, extracted once.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub utt_id: String,
    /// Features of the clean clip, the cleaner's target.
    pub clean: SpeechFeatures,
    /// Features of the degraded clip, the cleaner's input.
    pub degraded: SpeechFeatures,
    pub text: TextCondition,
    /// Taken from the degraded clip, as at restoration time.
    pub speaker: SpeakerEmbedding,
    /// Clean waveform at 24 kHz, the vocoder's target.
    pub clean_wave: Vec<f64>,
}

impl TrainingPair {
    pub fn from_clips(
        clean: &AudioClip,
        degraded: &AudioClip,
        transcript: &str,
        fx: &dyn FeatureExtractor,
    ) -> Result<Self> {
        ensure!(
            !transcript.trim().is_empty(),
            "utterance '{}' has no transcript",
            clean.utt_id
        );
        let clean_feats = fx.speech_features(clean)?;
        let degraded_feats = fx.speech_features(degraded)?;
        // Codec realignment keeps lengths equal, so the frame counts can only differ by
        // rounding; keep the common prefix.
        let k = clean_feats.num_frames().min(degraded_feats.num_frames());
        let trim = |f: SpeechFeatures| SpeechFeatures {
            values: f.values.slice_rows(0, k),
            ..f
        };
        Ok(TrainingPair {
            utt_id: clean.utt_id.clone(),
            clean: trim(clean_feats),
            degraded: trim(degraded_feats),
            text: fx.text_condition(&clean.utt_id, transcript)?,
            speaker: fx.speaker_embedding(degraded)?,
            clean_wave: resample(clean, OUTPUT_RATE)?.samples,
        })
    }
}

/// Id under which a file-backed extractor finds the degraded side of pair `utt_id`;
/// the clean side uses `utt_id` itself.
pub fn degraded_feature_id(utt_id: &str) -> String {
    format!("{utt_id}.degraded")
}

/// Loads and featurizes every pair of a paired manifest.
pub fn prepare_pairs(
    paired: &PairedManifest,
    fx: &dyn FeatureExtractor,
    workers: usize,
) -> Result<Vec<TrainingPair>> {
    ensure!(!paired.entries.is_empty(), "paired manifest is empty");
    let clean = paired.clean_manifest()?;
    let degraded = paired.degraded_manifest()?;
    parallel_map(&paired.entries, workers, |e| {
        let c = clean.load_clip(clean.get(&e.utt_id).expect("same ids"))?;
        let mut d = degraded.load_clip(degraded.get(&e.utt_id).expect("same ids"))?;
        d.utt_id = degraded_feature_id(&e.utt_id);
        let transcript = e.transcript.as_deref().ok_or_else(|| {
            Error::Validation(format!("utterance '{}' has no transcript", e.utt_id))
        })?;
        TrainingPair::from_clips(&c, &d, transcript, fx)
    })
}

fn non_finite(step: usize, ids: &[&str], components: &[(&str, f64)]) -> Error {
    let parts: Vec<String> = components.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Error::NonFiniteLoss {
        step,
        detail: format!("batch {ids:?}; {}", parts.join(", ")),
    }
}

/// Picks `batch_size` pair indices and a crop seed for each.
fn draw_batch(cfg: &TrainConfig, step: usize, n: usize) -> Vec<(usize, u64)> {
    let mut rng = seed::sub_rng(cfg.seed, step as u64);
    (0..cfg.batch_size)
        .map(|_| (rng.random_range(0..n), rng.random()))
        .collect()
}

fn checkpoint_path(dir: &Path, prefix: &str, step: usize) -> PathBuf {
    dir.join(format!("{prefix}_step{step:06}.ckpt"))
}

/// Trains the feature cleaner on random `crop_frames` windows of the pairs.
///
/// The per-step loss is the batch mean of the summed cleaner loss over iterations.
/// With `checkpoint_dir` set, checkpoints are written every `checkpoint_every` steps
/// and after the last step.
pub fn train_cleaner(
    model: &mut CleanerModel,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    ensure!(!pairs.is_empty(), "no training pairs");
    let c = &model.config;
    for p in pairs {
        ensure!(
            p.clean.dim() == c.d && p.text.values.cols() == c.w && p.speaker.dim() == c.q,
            "pair '{}' has dims (D {}, W {}, Q {}), cleaner expects ({}, {}, {})",
            p.utt_id,
            p.clean.dim(),
            p.text.values.cols(),
            p.speaker.dim(),
            c.d,
            c.w,
            c.q
        );
    }
    let mut opt = Adam::new(cfg.adam.clone());
    let mut log = TrainLog {
        input_source: "degraded_features".into(),
        records: Vec::new(),
    };
    for step in 0..cfg.steps {
        let batch = draw_batch(cfg, step, pairs.len());
        let ids: Vec<&str> = batch
            .iter()
            .map(|&(i, _)| pairs[i].utt_id.as_str())
            .collect();
        let g = Graph::new();
        let p = model.params.bind(&g, true);
        let mut total = None;
        for &(i, crop_seed) in &batch {
            let pair = &pairs[i];
            let (s, x, _) =
                crop_training_frames(&pair.clean, &pair.degraded, crop_seed, cfg.crop_frames)?;
            let outs = model.forward(
                &g,
                &p,
                g.constant(x.values),
                g.constant(pair.text.values.clone()),
                g.constant(pair.speaker.as_tensor()),
            );
            let l = loss_graph(&g, &s.values, &outs)?;
            total = Some(match total {
                Some(t) => l.add(t),
                None => l,
            });
        }
        let loss = total
            .expect("batch_size >= 1")
            .scale(1.0 / cfg.batch_size as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(non_finite(step, &ids, &[("cleaner_loss", value)]));
        }
        let grads = p.grads(&g.backward(loss));
        drop(p);
        let grad_norm = opt.update(&mut model.params, &grads, cfg.lr_at(step));
        log.push(step, "cleaner_loss", value);
        log.push(step, "grad_norm", grad_norm);
        save_periodic(checkpoint_dir, cfg, step, || {
            model.save(checkpoint_path(
                checkpoint_dir.unwrap(),
                "cleaner",
                step + 1,
            ))
        })?;
    }
    Ok(log)
}

fn save_periodic(
    dir: Option<&Path>,
    cfg: &TrainConfig,
    step: usize,
    save: impl FnOnce() -> Result<()>,
) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let done = step + 1;
    if done == cfg.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save()?;
    }
    Ok(())
}

/// What the vocoder is conditioned on while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocoderStage {
    /// Features of the clean recordings.
    PretrainClean,
    /// Cleaner predictions from the degraded recordings.
    FinetunePredicted,
}

impl VocoderStage {
    pub fn input_source(self) -> &'static str {
        match self {
            VocoderStage::PretrainClean => "clean_features",
            VocoderStage::FinetunePredicted => "cleaner_predicted_features",
        }
    }
}

impl fmt::Display for VocoderStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocoderStage::PretrainClean => "pretrain_clean",
            VocoderStage::FinetunePredicted => "finetune_predicted",
        })
    }
}

impl FromStr for VocoderStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "pretrain_clean" | "pretrain" => Ok(VocoderStage::PretrainClean),
            "finetune_predicted" | "finetune" => Ok(VocoderStage::FinetunePredicted),
            other => Err(Error::Validation(format!(
                "unknown vocoder stage '{other}' (pretrain_clean, finetune_predicted)"
            ))),
        }
    }
}

/// Vocoder input features per pair for `stage`.
pub fn vocoder_inputs(
    stage: VocoderStage,
    pairs: &[TrainingPair],
    cleaner: Option<&CleanerModel>,
) -> Result<Vec<SpeechFeatures>> {
    match stage {
        VocoderStage::PretrainClean => Ok(pairs.iter().map(|p| p.clean.clone()).collect()),
        VocoderStage::FinetunePredicted => {
            let cleaner = cleaner.ok_or_else(|| {
                Error::Validation("the finetune_predicted stage needs a cleaner checkpoint".into())
            })?;
            pairs
                .iter()
                .map(|p| cleaner.clean(&p.degraded, &p.text, &p.speaker))
                .collect()
        }
    }
}

/// Target waveform for a crop starting at sample `begin`: zero-padded to the vocoder's
/// output length and peak-normalized like the generator output. `None` if silent.
fn crop_target(wave: &[f64], begin: usize, len: usize, lambda: f64) -> Option<Vec<f64>> {
    let mut out = vec![0.0; len];
    let begin = begin.min(wave.len());
    let end = (begin + len).min(wave.len());
    out[..end - begin].copy_from_slice(&wave[begin..end]);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (peak > 1e-6).then(|| out.iter().map(|v| lambda * v / peak).collect())
}

/// Trains the vocoder generator with the multi-resolution STFT loss on every
/// refinement iteration, plus least-squares adversarial and feature-matching terms on
/// the final iteration from `adv_start_step` on. The discriminator takes one step per
/// generator step once the adversarial terms are active.
pub fn train_vocoder(
    model: &mut VocoderModel,
    pairs: &[TrainingPair],
    stage: VocoderStage,
    cleaner: Option<&CleanerModel>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    ensure!(!pairs.is_empty(), "no training pairs");
    let inputs = vocoder_inputs(stage, pairs, cleaner)?;
    let vc = model.config.clone();
    for (p, s) in pairs.iter().zip(&inputs) {
        ensure!(
            s.dim() == vc.d && p.speaker.dim() == vc.q,
            "pair '{}' has dims (D {}, Q {}), vocoder expects ({}, {})",
            p.utt_id,
            s.dim(),
            p.speaker.dim(),
            vc.d,
            vc.q
        );
    }
    let stfts: Vec<_> = vc
        .stft_loss_resolutions
        .iter()
        .map(StftResolution::stft)
        .collect();
    let spf = vc.samples_per_frame();
    let len = cfg.crop_frames * spf;
    let mut gen_opt = Adam::new(cfg.adam.clone());
    let mut disc_opt = Adam::new(cfg.adam.clone());
    let mut log = TrainLog {
        input_source: stage.input_source().into(),
        records: Vec::new(),
    };
    for step in 0..cfg.steps {
        let batch = draw_batch(cfg, step, pairs.len());
        let ids: Vec<&str> = batch
            .iter()
            .map(|&(i, _)| pairs[i].utt_id.as_str())
            .collect();
        let adversarial = step >= cfg.adv_start_step;
        let lr = cfg.lr_at(step);

        // Generator step.
        let g = Graph::new();
        let gp = model.generator.bind(&g, true);
        let dp = model.discriminator.bind(&g, false);
        let mut totals = (None, 0.0, 0.0, 0.0);
        let mut fakes = Vec::new();
        for (b, &(i, crop_seed)) in batch.iter().enumerate() {
            let pair = &pairs[i];
            let (s, _, offset) =
                crop_training_frames(&inputs[i], &inputs[i], crop_seed, cfg.crop_frames)?;
            let Some(target) = crop_target(&pair.clean_wave, offset * spf, len, vc.lambda_gain)
            else {
                continue;
            };
            let noise = model.initial_noise(len, seed::derive_seed(crop_seed, b as u64));
            let outs = model.synthesize_graph(
                &g,
                &gp,
                g.constant(s.values),
                g.constant(pair.speaker.as_tensor()),
                &noise,
            );
            let stft_terms: Vec<_> = outs
                .iter()
                .map(|&y| stft_loss_graph(&g, y, &target, &stfts))
                .collect();
            let stft = crate::vocoder::sum_vars(&stft_terms).scale(1.0 / outs.len() as f64);
            totals.1 += stft.item();
            let mut loss = stft.scale(vc.stft_weight);
            let y = *outs.last().expect("at least one iteration");
            if adversarial {
                let real_t = g.constant(Tensor::new(&[len], target.clone()));
                let fake = mpd_forward(&vc.mpd, &dp, y);
                let real = mpd_forward(&vc.mpd, &dp, real_t);
                let adv = generator_adv_loss(&fake);
                let fm = feature_matching_loss(&g, &real, &fake);
                totals.2 += adv.item();
                totals.3 += fm.item();
                loss = loss
                    .add(adv.scale(vc.adv_weight))
                    .add(fm.scale(vc.feature_match_weight));
            }
            fakes.push(((*y.value()).clone(), target));
            totals.0 = Some(match totals.0 {
                Some(t) => loss.add(t),
                None => loss,
            });
        }
        let Some(total) = totals.0 else {
            return Err(Error::Validation(format!(
                "step {step}: every crop in the batch was silent"
            )));
        };
        let n = fakes.len() as f64;
        let total = total.scale(1.0 / n);
        let value = total.item();
        let components = [
            ("generator_loss", value),
            ("stft_loss", totals.1 / n),
            ("adv_loss", totals.2 / n),
            ("feature_match_loss", totals.3 / n),
        ];
        if !value.is_finite() {
            return Err(non_finite(step, &ids, &components));
        }
        let grads = gp.grads(&g.backward(total));
        drop((gp, dp));
        gen_opt.update(&mut model.generator, &grads, lr);
        log.push(step, "generator_loss", components[0].1);
        log.push(step, "stft_loss", components[1].1);
        if adversarial {
            log.push(step, "adv_loss", components[2].1);
            log.push(step, "feature_match_loss", components[3].1);

            // Discriminator step on the (detached) generator outputs.
            let g = Graph::new();
            let dp = model.discriminator.bind(&g, true);
            let mut terms = Vec::new();
            for (fake, real) in &fakes {
                let f = mpd_forward(
                    &vc.mpd,
                    &dp,
                    g.constant(Tensor::new(&[len], fake.data().to_vec())),
                );
                let r = mpd_forward(&vc.mpd, &dp, g.constant(Tensor::new(&[len], real.clone())));
                terms.push(discriminator_loss(&r, &f));
            }
            let d_loss = crate::vocoder::sum_vars(&terms).scale(1.0 / n);
            let d_value = d_loss.item();
            if !d_value.is_finite() {
                return Err(non_finite(step, &ids, &[("discriminator_loss", d_value)]));
            }
            let grads = dp.grads(&g.backward(d_loss));
            drop(dp);
            disc_opt.update(&mut model.discriminator, &grads, lr);
            log.push(step, "discriminator_loss", d_value);
        }
        save_periodic(checkpoint_dir, cfg, step, || {
            model.save(checkpoint_path(
                checkpoint_dir.unwrap(),
                "vocoder",
                step + 1,
            ))
        })?;
    }
    Ok(log)
}
