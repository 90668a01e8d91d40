use crate::audio::AudioClip;
use crate::cleaner::CleanerModel;
use crate::error::{ensure, Result};
use crate::features::FeatureExtractor;
use crate::vocoder::VocoderModel;

/// A cleaner/vocoder pair whose dimensions have been cross-checked.
#[derive(Debug, Clone)]
pub struct Restorer {
    pub cleaner: CleanerModel,
    pub vocoder: VocoderModel,
}

impl Restorer {
    pub fn new(cleaner: CleanerModel, vocoder: VocoderModel) -> Result<Self> {
        let (c, v) = (&cleaner.config, &vocoder.config);
        ensure!(
            c.d == v.d,
            "cleaner emits D = {} features but the vocoder expects D = {}",
            c.d,
            v.d
        );
        ensure!(
            c.q == v.q,
            "cleaner uses Q = {} speaker embeddings but the vocoder expects Q = {}",
            c.q,
            v.q
        );
        Ok(Restorer { cleaner, vocoder })
    }

    /// Degraded speech in, 24 kHz restored speech out. The speaker embedding is taken
    /// from the input itself; `rng_seed` fixes the vocoder's initial noise.
    pub fn restore(
        &self,
        clip: &AudioClip,
        transcript: &str,
        fx: &dyn FeatureExtractor,
        rng_seed: u64,
    ) -> Result<AudioClip> {
        ensure!(
            !transcript.trim().is_empty(),
            "restoration needs a transcript"
        );
        let x = fx.speech_features(clip)?;
        let e = fx.text_condition(&clip.utt_id, transcript)?;
        let d = fx.speaker_embedding(clip)?;
        ensure!(
            x.dim() == self.cleaner.config.d && e.values.cols() == self.cleaner.config.w,
            "extractor dims (D {}, W {}) do not match the cleaner ({}, {})",
            x.dim(),
            e.values.cols(),
            self.cleaner.config.d,
            self.cleaner.config.w
        );
        let s_hat = self.cleaner.clean(&x, &e, &d)?;
        let mut y = self.vocoder.synthesize(&s_hat, &d, rng_seed)?;
        y.utt_id = clip.utt_id.clone();
        y.speaker_id = clip.speaker_id.clone();
        y.transcript = Some(transcript.to_string());
        Ok(y)
    }
}

pub fn restore(
    clip: &AudioClip,
    transcript: &str,
    cleaner: &CleanerModel,
    vocoder: &VocoderModel,
    fx: &dyn FeatureExtractor,
    rng_seed: u64,
) -> Result<AudioClip> {
    Restorer::new(cleaner.clone(), vocoder.clone())?.restore(clip, transcript, fx, rng_seed)
}
