use std::path::{Path, PathBuf};

use super::{
    ExtractorSpec, FeatureBundle, FeatureExtractor, SpeakerEmbedding, SpeechFeatures, TextCondition,
};
use crate::audio::AudioClip;
use crate::error::{ensure, Result};
use crate::nn::Tensor;
use crate::tensor_io::{read_tensor, write_tensor, DType};

/// Reads features computed elsewhere from tensor exchange files.
///
/// For an utterance `ID` the directory holds `ID.speech.tensor` (`[K × D]`),
/// `ID.text.tensor` (`[M × W]`) and `ID.speaker.tensor` (`[Q]`). Files are looked up
/// by the clip's `utt_id`; dimensions must match the spec.
pub struct ExternalExtractor {
    dir: PathBuf,
    spec: ExtractorSpec,
}

pub fn speech_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.speech.tensor"))
}

pub fn text_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.text.tensor"))
}

pub fn speaker_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.speaker.tensor"))
}

/// Writes a bundle in the layout [`ExternalExtractor`] reads (float32 payloads).
pub fn write_bundle(dir: &Path, utt_id: &str, bundle: &FeatureBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    write_tensor(speech_path(dir, utt_id), &bundle.speech.values, DType::F32)?;
    write_tensor(text_path(dir, utt_id), &bundle.text.values, DType::F32)?;
    write_tensor(
        speaker_path(dir, utt_id),
        &bundle.speaker.as_tensor(),
        DType::F32,
    )?;
    Ok(())
}

impl ExternalExtractor {
    pub fn new(spec: &ExtractorSpec) -> Self {
        ExternalExtractor {
            dir: spec.external_dir.clone().unwrap_or_default(),
            spec: spec.clone(),
        }
    }

    fn load(&self, path: PathBuf, rank: usize, last: usize) -> Result<Tensor> {
        let t = read_tensor(&path)?;
        ensure!(
            t.rank() == rank && t.last_dim() == last,
            "{}: expected rank {rank} with last dimension {last}, got {:?}",
            path.display(),
            t.shape()
        );
        Ok(t)
    }
}

impl FeatureExtractor for ExternalExtractor {
    fn speech_features(&self, clip: &AudioClip) -> Result<SpeechFeatures> {
        let t = self.load(speech_path(&self.dir, &clip.utt_id), 2, self.spec.d)?;
        SpeechFeatures::new(t)
    }

    fn text_condition(&self, utt_id: &str, transcript: &str) -> Result<TextCondition> {
        ensure!(!transcript.is_empty(), "empty transcript");
        let t = TextCondition {
            values: self.load(text_path(&self.dir, utt_id), 2, self.spec.w)?,
            token_ids: Vec::new(),
        };
        t.validate()?;
        Ok(t)
    }

    fn speaker_embedding(&self, clip: &AudioClip) -> Result<SpeakerEmbedding> {
        let t = self.load(speaker_path(&self.dir, &clip.utt_id), 1, self.spec.q)?;
        SpeakerEmbedding::normalized(t.into_data())
    }
}
