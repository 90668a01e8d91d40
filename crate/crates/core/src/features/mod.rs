//! Speech features, text conditioning and speaker embeddings.
//!
//! The three frozen encoders of the restoration model are hidden behind
//! [`FeatureExtractor`]. [`SurrogateExtractor`] is a deterministic stand-in that
//! needs no pretrained weights; [`ExternalExtractor`] reads tensors produced by
//! real encoders from a directory.

mod external;
mod surrogate;

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use external::{speaker_path, speech_path, text_path, write_bundle, ExternalExtractor};
pub use surrogate::{tokenize, SurrogateExtractor, FRAMES_PER_SECOND, MIN_SPEAKER_SECONDS};

use crate::audio::{AudioClip, FEATURE_RATE};
use crate::error::{ensure, Error, Result};
use crate::nn::Tensor;

/// Frame-level speech features `[K × D]` (X, S or Ŝ).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechFeatures {
    pub values: Tensor,
    pub frame_rate: f64,
    pub source_rate: u32,
}

impl SpeechFeatures {
    /// Wraps a `[K × D]` matrix at the standard 25 frames/s, 16 kHz source.
    pub fn new(values: Tensor) -> Result<Self> {
        let f = SpeechFeatures {
            values,
            frame_rate: FRAMES_PER_SECOND,
            source_rate: FEATURE_RATE,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.values.rank() == 2,
            "speech features must be a matrix, got shape {:?}",
            self.values.shape()
        );
        ensure!(
            self.num_frames() >= 1 && self.dim() >= 1,
            "speech features are empty"
        );
        ensure!(
            self.values.all_finite(),
            "speech features contain non-finite values"
        );
        Ok(())
    }
}

/// Token-level text conditioning `[M × W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub values: Tensor,
    pub token_ids: Vec<u32>,
}

impl TextCondition {
    pub fn num_tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.values.rank() == 2, "text condition must be a matrix");
        ensure!(self.values.rows() >= 1, "text condition has no tokens");
        ensure!(
            self.token_ids.is_empty() || self.token_ids.len() == self.values.rows(),
            "{} token ids for {} rows",
            self.token_ids.len(),
            self.values.rows()
        );
        ensure!(
            self.values.all_finite(),
            "text condition contains non-finite values"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
    pub unit_norm: bool,
}

impl SpeakerEmbedding {
    /// Scales `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        ensure!(
            n > 0.0 && n.is_finite(),
            "cannot normalize a zero or non-finite speaker vector"
        );
        Ok(SpeakerEmbedding {
            values: values.iter().map(|v| v / n).collect(),
            unit_norm: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.values.len()], self.values.clone())
    }
}

/// Features of one utterance as consumed by the cleaner.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub speech: SpeechFeatures,
    pub text: TextCondition,
    pub speaker: SpeakerEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Surrogate,
    External,
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surrogate" => Ok(ExtractorKind::Surrogate),
            "external" => Ok(ExtractorKind::External),
            other => Err(Error::Config(format!("unknown extractor kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    /// Speech feature dimension.
    #[serde(rename = "D")]
    pub d: usize,
    /// Text feature dimension.
    #[serde(rename = "W")]
    pub w: usize,
    /// Speaker embedding dimension.
    #[serde(rename = "Q")]
    pub q: usize,
    pub rng_seed: u64,
    /// Directory holding precomputed tensors, for `kind = "external"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_dir: Option<PathBuf>,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::desk_scale()
    }
}

impl ExtractorSpec {
    pub fn full_scale() -> Self {
        ExtractorSpec {
            kind: ExtractorKind::Surrogate,
            d: 1024,
            w: 512,
            q: 256,
            rng_seed: 0,
            external_dir: None,
        }
    }

    pub fn desk_scale() -> Self {
        ExtractorSpec {
            kind: ExtractorKind::Surrogate,
            d: 64,
            w: 32,
            q: 16,
            rng_seed: 0,
            external_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d >= 1 && self.w >= 1 && self.q >= 1,
            "extractor dimensions must be positive"
        );
        if self.kind == ExtractorKind::External {
            ensure!(
                self.external_dir.is_some(),
                "external extractor needs `external_dir`"
            );
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        self.validate()?;
        Ok(match self.kind {
            ExtractorKind::Surrogate => Box::new(SurrogateExtractor::new(self)),
            ExtractorKind::External => Box::new(ExternalExtractor::new(self)),
        })
    }
}

/// Source of the three conditioning signals. Implementations are immutable and
/// shareable across threads.
pub trait FeatureExtractor: Send + Sync {
    fn speech_features(&self, clip: &AudioClip) -> Result<SpeechFeatures>;

    /// `utt_id` lets file-backed extractors locate precomputed tensors.
    fn text_condition(&self, utt_id: &str, transcript: &str) -> Result<TextCondition>;

    fn speaker_embedding(&self, clip: &AudioClip) -> Result<SpeakerEmbedding>;

    fn bundle(&self, clip: &AudioClip, speaker_clip: &AudioClip) -> Result<FeatureBundle> {
        let transcript = clip.transcript.as_deref().unwrap_or_default();
        Ok(FeatureBundle {
            speech: self.speech_features(clip)?,
            text: self.text_condition(&clip.utt_id, transcript)?,
            speaker: self.speaker_embedding(speaker_clip)?,
        })
    }
}

pub fn extract_speech_features(clip: &AudioClip, spec: &ExtractorSpec) -> Result<SpeechFeatures> {
    spec.build()?.speech_features(clip)
}

pub fn extract_text_condition(transcript: &str, spec: &ExtractorSpec) -> Result<TextCondition> {
    spec.build()?.text_condition("", transcript)
}

pub fn extract_speaker_embedding(
    clip: &AudioClip,
    spec: &ExtractorSpec,
) -> Result<SpeakerEmbedding> {
    spec.build()?.speaker_embedding(clip)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    ensure!(
        a.dim() == b.dim(),
        "embedding dimensions differ: {} vs {}",
        a.dim(),
        b.dim()
    );
    let (na, nb) = (norm(&a.values), norm(&b.values));
    ensure!(na > 0.0 && nb > 0.0, "cosine similarity of a zero vector");
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
