//! Waveform containers, WAV I/O, resampling, spectral front-ends and corpus manifests.

mod manifest;
mod mel;
mod resample;
mod wav;

pub use manifest::{Manifest, ManifestEntry};
pub use mel::{log_mel, mel_filterbank, MelConfig, Stft, LOG_MEL_FLOOR};
pub use resample::resample;
pub use wav::{load_wav, save_wav};

use crate::error::{ensure, Result};

/// Rate of every restored output and of the vocoder training targets.
pub const OUTPUT_RATE: u32 = 24_000;
/// Rate consumed by the speech feature extractor.
pub const FEATURE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub utt_id: String,
    pub speaker_id: Option<String>,
    pub transcript: Option<String>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
            utt_id: String::new(),
            speaker_id: None,
            transcript: None,
        }
    }

    pub fn with_id(mut self, utt_id: impl Into<String>) -> Self {
        self.utt_id = utt_id.into();
        self
    }

    /// Same metadata, different samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        AudioClip {
            samples,
            sample_rate: self.sample_rate,
            utt_id: self.utt_id.clone(),
            speaker_id: self.speaker_id.clone(),
            transcript: self.transcript.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        peak(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Checks the invariants of a pipeline-internal clip.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.samples.is_empty(),
            "clip '{}' has no samples",
            self.utt_id
        );
        ensure!(
            self.sample_rate == FEATURE_RATE || self.sample_rate == OUTPUT_RATE,
            "clip '{}' has sample rate {} (expected 16000 or 24000)",
            self.utt_id,
            self.sample_rate
        );
        ensure!(
            self.samples.iter().all(|v| v.is_finite()),
            "clip '{}' has non-finite samples",
            self.utt_id
        );
        Ok(())
    }
}

pub fn peak(samples: &[f64]) -> f64 {
    samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Scales `samples` down so that the peak is at most `limit`. Returns the applied gain.
pub fn limit_peak(samples: &mut [f64], limit: f64) -> f64 {
    let p = peak(samples);
    if p > limit {
        let g = limit / p;
        samples.iter_mut().for_each(|v| *v *= g);
        g
    } else {
        1.0
    }
}
