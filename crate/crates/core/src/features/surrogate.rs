use super::{FeatureExtractor, SpeakerEmbedding, SpeechFeatures, TextCondition};
use crate::audio::{log_mel, resample, AudioClip, MelConfig, FEATURE_RATE};
use crate::error::{ensure, Result};
use crate::nn::Tensor;
use crate::seed;

use super::ExtractorSpec;

/// Output frame rate of the speech features: 100 front-end frames/s pooled by 4.
pub const FRAMES_PER_SECOND: f64 = 25.0;
pub const MIN_SPEAKER_SECONDS: f64 = 0.5;

const POOL_STAGES: u32 = 2;
/// Fixed standardization of the log-mel front-end before projection.
const LOGMEL_CENTER: f64 = -4.0;
const LOGMEL_SCALE: f64 = 4.0;

const SPEECH_STREAM: u64 = 0x5350;
const TEXT_STREAM: u64 = 0x5458;
const SPEAKER_STREAM: u64 = 0x534b;

/// Character tokenizer: lowercased Unicode scalar values, one token per `char`.
pub fn tokenize(transcript: &str) -> Vec<u32> {
    transcript
        .chars()
        .flat_map(char::to_lowercase)
        .map(u32::from)
        .collect()
}

/// Deterministic stand-in for the three pretrained encoders.
///
/// * speech: 16 kHz log-mel (40 bands, 10 ms hop), standardized, projected to `D`
///   by a seeded Gaussian matrix, average-pooled twice by 2 (25 frames/s), `tanh`.
///   `K = floor((1 + floor(T16 / 160)) / 4)`. Not gain invariant.
/// * text: seeded embedding row per token plus sinusoidal positions.
/// * speaker: per-band mean and standard deviation of the log-mel, each centered
///   across bands, randomly projected to `Q` and unit-normalized.
pub struct SurrogateExtractor {
    spec: ExtractorSpec,
    mel: MelConfig,
    speech_proj: Tensor,
    speaker_proj: Tensor,
}

impl SurrogateExtractor {
    pub fn new(spec: &ExtractorSpec) -> Self {
        let mel = MelConfig::feature_frontend();
        let n = mel.n_mels;
        let mut rng = seed::sub_rng(spec.rng_seed, SPEECH_STREAM);
        let speech_proj = Tensor::randn(&[n, spec.d], 1.0 / (n as f64).sqrt(), &mut rng);
        let mut rng = seed::sub_rng(spec.rng_seed, SPEAKER_STREAM);
        let speaker_proj = Tensor::randn(&[2 * n, spec.q], 1.0, &mut rng);
        SurrogateExtractor {
            spec: spec.clone(),
            mel,
            speech_proj,
            speaker_proj,
        }
    }

    fn front_end(&self, clip: &AudioClip) -> Result<Tensor> {
        let clip16 = resample(clip, FEATURE_RATE)?;
        log_mel(&clip16, &self.mel)
    }

    fn token_row(&self, id: u32) -> Vec<f64> {
        let stream = seed::derive_seed(self.spec.rng_seed, TEXT_STREAM);
        let mut rng = seed::sub_rng(stream, u64::from(id));
        Tensor::randn(&[self.spec.w], 1.0, &mut rng).into_data()
    }
}

fn pool_pairs(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.chunks_exact(2)
        .map(|p| p[0].iter().zip(&p[1]).map(|(a, b)| 0.5 * (a + b)).collect())
        .collect()
}

fn sinusoid(pos: usize, i: usize, width: usize) -> f64 {
    let rate = 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
    let angle = pos as f64 / rate;
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

impl FeatureExtractor for SurrogateExtractor {
    fn speech_features(&self, clip: &AudioClip) -> Result<SpeechFeatures> {
        let frames = 1usize << POOL_STAGES;
        let hop = self.mel.hop_samples(FEATURE_RATE);
        let needed = (frames - 1) * hop;
        let t16 =
            (clip.len() as f64 * FEATURE_RATE as f64 / clip.sample_rate as f64).round() as usize;
        ensure!(
            t16 >= needed.max(self.mel.window_samples(FEATURE_RATE)),
            "clip '{}' ({:.3} s) is shorter than one feature frame",
            clip.utt_id,
            clip.duration_seconds()
        );
        let lm = self.front_end(clip)?;
        let d = self.spec.d;
        let mut rows: Vec<Vec<f64>> = (0..lm.rows())
            .map(|f| {
                let x: Vec<f64> = lm
                    .row(f)
                    .iter()
                    .map(|v| (v - LOGMEL_CENTER) / LOGMEL_SCALE)
                    .collect();
                let mut out = vec![0.0; d];
                for (b, xv) in x.iter().enumerate() {
                    for (o, w) in out.iter_mut().zip(self.speech_proj.row(b)) {
                        *o += xv * w;
                    }
                }
                out
            })
            .collect();
        for _ in 0..POOL_STAGES {
            rows = pool_pairs(&rows);
        }
        let k = rows.len();
        let data = rows.into_iter().flatten().map(f64::tanh).collect();
        SpeechFeatures::new(Tensor::new(&[k, d], data))
    }

    fn text_condition(&self, _utt_id: &str, transcript: &str) -> Result<TextCondition> {
        let ids = tokenize(transcript);
        ensure!(!ids.is_empty(), "empty transcript");
        let w = self.spec.w;
        let mut data = Vec::with_capacity(ids.len() * w);
        for (m, &id) in ids.iter().enumerate() {
            let row = self.token_row(id);
            data.extend(row.iter().enumerate().map(|(i, v)| v + sinusoid(m, i, w)));
        }
        let t = TextCondition {
            values: Tensor::new(&[ids.len(), w], data),
            token_ids: ids,
        };
        t.validate()?;
        Ok(t)
    }

    fn speaker_embedding(&self, clip: &AudioClip) -> Result<SpeakerEmbedding> {
        ensure!(
            clip.duration_seconds() >= MIN_SPEAKER_SECONDS - 1e-9,
            "clip '{}' ({:.3} s) is shorter than the {MIN_SPEAKER_SECONDS} s needed for a speaker embedding",
            clip.utt_id,
            clip.duration_seconds()
        );
        let lm = self.front_end(clip)?;
        let (frames, bands) = (lm.rows() as f64, lm.cols());
        let mut mean = vec![0.0; bands];
        let mut sq = vec![0.0; bands];
        for f in 0..lm.rows() {
            for (b, &v) in lm.row(f).iter().enumerate() {
                mean[b] += v / frames;
                sq[b] += v * v / frames;
            }
        }
        let mut std: Vec<f64> = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| (s - m * m).max(0.0).sqrt())
            .collect();
        for stat in [&mut mean, &mut std] {
            let c = stat.iter().sum::<f64>() / bands as f64;
            stat.iter_mut().for_each(|v| *v -= c);
        }
        let stats: Vec<f64> = mean.into_iter().chain(std).collect();
        let mut out = vec![0.0; self.spec.q];
        for (s, row) in stats.iter().zip(0..self.speaker_proj.rows()) {
            for (o, w) in out.iter_mut().zip(self.speaker_proj.row(row)) {
                *o += s * w;
            }
        }
        SpeakerEmbedding::normalized(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{cosine_similarity, ExtractorSpec};
    use rand::Rng;

    fn noise_clip(seconds: f64, rate: u32, seed_: u64) -> AudioClip {
        let mut rng = seed::rng(seed_);
        let n = (seconds * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| 0.3 * (i as f64 * 0.05).sin() + 0.05 * rng.random_range(-1.0..1.0))
            .collect();
        AudioClip::new(samples, rate)
    }

    fn surrogate() -> SurrogateExtractor {
        SurrogateExtractor::new(&ExtractorSpec::desk_scale())
    }

    #[test]
    fn crop_duration_gives_fifteen_frames() {
        let x = surrogate();
        for rate in [16_000, 24_000] {
            let f = x.speech_features(&noise_clip(0.6, rate, 1)).unwrap();
            assert_eq!(f.values.shape(), &[15, 64]);
            assert_eq!(f.frame_rate, 25.0);
        }
    }

    #[test]
    fn speech_features_deterministic_and_gain_sensitive() {
        let x = surrogate();
        let clip = noise_clip(1.0, 24_000, 2);
        let a = x.speech_features(&clip).unwrap();
        let b = surrogate().speech_features(&clip).unwrap();
        assert_eq!(a, b);
        let loud = clip.with_samples(
            clip.samples
                .iter()
                .map(|v| v * 10f64.powf(6.0 / 20.0))
                .collect(),
        );
        assert_ne!(a, x.speech_features(&loud).unwrap());
        assert!(a.values.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn too_short_for_a_frame() {
        let x = surrogate();
        assert!(x.speech_features(&noise_clip(0.01, 16_000, 3)).is_err());
        assert_eq!(
            x.speech_features(&noise_clip(0.04, 16_000, 3))
                .unwrap()
                .num_frames(),
            1
        );
    }

    #[test]
    fn tokenizer_and_text_rows() {
        let x = surrogate();
        let e = x.text_condition("", "hello").unwrap();
        assert_eq!(e.num_tokens(), 5);
        assert_eq!(e.values.shape(), &[5, 32]);
        assert_eq!(e, x.text_condition("", "hello").unwrap());
        let f = x.text_condition("", "hallo").unwrap();
        assert_ne!(e.values.row(1), f.values.row(1));
        for r in [0, 2, 3, 4] {
            assert_eq!(e.values.row(r), f.values.row(r));
        }
        assert!(x.text_condition("", "").is_err());
        assert_eq!(tokenize("Ab"), tokenize("aB"));
    }

    #[test]
    fn speaker_embedding_contract() {
        let x = surrogate();
        let clip = noise_clip(0.8, 24_000, 4);
        let d = x.speaker_embedding(&clip).unwrap();
        let n: f64 = d.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(d.unit_norm);
        assert_eq!(d, x.speaker_embedding(&clip).unwrap());
        assert!((cosine_similarity(&d, &d).unwrap() - 1.0).abs() < 1e-12);
        assert!(x.speaker_embedding(&noise_clip(0.3, 24_000, 4)).is_err());
    }
}
