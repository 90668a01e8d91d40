use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, resample, save_wav, AudioClip};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Codec {
    #[serde(rename = "mp3")]
    Mp3,
    #[serde(rename = "vorbis")]
    Vorbis,
    #[serde(rename = "alaw")]
    ALaw,
    #[serde(rename = "amr-wb")]
    AmrWb,
    #[serde(rename = "opus")]
    Opus,
}

impl Codec {
    pub const ALL: [Codec; 5] = [
        Codec::Mp3,
        Codec::Vorbis,
        Codec::ALaw,
        Codec::AmrWb,
        Codec::Opus,
    ];

    /// Probability of picking this codec when a codec is applied.
    pub fn probability(self) -> f64 {
        match self {
            Codec::Mp3 => 0.5,
            Codec::Vorbis => 0.075,
            Codec::ALaw => 0.025,
            Codec::AmrWb => 0.025,
            Codec::Opus => 0.375,
        }
    }

    /// Allowed bit rates in bits per second.
    pub fn bitrates(self) -> &'static [u32] {
        match self {
            Codec::Mp3 => &[16_000, 32_000, 64_000, 128_000],
            Codec::Vorbis => &[32_000, 48_000, 64_000],
            Codec::ALaw => &[64_000],
            Codec::AmrWb => &[
                6_600, 8_850, 12_650, 14_250, 15_850, 18_250, 19_850, 23_050, 23_850,
            ],
            Codec::Opus => &[8_000, 16_000, 32_000, 64_000, 128_000],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Codec::Mp3 => "mp3",
            Codec::Vorbis => "vorbis",
            Codec::ALaw => "alaw",
            Codec::AmrWb => "amr-wb",
            Codec::Opus => "opus",
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Codec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Codec::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown codec '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub codec: Codec,
    pub bitrate: u32,
}

impl CodecSpec {
    pub fn new(codec: Codec, bitrate: u32) -> Result<Self> {
        let s = CodecSpec { codec, bitrate };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.codec.bitrates().contains(&self.bitrate),
            "{} does not support {} bit/s (allowed: {:?})",
            self.codec,
            self.bitrate,
            self.codec.bitrates()
        );
        Ok(())
    }

    /// Codec by its probability, then a bit rate uniformly from its list.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut codec = Codec::Opus;
        for c in Codec::ALL {
            acc += c.probability();
            if u < acc {
                codec = c;
                break;
            }
        }
        let rates = codec.bitrates();
        CodecSpec {
            codec,
            bitrate: rates[rng.random_range(0..rates.len())],
        }
    }
}

pub trait CodecBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Encodes and decodes `clip`. The output may be longer or shorter than the input;
    /// [`apply_codec`] realigns it.
    fn transcode(&self, clip: &AudioClip, spec: &CodecSpec) -> Result<AudioClip>;
}

/// Runs `clip` through a codec and realigns the result to the input's length and timing.
pub fn apply_codec(
    clip: &AudioClip,
    spec: &CodecSpec,
    backend: &dyn CodecBackend,
) -> Result<AudioClip> {
    spec.validate()?;
    let mut out = backend.transcode(clip, spec)?;
    if out.sample_rate != clip.sample_rate {
        out = resample(&out, clip.sample_rate)?;
    }
    let aligned = if out.samples.len() == clip.samples.len() {
        out.samples
    } else {
        align_to_reference(&clip.samples, &out.samples, MAX_CODEC_DELAY)
    };
    Ok(clip.with_samples(aligned))
}

/// Largest encoder priming delay searched during realignment (samples).
pub const MAX_CODEC_DELAY: usize = 4096;

/// Finds the lag `0..=max_lag` at which `processed` best matches `reference`
/// (cross-correlation peak) and returns `processed` shifted back by that lag,
/// cut or zero-padded to the reference length.
pub fn align_to_reference(reference: &[f64], processed: &[f64], max_lag: usize) -> Vec<f64> {
    let t = reference.len();
    let n = (t + processed.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex64> = v.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        b.resize(n, Complex64::new(0.0, 0.0));
        b
    };
    let mut a = pad(processed);
    let mut b = pad(reference);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q.conj());
    inv.process(&mut a);
    // a[lag] = sum_i processed[i + lag] * reference[i]
    let lag = (0..=max_lag.min(processed.len().saturating_sub(1)))
        .max_by(|&i, &j| a[i].re.partial_cmp(&a[j].re).unwrap().then(j.cmp(&i)))
        .unwrap_or(0);
    (0..t)
        .map(|i| processed.get(i + lag).copied().unwrap_or(0.0))
        .collect()
}

const ALAW_A: f64 = 87.6;

/// A-law compression of a sample in [-1, 1] to [-1, 1].
pub fn alaw_compress(x: f64) -> f64 {
    let ax = x.abs().min(1.0);
    let y = if ax < 1.0 / ALAW_A {
        ALAW_A * ax / (1.0 + ALAW_A.ln())
    } else {
        (1.0 + (ALAW_A * ax).ln()) / (1.0 + ALAW_A.ln())
    };
    y.copysign(x)
}

pub fn alaw_expand(y: f64) -> f64 {
    let ay = y.abs().min(1.0);
    let x = if ay < 1.0 / (1.0 + ALAW_A.ln()) {
        ay * (1.0 + ALAW_A.ln()) / ALAW_A
    } else {
        ((ay * (1.0 + ALAW_A.ln()) - 1.0).exp()) / ALAW_A
    };
    x.copysign(y)
}

/// Sign plus 7-bit magnitude, as in 8-bit A-law code words.
fn quantize_8bit(y: f64) -> f64 {
    (y.abs() * 127.0).round().min(127.0).copysign(y) / 127.0
}

const MU: f64 = 255.0;

fn mulaw_quantize(x: f64, bits: u32) -> f64 {
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let ax = x.abs().min(1.0);
    let y = (1.0 + MU * ax).ln() / (1.0 + MU).ln();
    let q = (y * levels).round() / levels;
    (((1.0 + MU).powf(q) - 1.0) / MU).copysign(x)
}

/// Zero-phase low-pass with a raised-cosine roll-off of `transition` Hz ending at `cutoff`.
pub fn lowpass(samples: &[f64], sample_rate: u32, cutoff: f64, transition: f64) -> Vec<f64> {
    let n = samples.len();
    let nyquist = sample_rate as f64 / 2.0;
    if cutoff >= nyquist || n < 2 {
        return samples.to_vec();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let start = (cutoff - transition).max(0.0);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sample_rate as f64 / n as f64;
        let g = if f <= start {
            1.0
        } else if f >= cutoff {
            0.0
        } else {
            0.5 + 0.5 * (std::f64::consts::PI * (f - start) / (cutoff - start)).cos()
        };
        *c *= g;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Deterministic stand-in for real codecs: bit-rate dependent quantization followed
/// by a bit-rate dependent band limit. A-law is exact companding with 8-bit code words.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateCodec;

impl SurrogateCodec {
    pub const NAME: &'static str = "surrogate";

    /// Upper band edge in Hz kept by the surrogate for a codec/bit-rate pair.
    pub fn cutoff_hz(spec: &CodecSpec) -> f64 {
        match (spec.codec, spec.bitrate) {
            (Codec::Mp3, 16_000) => 5_000.0,
            (Codec::Mp3, 32_000) => 7_500.0,
            (Codec::Mp3, 64_000) => 11_000.0,
            (Codec::Mp3, _) => f64::INFINITY,
            (Codec::Vorbis, 32_000) => 9_000.0,
            (Codec::Vorbis, 48_000) => 10_000.0,
            (Codec::Vorbis, _) => 11_000.0,
            (Codec::ALaw, _) => f64::INFINITY,
            (Codec::AmrWb, _) => 7_000.0,
            (Codec::Opus, 8_000) => 4_000.0,
            (Codec::Opus, 16_000) => 8_000.0,
            (Codec::Opus, _) => f64::INFINITY,
        }
    }

    /// Resolution of the companded quantizer for lossy codecs.
    pub fn quantizer_bits(spec: &CodecSpec) -> u32 {
        (spec.bitrate / 4_000 + 4).clamp(6, 16)
    }
}

impl CodecBackend for SurrogateCodec {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn transcode(&self, clip: &AudioClip, spec: &CodecSpec) -> Result<AudioClip> {
        let out = match spec.codec {
            Codec::ALaw => clip
                .samples
                .iter()
                .map(|&x| alaw_expand(quantize_8bit(alaw_compress(x))))
                .collect(),
            _ => {
                let bits = Self::quantizer_bits(spec);
                let q: Vec<f64> = clip
                    .samples
                    .iter()
                    .map(|&x| mulaw_quantize(x, bits))
                    .collect();
                lowpass(&q, clip.sample_rate, Self::cutoff_hz(spec), 500.0)
            }
        };
        Ok(clip.with_samples(out))
    }
}

/// Real encoders through an `ffmpeg` executable.
#[derive(Debug, Clone)]
pub struct FfmpegCodec {
    pub program: PathBuf,
}

impl Default for FfmpegCodec {
    fn default() -> Self {
        FfmpegCodec {
            program: PathBuf::from("ffmpeg"),
        }
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FfmpegCodec {
    pub const NAME: &'static str = "ffmpeg";

    fn encoder_args(spec: &CodecSpec) -> (&'static str, Vec<String>) {
        let br = format!("{}", spec.bitrate);
        match spec.codec {
            Codec::Mp3 => (
                "mp3",
                vec!["-c:a".into(), "libmp3lame".into(), "-b:a".into(), br],
            ),
            Codec::Vorbis => (
                "ogg",
                vec!["-c:a".into(), "libvorbis".into(), "-b:a".into(), br],
            ),
            Codec::ALaw => (
                "wav",
                vec![
                    "-c:a".into(),
                    "pcm_alaw".into(),
                    "-ar".into(),
                    "8000".into(),
                ],
            ),
            Codec::AmrWb => (
                "amr",
                vec![
                    "-c:a".into(),
                    "libvo_amrwbenc".into(),
                    "-ar".into(),
                    "16000".into(),
                    "-b:a".into(),
                    br,
                ],
            ),
            Codec::Opus => (
                "opus",
                vec!["-c:a".into(), "libopus".into(), "-b:a".into(), br],
            ),
        }
    }

    fn run(&self, args: &[String]) -> Result<()> {
        let out = Command::new(&self.program)
            .args(["-hide_banner", "-loglevel", "error", "-y"])
            .args(args)
            .output()
            .map_err(|e| Error::Backend(format!("cannot run {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Backend(format!(
                "{} failed: {}",
                self.program.display(),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(())
    }
}

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl CodecBackend for FfmpegCodec {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn transcode(&self, clip: &AudioClip, spec: &CodecSpec) -> Result<AudioClip> {
        let id = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir();
        let stem = format!("miipher-codec-{}-{id}", std::process::id());
        let (ext, enc) = Self::encoder_args(spec);
        let src = dir.join(format!("{stem}-in.wav"));
        let coded = dir.join(format!("{stem}.{ext}"));
        let dst = dir.join(format!("{stem}-out.wav"));
        save_wav(clip, &src)?;
        let result = (|| {
            let mut a = vec!["-i".to_string(), path_arg(&src)];
            a.extend(enc);
            a.push(path_arg(&coded));
            self.run(&a)?;
            self.run(&[
                "-i".into(),
                path_arg(&coded),
                "-ac".into(),
                "1".into(),
                "-ar".into(),
                clip.sample_rate.to_string(),
                "-c:a".into(),
                "pcm_s16le".into(),
                path_arg(&dst),
            ])?;
            load_wav(&dst)
        })();
        for p in [&src, &coded, &dst] {
            let _ = std::fs::remove_file(p);
        }
        Ok(clip.with_samples(result?.samples))
    }
}

/// Backend by name: `surrogate` or `ffmpeg[:<path>]`.
pub fn backend_by_name(name: &str) -> Result<Box<dyn CodecBackend>> {
    match name {
        SurrogateCodec::NAME => Ok(Box::new(SurrogateCodec)),
        FfmpegCodec::NAME => Ok(Box::new(FfmpegCodec::default())),
        other => match other.strip_prefix("ffmpeg:") {
            Some(p) => Ok(Box::new(FfmpegCodec { program: p.into() })),
            None => Err(Error::Backend(format!("no codec backend named '{other}'"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn bitrate_lists_are_enforced() {
        assert!(CodecSpec::new(Codec::Mp3, 16_000).is_ok());
        assert!(CodecSpec::new(Codec::Mp3, 24_000).is_err());
        assert!(CodecSpec::new(Codec::AmrWb, 23_850).is_ok());
        assert!(CodecSpec::new(Codec::ALaw, 32_000).is_err());
        let probs: f64 = Codec::ALL.iter().map(|c| c.probability()).sum();
        assert!((probs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alaw_round_trip_is_monotone_and_bounded() {
        for i in -100..=100 {
            let x = i as f64 / 100.0;
            assert!((alaw_expand(alaw_compress(x)) - x).abs() < 1e-12);
        }
        assert_eq!(alaw_compress(1.0), 1.0);
    }

    #[test]
    fn lowpass_passes_dc_and_removes_top() {
        let n = 2400;
        let x: Vec<f64> = (0..n)
            .map(|i| 0.5 + (std::f64::consts::PI * i as f64 * 0.9).cos())
            .collect();
        let y = lowpass(&x, 24000, 6000.0, 500.0);
        assert!(y.iter().all(|v| (v - 0.5).abs() < 1e-9));
    }

    #[test]
    fn alignment_recovers_delay() {
        let mut rng = seed::rng(1);
        let x: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut delayed = vec![0.0; 1105];
        delayed.extend(&x);
        delayed.extend(vec![0.0; 50]);
        let y = align_to_reference(&x, &delayed, MAX_CODEC_DELAY);
        assert_eq!(y, x);
    }

    struct Delaying;
    impl CodecBackend for Delaying {
        fn name(&self) -> &str {
            "delaying"
        }
        fn transcode(&self, clip: &AudioClip, _: &CodecSpec) -> Result<AudioClip> {
            let mut s = vec![0.0; 576];
            s.extend(&clip.samples);
            Ok(clip.with_samples(s))
        }
    }

    #[test]
    fn apply_codec_realigns_padded_output() {
        let mut rng = seed::rng(2);
        let x: Vec<f64> = (0..2000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let clip = AudioClip::new(x.clone(), 24000);
        let spec = CodecSpec::new(Codec::Mp3, 32_000).unwrap();
        assert_eq!(apply_codec(&clip, &spec, &Delaying).unwrap().samples, x);
    }

    #[test]
    fn missing_backend_is_an_error() {
        let missing = FfmpegCodec {
            program: "/nonexistent/ffmpeg".into(),
        };
        let clip = AudioClip::new(vec![0.1; 100], 24000);
        let spec = CodecSpec::new(Codec::Opus, 8_000).unwrap();
        assert!(matches!(
            apply_codec(&clip, &spec, &missing),
            Err(Error::Backend(_))
        ));
        assert!(backend_by_name("lame").is_err());
    }
}
