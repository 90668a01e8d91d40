use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{ensure, Result};
use crate::nn::Tensor;

/// Added to mel power before the logarithm.
pub const LOG_MEL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    /// 24 kHz analysis: 128 bands, 50 ms Hann window, 12.5 ms shift, 2048-point FFT, 20 Hz to 12 kHz.
    fn default() -> Self {
        MelConfig {
            n_mels: 128,
            window_ms: 50.0,
            hop_ms: 12.5,
            fft_size: 2048,
            f_min: 20.0,
            f_max: 12_000.0,
        }
    }
}

impl MelConfig {
    /// 16 kHz front-end used by the surrogate speech-feature extractor (100 frames/s).
    pub fn feature_frontend() -> Self {
        MelConfig {
            n_mels: 40,
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            f_min: 20.0,
            f_max: 8_000.0,
        }
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Center-padded frame count: `1 + floor(T / hop)`.
    pub fn num_frames(&self, num_samples: usize, sample_rate: u32) -> usize {
        1 + num_samples / self.hop_samples(sample_rate)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        ensure!(self.n_mels >= 1, "n_mels must be positive");
        ensure!(
            self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= sample_rate as f64 / 2.0,
            "mel band [{}, {}] Hz invalid for {} Hz audio",
            self.f_min,
            self.f_max,
            sample_rate
        );
        let win = self.window_samples(sample_rate);
        ensure!(
            win >= 1 && win <= self.fft_size,
            "window of {win} samples does not fit a {}-point FFT",
            self.fft_size
        );
        ensure!(
            self.hop_samples(sample_rate) >= 1,
            "hop must be at least one sample"
        );
        Ok(())
    }
}

/// Center-padded short-time Fourier transform with a periodic Hann window.
///
/// The window spans `win_length` samples, centered inside the `fft_size` frame.
/// Signal edges are zero-padded by `fft_size / 2`, giving `1 + floor(T / hop)` frames.
#[derive(Clone)]
pub struct Stft {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("fft_size", &self.fft_size)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(fft_size: usize, hop: usize, win_length: usize) -> Self {
        assert!(win_length <= fft_size && hop >= 1);
        let offset = (fft_size - win_length) / 2;
        let mut window = vec![0.0; fft_size];
        for n in 0..win_length {
            window[offset + n] = 0.5 - 0.5 * (2.0 * PI * n as f64 / win_length as f64).cos();
        }
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Stft {
            fft_size,
            hop,
            window,
            fft,
        }
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        1 + num_samples / self.hop
    }

    /// Sample index of tap `i` of frame `frame`, or `None` when it falls in the padding.
    #[inline]
    pub fn source_index(&self, frame: usize, i: usize, num_samples: usize) -> Option<usize> {
        let pos = (frame * self.hop + i) as isize - (self.fft_size / 2) as isize;
        (pos >= 0 && (pos as usize) < num_samples).then_some(pos as usize)
    }

    /// Full complex spectrum of each frame (length `fft_size`).
    pub fn spectrum(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let frames = self.num_frames(x.len());
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        (0..frames)
            .map(|f| {
                let mut buf: Vec<Complex64> = (0..self.fft_size)
                    .map(|i| {
                        let v = self.source_index(f, i, x.len()).map_or(0.0, |p| x[p]);
                        Complex64::new(v * self.window[i], 0.0)
                    })
                    .collect();
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                buf
            })
            .collect()
    }

    /// One-sided power spectrogram `[frames][fft_size / 2 + 1]`.
    pub fn power(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let bins = self.num_bins();
        self.spectrum(x)
            .into_iter()
            .map(|s| s[..bins].iter().map(|c| c.norm_sqr()).collect())
            .collect()
    }

    pub(crate) fn fft(&self) -> &Arc<dyn Fft<f64>> {
        &self.fft
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `[n_mels][fft_size / 2 + 1]`, unit peak per filter.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Log-mel spectrogram `[frames × n_mels]`, `ln(mel_power + 1e-5)`, frames = `1 + floor(T / hop)`.
pub fn log_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate(clip.sample_rate)?;
    let win = cfg.window_samples(clip.sample_rate);
    ensure!(
        clip.samples.len() >= win,
        "clip of {} samples is shorter than one {win}-sample window",
        clip.samples.len()
    );
    let stft = Stft::new(cfg.fft_size, cfg.hop_samples(clip.sample_rate), win);
    let fb = mel_filterbank(cfg, clip.sample_rate);
    let power = stft.power(&clip.samples);
    let frames = power.len();
    let mut data = Vec::with_capacity(frames * cfg.n_mels);
    for p in &power {
        for filt in &fb {
            let e: f64 = filt.iter().zip(p).map(|(w, v)| w * v).sum();
            data.push((e + LOG_MEL_FLOOR).ln());
        }
    }
    Ok(Tensor::new(&[frames, cfg.n_mels], data))
}
