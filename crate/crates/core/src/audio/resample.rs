use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{AudioClip, FEATURE_RATE, OUTPUT_RATE};
use crate::error::{ensure, Result};

/// Band-limited resampling by spectral truncation / zero-padding of the whole clip.
///
/// Output length is `round(T * target_rate / source_rate)`. Equal rates return the
/// clip unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    ensure!(
        target_rate == FEATURE_RATE || target_rate == OUTPUT_RATE,
        "resample target must be 16000 or 24000 Hz, got {target_rate}"
    );
    ensure!(clip.sample_rate > 0, "clip has zero sample rate");
    ensure!(!clip.samples.is_empty(), "cannot resample an empty clip");
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let n_in = clip.samples.len();
    let src = clip.sample_rate as u64;
    let n_out = ((n_in as u64 * target_rate as u64 + src / 2) / src).max(1) as usize;
    let mut out = clip.with_samples(resample_to_len(&clip.samples, n_out));
    out.sample_rate = target_rate;
    Ok(out)
}

/// Fourier resampling to an arbitrary length, matching the usual
/// "copy the shared band, split/merge the Nyquist bin" construction.
pub(crate) fn resample_to_len(x: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    if n_in == n_out {
        return x.to_vec();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n_in).process(&mut spec);

    let n = n_in.min(n_out);
    let nyq = n / 2 + 1;
    let mut y = vec![Complex64::new(0.0, 0.0); n_out];
    y[..nyq].copy_from_slice(&spec[..nyq]);
    if n > 2 {
        let tail = n - nyq;
        y[n_out - tail..].copy_from_slice(&spec[n_in - tail..]);
    }
    if n % 2 == 0 {
        if n_out < n_in {
            y[n_out - n / 2] += spec[n_in - n / 2];
        } else if n_in < n_out {
            y[n / 2] *= 0.5;
            y[n_out - n / 2] = y[n / 2];
        }
    }
    planner.plan_fft_inverse(n_out).process(&mut y);
    let scale = 1.0 / n_in as f64;
    y.iter().map(|c| c.re * scale).collect()
}
