use rand::Rng;

use crate::audio::{limit_peak, AudioClip};
use crate::error::{ensure, Result};
use crate::seed;

/// Frames of speech quieter than this (dBFS) do not count towards the SNR.
pub const ACTIVITY_THRESHOLD_DBFS: f64 = -50.0;
pub const SNR_RANGE_DB: (f64, f64) = (5.0, 30.0);

/// Sample-level mask of 20 ms frames whose RMS is above -50 dBFS. Falls back to
/// all samples when no frame is active.
pub fn activity_mask(samples: &[f64], sample_rate: u32) -> Vec<bool> {
    let frame = (sample_rate as usize / 50).max(1);
    let thresh = 10f64.powf(ACTIVITY_THRESHOLD_DBFS / 20.0);
    let mut mask = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(frame) {
        let rms = (chunk.iter().map(|v| v * v).sum::<f64>() / chunk.len() as f64).sqrt();
        mask.extend(std::iter::repeat_n(rms > thresh, chunk.len()));
    }
    if !mask.iter().any(|&m| m) {
        mask.iter_mut().for_each(|m| *m = true);
    }
    mask
}

fn masked_rms(x: &[f64], mask: &[bool]) -> f64 {
    let (s, n) = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// SNR in dB of `speech` against `noise` over the active frames given by `mask`.
pub fn measure_snr(speech: &[f64], noise: &[f64], mask: &[bool]) -> f64 {
    let s = masked_rms(speech, mask);
    let n = masked_rms(noise, mask);
    20.0 * (s / n).log10()
}

/// Loops (shorter noise) or crops (longer noise) to `len` samples at a seeded offset.
pub fn fit_noise(noise: &[f64], len: usize, rng: &mut impl Rng) -> Vec<f64> {
    if noise.len() >= len {
        let off = rng.random_range(0..=noise.len() - len);
        noise[off..off + len].to_vec()
    } else {
        let off = rng.random_range(0..noise.len());
        (0..len).map(|i| noise[(off + i) % noise.len()]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// Speech component as it appears in `mixture`.
    pub speech: Vec<f64>,
    /// Scaled noise component as it appears in `mixture`.
    pub noise: Vec<f64>,
    pub mixture: Vec<f64>,
    /// Gain applied to the fitted noise before any peak limiting.
    pub noise_gain: f64,
    /// Gain applied to both components to keep the peak at or below 1.
    pub limiter_gain: f64,
    /// Activity mask of the input speech.
    pub active: Vec<bool>,
}

pub fn mix_components(
    speech: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng_seed: u64,
) -> Result<Mixture> {
    ensure!(
        speech.sample_rate == noise.sample_rate,
        "speech at {} Hz but noise at {} Hz",
        speech.sample_rate,
        noise.sample_rate
    );
    ensure!(snr_db.is_finite(), "snr must be finite");
    ensure!(
        !speech.is_empty() && !noise.is_empty(),
        "empty speech or noise clip"
    );
    ensure!(noise.rms() > 0.0, "noise clip '{}' is silent", noise.utt_id);
    let mut rng = seed::rng(rng_seed);
    let fitted = fit_noise(&noise.samples, speech.len(), &mut rng);
    let active = activity_mask(&speech.samples, speech.sample_rate);
    let rs = masked_rms(&speech.samples, &active);
    ensure!(rs > 0.0, "speech clip '{}' is silent", speech.utt_id);
    let mut rn = masked_rms(&fitted, &active);
    if rn == 0.0 {
        rn = crate::audio::rms(&fitted);
    }
    ensure!(rn > 0.0, "noise segment for '{}' is silent", speech.utt_id);
    let noise_gain = 10f64.powf(-snr_db / 20.0) * rs / rn;
    let mut mixture: Vec<f64> = speech
        .samples
        .iter()
        .zip(&fitted)
        .map(|(s, n)| s + noise_gain * n)
        .collect();
    let limiter_gain = limit_peak(&mut mixture, 1.0);
    Ok(Mixture {
        speech: speech.samples.iter().map(|v| v * limiter_gain).collect(),
        noise: fitted
            .iter()
            .map(|v| v * noise_gain * limiter_gain)
            .collect(),
        mixture,
        noise_gain,
        limiter_gain,
        active,
    })
}

/// Adds noise at `snr_db` (measured over active speech frames).
pub fn mix_at_snr(
    speech: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng_seed: u64,
) -> Result<AudioClip> {
    let m = mix_components(speech, noise, snr_db, rng_seed)?;
    Ok(speech.with_samples(m.mixture))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, n: usize) -> AudioClip {
        AudioClip::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 24000.0).sin())
                .collect(),
            24000,
        )
    }

    fn constant_rms(rms: f64, n: usize, sign_flip: usize) -> AudioClip {
        AudioClip::new(
            (0..n)
                .map(|i| if (i / sign_flip) % 2 == 0 { rms } else { -rms })
                .collect(),
            24000,
        )
    }

    #[test]
    fn equal_power_zero_db_has_unit_gain() {
        let s = constant_rms(0.1, 4800, 7);
        let n = constant_rms(0.1, 4800, 3);
        let m = mix_components(&s, &n, 0.0, 1).unwrap();
        assert!((m.noise_gain - 1.0).abs() < 1e-12);
    }

    #[test]
    fn twenty_db_gain() {
        let s = constant_rms(0.1, 4800, 7);
        let n = constant_rms(0.1, 9600, 3);
        let m = mix_components(&s, &n, 20.0, 1).unwrap();
        assert!((m.noise_gain - 0.1).abs() < 1e-12);
    }

    #[test]
    fn lower_bound_snr_is_measured() {
        let s = tone(220.0, 0.8, 24000);
        let n = tone(3100.0, 0.3, 5000);
        let m = mix_components(&s, &n, 5.0, 9).unwrap();
        let snr = measure_snr(&m.speech, &m.noise, &m.active);
        assert!((snr - 5.0).abs() < 0.1, "{snr}");
        assert!(crate::audio::peak(&m.mixture) <= 1.0);
        assert!(m.limiter_gain < 1.0);
    }

    #[test]
    fn silent_noise_rejected() {
        let s = tone(220.0, 0.5, 2400);
        let n = AudioClip::new(vec![0.0; 2400], 24000);
        assert!(mix_at_snr(&s, &n, 10.0, 0).is_err());
        let n16 = AudioClip::new(vec![0.1; 2400], 16000);
        assert!(mix_at_snr(&s, &n16, 10.0, 0).is_err());
    }

    #[test]
    fn silence_is_excluded_from_speech_level() {
        let mut s = tone(300.0, 0.5, 4800).samples;
        s.extend(vec![0.0; 48000]);
        let mask = activity_mask(&s, 24000);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 4800);
    }

    #[test]
    fn looped_noise_is_deterministic() {
        let n: Vec<f64> = (0..7).map(|v| v as f64).collect();
        let a = fit_noise(&n, 20, &mut seed::rng(3));
        let b = fit_noise(&n, 20, &mut seed::rng(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert_eq!((a[7] - a[0]).abs(), 0.0);
    }
}
