use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::parallel_map;
use crate::audio::{log_mel, resample, AudioClip, Manifest, MelConfig, OUTPUT_RATE};
use crate::error::{ensure, Error, Result};
use crate::features::{cosine_similarity, FeatureExtractor};

pub const SYSTEM_RESTORED: &str = "restored";
pub const SYSTEM_DEGRADED: &str = "degraded";

/// Mel analysis used by [`logmel_l2`]: 80 bands over 0–12 kHz at 24 kHz.
pub fn eval_mel_config() -> MelConfig {
    MelConfig {
        n_mels: 80,
        window_ms: 50.0,
        hop_ms: 12.5,
        fft_size: 2048,
        f_min: 0.0,
        f_max: 12_000.0,
    }
}

fn peak_normalized(clip: &AudioClip, len: usize) -> Result<AudioClip> {
    let x = resample(clip, OUTPUT_RATE)?;
    let mut s = x.samples[..len.min(x.len())].to_vec();
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        s.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(x.with_samples(s))
}

/// Root-mean-square difference of log-mel spectrograms after both clips are brought
/// to 24 kHz, peak-normalized and truncated to the shorter length.
pub fn logmel_l2(reference: &AudioClip, test: &AudioClip) -> Result<f64> {
    let len = resample(reference, OUTPUT_RATE)?
        .len()
        .min(resample(test, OUTPUT_RATE)?.len());
    ensure!(len > 0, "cannot compare empty clips");
    let cfg = eval_mel_config();
    let a = log_mel(&peak_normalized(reference, len)?, &cfg)?;
    let b = log_mel(&peak_normalized(test, len)?, &cfg)?;
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    Ok((sq / a.numel() as f64).sqrt())
}

/// `10·log10(‖clean‖² / ‖clean − test‖²)` over the common 24 kHz prefix, capped at
/// 100 dB for identical signals.
pub fn snr_proxy(clean: &AudioClip, test: &AudioClip) -> Result<f64> {
    let a = resample(clean, OUTPUT_RATE)?;
    let b = resample(test, OUTPUT_RATE)?;
    let len = a.len().min(b.len());
    ensure!(len > 0, "cannot compare empty clips");
    let signal: f64 = a.samples[..len].iter().map(|v| v * v).sum();
    let err: f64 = a.samples[..len]
        .iter()
        .zip(&b.samples[..len])
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    ensure!(signal > 0.0, "clean reference is silent");
    Ok(if err <= signal * 1e-10 {
        100.0
    } else {
        10.0 * (signal / err).log10()
    })
}

/// Speech recognizer used for the optional word error rate.
pub trait AsrHook: Send + Sync {
    /// Returns the hypothesis transcript of the audio file at `audio_path`.
    fn transcribe(&self, audio_path: &Path, reference: &str) -> Result<String>;
}

/// Runs `program [args..] <audio_path>` and reads the hypothesis from stdout.
#[derive(Debug, Clone)]
pub struct CommandAsr {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl AsrHook for CommandAsr {
    fn transcribe(&self, audio_path: &Path, _reference: &str) -> Result<String> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(audio_path)
            .output()
            .map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(Error::Backend(format!(
                "ASR command {} failed: {}",
                self.program.display(),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }
}

fn normalize_words(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Word-level edit distance after lowercasing and stripping punctuation, and the
/// number of reference words.
pub fn word_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r = normalize_words(reference);
    let h = normalize_words(hypothesis);
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for (i, rw) in r.iter().enumerate() {
        let mut cur = vec![i + 1; h.len() + 1];
        for (j, hw) in h.iter().enumerate() {
            let sub = prev[j] + usize::from(rw != hw);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    (prev[h.len()], r.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub utt_id: String,
    pub system: String,
    pub spk_similarity: f64,
    pub logmel_l2: f64,
    pub snr_proxy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub word_errors: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference_words: Option<usize>,
}

/// Mean with a 95% normal-approximation interval half-width `1.96·sd/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanCi {
                mean: f64::NAN,
                ci95: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanCi { mean, ci95, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemAggregate {
    pub spk_similarity: MeanCi,
    pub logmel_l2: MeanCi,
    pub snr_proxy: MeanCi,
    /// Corpus-level word error rate, present only when an ASR hook was supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by utterance id, then system.
    pub per_utt: Vec<EvalRow>,
    pub aggregates: BTreeMap<String, SystemAggregate>,
}

impl EvalReport {
    /// Builds a report from rows in any order.
    pub fn from_rows(mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by(|a, b| (&a.utt_id, &a.system).cmp(&(&b.utt_id, &b.system)));
        let systems: BTreeSet<String> = rows.iter().map(|r| r.system.clone()).collect();
        let aggregates = systems
            .into_iter()
            .map(|sys| {
                let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.system == sys).collect();
                let col = |f: fn(&EvalRow) -> f64| {
                    MeanCi::from_values(&mine.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                let scored: Vec<(usize, usize)> = mine
                    .iter()
                    .filter_map(|r| Some((r.word_errors?, r.reference_words?)))
                    .collect();
                let wer = (!scored.is_empty()).then(|| {
                    let (e, n): (usize, usize) =
                        scored.iter().fold((0, 0), |(a, b), &(e, n)| (a + e, b + n));
                    e as f64 / n.max(1) as f64
                });
                let agg = SystemAggregate {
                    spk_similarity: col(|r| r.spk_similarity),
                    logmel_l2: col(|r| r.logmel_l2),
                    snr_proxy: col(|r| r.snr_proxy),
                    wer,
                };
                (sys, agg)
            })
            .collect();
        EvalReport {
            per_utt: rows,
            aggregates,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table of the aggregates followed by the per-utterance rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>18} {:>18} {:>18} {:>8}",
            "system", "SPK", "logmel_l2", "snr_proxy_db", "WER"
        );
        for (sys, a) in &self.aggregates {
            let f = |m: &MeanCi| format!("{:.4} ± {:.4}", m.mean, m.ci95);
            let wer = a.wer.map_or("-".to_string(), |w| format!("{:.3}", w));
            let _ = writeln!(
                out,
                "{:<10} {:>18} {:>18} {:>18} {:>8}",
                sys,
                f(&a.spk_similarity),
                f(&a.logmel_l2),
                f(&a.snr_proxy),
                wer
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>8} {:>10} {:>10}",
            "utt_id", "system", "SPK", "logmel_l2", "snr_db"
        );
        for r in &self.per_utt {
            let _ = writeln!(
                out,
                "{:<16} {:<10} {:>8.4} {:>10.4} {:>10.3}",
                r.utt_id, r.system, r.spk_similarity, r.logmel_l2, r.snr_proxy
            );
        }
        out
    }
}

/// Scores one test clip against its clean reference.
pub fn score_clip(
    utt_id: &str,
    system: &str,
    clean: &AudioClip,
    test: &AudioClip,
    fx: &dyn FeatureExtractor,
) -> Result<EvalRow> {
    let spk = cosine_similarity(&fx.speaker_embedding(clean)?, &fx.speaker_embedding(test)?)?;
    Ok(EvalRow {
        utt_id: utt_id.to_string(),
        system: system.to_string(),
        spk_similarity: spk,
        logmel_l2: logmel_l2(clean, test)?,
        snr_proxy: snr_proxy(clean, test)?,
        word_errors: None,
        reference_words: None,
    })
}

fn check_aligned(clean: &Manifest, other: &Manifest, what: &str) -> Result<()> {
    let a: BTreeSet<&str> = clean.entries.iter().map(|e| e.utt_id.as_str()).collect();
    let b: BTreeSet<&str> = other.entries.iter().map(|e| e.utt_id.as_str()).collect();
    if a != b {
        let missing: Vec<&&str> = a.symmetric_difference(&b).take(5).collect();
        return Err(Error::Validation(format!(
            "{what} manifest is not aligned with the clean manifest (differing ids: {missing:?})"
        )));
    }
    Ok(())
}

/// Scores restored and degraded clips against clean references. Rows are computed in
/// parallel and reported in id order, so manifest row order has no effect.
pub fn evaluate(
    restored: &Manifest,
    clean: &Manifest,
    degraded: &Manifest,
    fx: &dyn FeatureExtractor,
    asr: Option<&dyn AsrHook>,
    workers: usize,
) -> Result<EvalReport> {
    ensure!(!clean.is_empty(), "clean manifest is empty");
    check_aligned(clean, restored, "restored")?;
    check_aligned(clean, degraded, "degraded")?;
    let mut jobs = Vec::new();
    for e in &clean.entries {
        jobs.push((e, SYSTEM_RESTORED, restored));
        jobs.push((e, SYSTEM_DEGRADED, degraded));
    }
    let rows = parallel_map(&jobs, workers, |&(entry, system, manifest)| {
        let other = manifest.get(&entry.utt_id).expect("aligned manifests");
        let clean_clip = clean.load_clip(entry)?;
        let test_clip = manifest.load_clip(other)?;
        let mut row = score_clip(&entry.utt_id, system, &clean_clip, &test_clip, fx)?;
        if let Some(asr) = asr {
            let reference = entry.transcript.as_deref().ok_or_else(|| {
                Error::Validation(format!("WER needs a transcript for '{}'", entry.utt_id))
            })?;
            let hyp = asr.transcribe(&manifest.resolve(other), reference)?;
            let (errors, words) = word_errors(reference, &hyp);
            row.word_errors = Some(errors);
            row.reference_words = Some(words);
        }
        Ok(row)
    })?;
    Ok(EvalReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_errors_by_hand() {
        assert_eq!(word_errors("the cat sat", "the cat sat"), (0, 3));
        assert_eq!(word_errors("the cat sat", "the bat sat down"), (2, 3));
        assert_eq!(word_errors("The, cat!", "the cat"), (0, 2));
        assert_eq!(word_errors("a b c", ""), (3, 3));
    }

    #[test]
    fn mean_ci_matches_formula() {
        let m = MeanCi::from_values(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((m.ci95 - 1.96 * sd / 2.0).abs() < 1e-12);
        assert_eq!(MeanCi::from_values(&[7.0]).ci95, 0.0);
    }

    #[test]
    fn identical_clips_are_perfect() {
        let clip = AudioClip::new(
            (0..24_000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(),
            24_000,
        );
        assert_eq!(logmel_l2(&clip, &clip).unwrap(), 0.0);
        assert_eq!(snr_proxy(&clip, &clip).unwrap(), 100.0);
        let louder = clip.with_samples(clip.samples.iter().map(|v| v * 2.0).collect());
        assert!(logmel_l2(&clip, &louder).unwrap() < 1e-9);
    }
}
