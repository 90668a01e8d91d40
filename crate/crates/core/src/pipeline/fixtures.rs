//! Deterministic toy corpus: eight synthetic "utterances" by four speakers plus a
//! small noise bank, generated on demand so every test runs offline.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::corpus::{recipe_for, PatternChoice};
use super::train::TrainingPair;
use crate::audio::{save_wav, AudioClip, Manifest, ManifestEntry, OUTPUT_RATE};
use crate::degrade::{degrade, DegradationRecipe, SurrogateCodec};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::seed;

/// Voice parameters of one synthetic speaker.
#[derive(Debug, Clone, Copy)]
pub struct Voice {
    pub id: &'static str,
    pub f0: f64,
    /// Spectral tilt of the harmonic source in dB per octave above 200 Hz.
    pub tilt_db_per_octave: f64,
    /// Multiplies every formant frequency (vocal-tract length).
    pub formant_scale: f64,
    /// Level of the aspiration noise relative to the harmonics.
    pub breathiness: f64,
}

pub const VOICES: [Voice; 4] = [
    Voice {
        id: "spk_a",
        f0: 105.0,
        tilt_db_per_octave: -13.0,
        formant_scale: 0.88,
        breathiness: 0.05,
    },
    Voice {
        id: "spk_b",
        f0: 150.0,
        tilt_db_per_octave: -8.0,
        formant_scale: 1.0,
        breathiness: 0.15,
    },
    Voice {
        id: "spk_c",
        f0: 210.0,
        tilt_db_per_octave: -5.0,
        formant_scale: 1.14,
        breathiness: 0.3,
    },
    Voice {
        id: "spk_d",
        f0: 245.0,
        tilt_db_per_octave: -11.0,
        formant_scale: 1.22,
        breathiness: 0.1,
    },
];

pub const TRANSCRIPTS: [&str; 8] = [
    "the quiet river bends south",
    "a small lamp glows at dusk",
    "seven boats sail past the pier",
    "fresh bread waits on the table",
    "she found a key under moss",
    "wind hums across the field",
    "old maps fold into thin squares",
    "bright stars rise over the hill",
];

/// `(F1, F2, F3)` in Hz for the vowel-like letters; other letters are consonants.
fn formants(c: char) -> Option<(f64, f64, f64)> {
    Some(match c {
        'a' => (730.0, 1090.0, 2440.0),
        'e' => (530.0, 1840.0, 2480.0),
        'i' => (270.0, 2290.0, 3010.0),
        'o' => (570.0, 840.0, 2410.0),
        'u' => (300.0, 870.0, 2240.0),
        'y' => (390.0, 1990.0, 2550.0),
        _ => return None,
    })
}

fn is_fricative(c: char) -> bool {
    matches!(c, 's' | 'f' | 'h' | 'z' | 'v' | 'c' | 'x' | 'q')
}

/// Magnitude response of three second-order resonances at frequency `f`.
fn resonance_gain(f: f64, (f1, f2, f3): (f64, f64, f64)) -> f64 {
    [(f1, 80.0, 1.0), (f2, 110.0, 0.6), (f3, 160.0, 0.35)]
        .iter()
        .map(|&(fc, bw, level)| level / (1.0 + ((f - fc) / bw).powi(2)).sqrt())
        .sum::<f64>()
        + 0.02
}

struct Segment {
    start: usize,
    len: usize,
    kind: SegmentKind,
}

enum SegmentKind {
    Vowel((f64, f64, f64)),
    Fricative,
    Stop,
}

fn segments(transcript: &str, rate: f64, voice: &Voice) -> (Vec<Segment>, usize) {
    let mut out = Vec::new();
    let mut t = (0.12 * rate) as usize;
    for word in transcript.split_whitespace() {
        for c in word.chars().flat_map(char::to_lowercase) {
            let (kind, dur) = match formants(c) {
                Some((f1, f2, f3)) => {
                    let s = voice.formant_scale;
                    (SegmentKind::Vowel((f1 * s, f2 * s, f3 * s)), 0.13)
                }
                None if is_fricative(c) => (SegmentKind::Fricative, 0.07),
                None => (SegmentKind::Stop, 0.045),
            };
            let len = (dur * rate) as usize;
            out.push(Segment {
                start: t,
                len,
                kind,
            });
            t += len;
        }
        t += (0.07 * rate) as usize;
    }
    (out, t + (0.12 * rate) as usize)
}

/// Synthesizes one utterance at 24 kHz: a glottal harmonic source shaped by per-vowel
/// formants and the speaker's tilt, with fricative noise bursts and silent gaps.
pub fn synthesize_utterance(voice: &Voice, transcript: &str, rng_seed: u64) -> AudioClip {
    let rate = OUTPUT_RATE as f64;
    let mut rng = seed::rng(rng_seed);
    let (segs, total) = segments(transcript, rate, voice);
    let mut out = vec![0.0; total];
    let n_harm = ((0.45 * rate) / voice.f0) as usize;
    let phases: Vec<f64> = (0..n_harm)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let vibrato_rate = rng.random_range(4.5..6.0);
    let tilt = |f: f64| 10f64.powf(voice.tilt_db_per_octave * (f / 200.0).max(1.0).log2() / 20.0);
    let mut phase = 0.0;
    let mut prev_formants = formants('e').unwrap();
    for seg in &segs {
        let ramp = (0.012 * rate) as usize;
        let env = |i: usize| {
            let a = (i as f64 / ramp as f64).min(1.0);
            let b = ((seg.len - i) as f64 / ramp as f64).min(1.0);
            a.min(b)
        };
        match seg.kind {
            SegmentKind::Vowel(target) => {
                for i in 0..seg.len {
                    let n = seg.start + i;
                    let time = n as f64 / rate;
                    // Formants glide from the previous vowel over the first 30 ms.
                    let glide = (i as f64 / (0.03 * rate)).min(1.0);
                    let fm = (
                        prev_formants.0 + glide * (target.0 - prev_formants.0),
                        prev_formants.1 + glide * (target.1 - prev_formants.1),
                        prev_formants.2 + glide * (target.2 - prev_formants.2),
                    );
                    let f0 = voice.f0
                        * (1.0 - 0.08 * time / 3.0)
                        * (1.0 + 0.01 * (2.0 * PI * vibrato_rate * time).sin());
                    phase += 2.0 * PI * f0 / rate;
                    let mut v = 0.0;
                    for (k, ph) in phases.iter().enumerate() {
                        let f = (k + 1) as f64 * f0;
                        if f > 0.45 * rate {
                            break;
                        }
                        v += tilt(f) * resonance_gain(f, fm) * ((k + 1) as f64 * phase + ph).sin();
                    }
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out[n] +=
                        env(i) * (v + voice.breathiness * 0.3 * z * resonance_gain(2500.0, fm));
                }
                prev_formants = target;
            }
            SegmentKind::Fricative => {
                let mut hp = 0.0;
                let mut last = 0.0;
                for i in 0..seg.len {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    // First-order high-pass keeps the burst above ~2 kHz.
                    hp = 0.6 * (hp + z - last);
                    last = z;
                    out[seg.start + i] += env(i) * 0.12 * hp;
                }
            }
            SegmentKind::Stop => {
                for i in 0..seg.len.min((0.01 * rate) as usize) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out[seg.start + i] += 0.15 * z * (-(i as f64) / (0.002 * rate)).exp();
                }
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    let mut clip = AudioClip::new(out, OUTPUT_RATE);
    clip.transcript = Some(transcript.to_string());
    clip.speaker_id = Some(voice.id.to_string());
    clip
}

/// The eight fixture utterances `utt00..utt07`; speaker `i % 4` reads transcript `i`.
pub fn fixture_utterances(rng_seed: u64) -> Vec<AudioClip> {
    TRANSCRIPTS
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let voice = &VOICES[i % VOICES.len()];
            synthesize_utterance(voice, t, seed::derive_seed(rng_seed, i as u64))
                .with_id(format!("utt{i:02}"))
        })
        .collect()
}

/// Three 3-second noise clips: pink-ish broadband, modulated band noise ("babble")
/// and mains hum with hiss.
pub fn fixture_noises(rng_seed: u64) -> Vec<AudioClip> {
    let rate = OUTPUT_RATE as f64;
    let n = (3.0 * rate) as usize;
    let mut rng = seed::sub_rng(rng_seed, 0x4E01);
    let mut white =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };

    // Pink-ish: sum of leaky integrators at octave-spaced corners.
    let w = white(n);
    let mut states = [0.0f64; 4];
    let pink: Vec<f64> = w
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            for (j, s) in states.iter_mut().enumerate() {
                let a = (-2.0 * PI * 60.0 * 4f64.powi(j as i32) / rate).exp();
                *s = a * *s + (1.0 - a) * x;
                acc += *s;
            }
            acc + 0.05 * x
        })
        .collect();

    let w = white(n);
    let mut lp = 0.0;
    let babble: Vec<f64> = w
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            lp = 0.85 * lp + 0.15 * x;
            let t = i as f64 / rate;
            lp * (1.0 + 0.6 * (2.0 * PI * 3.1 * t).sin() * (2.0 * PI * 0.7 * t).cos())
        })
        .collect();

    let w = white(n);
    let hum: Vec<f64> = w
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let t = i as f64 / rate;
            (1..=6)
                .map(|k| (2.0 * PI * 50.0 * k as f64 * t).sin() / k as f64)
                .sum::<f64>()
                + 0.1 * x
        })
        .collect();

    [
        ("noise_pink", pink),
        ("noise_babble", babble),
        ("noise_hum", hum),
    ]
    .into_iter()
    .map(|(id, mut s)| {
        let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        s.iter_mut().for_each(|v| *v *= 0.5 / peak);
        AudioClip::new(s, OUTPUT_RATE).with_id(id)
    })
    .collect()
}

/// Degraded partners of the fixture utterances, made in memory with the same recipes
/// [`degrade_corpus`](super::degrade_corpus) would draw for `corpus_seed`.
pub fn fixture_degraded(
    clean: &[AudioClip],
    pattern: PatternChoice,
    corpus_seed: u64,
    noise_seed: u64,
) -> Result<Vec<(AudioClip, DegradationRecipe)>> {
    let bank: BTreeMap<String, AudioClip> = fixture_noises(noise_seed)
        .into_iter()
        .map(|n| (n.utt_id.clone(), n))
        .collect();
    let noise_ids: Vec<String> = bank.keys().cloned().collect();
    clean
        .iter()
        .map(|c| {
            let recipe = recipe_for(&c.utt_id, &noise_ids, pattern, corpus_seed);
            let mut d = degrade(c, &bank, &recipe, &SurrogateCodec)?;
            d.utt_id = c.utt_id.clone();
            d.transcript = c.transcript.clone();
            d.speaker_id = c.speaker_id.clone();
            Ok((d, recipe))
        })
        .collect()
}

/// Featurized fixture pairs, ready for the training loops.
pub fn fixture_pairs(
    rng_seed: u64,
    corpus_seed: u64,
    fx: &dyn FeatureExtractor,
) -> Result<Vec<TrainingPair>> {
    let clean = fixture_utterances(rng_seed);
    let degraded = fixture_degraded(&clean, PatternChoice::Mixed, corpus_seed, rng_seed)?;
    clean
        .iter()
        .zip(&degraded)
        .map(|(c, (d, _))| {
            TrainingPair::from_clips(c, d, c.transcript.as_deref().unwrap_or_default(), fx)
        })
        .collect()
}

/// Locations of a fixture corpus written to disk.
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub clean_manifest: PathBuf,
    pub noise_manifest: PathBuf,
}

fn write_clips(dir: &Path, clips: &[AudioClip], manifest_name: &str) -> Result<PathBuf> {
    let audio_dir = dir.join(manifest_name);
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut entries = Vec::new();
    for clip in clips {
        let rel = PathBuf::from(manifest_name).join(format!("{}.wav", clip.utt_id));
        save_wav(clip, dir.join(&rel))?;
        entries.push(ManifestEntry {
            utt_id: clip.utt_id.clone(),
            audio_path: rel,
            transcript: clip.transcript.clone(),
            speaker_id: clip.speaker_id.clone(),
        });
    }
    let path = dir.join(format!("{manifest_name}.jsonl"));
    Manifest::new(entries)?.save(&path)?;
    Ok(path)
}

/// Writes `clean/*.wav`, `noise/*.wav` and their manifests under `dir`.
pub fn write_fixture_corpus(dir: &Path, rng_seed: u64) -> Result<FixturePaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(FixturePaths {
        clean_manifest: write_clips(dir, &fixture_utterances(rng_seed), "clean")?,
        noise_manifest: write_clips(dir, &fixture_noises(rng_seed), "noise")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape() {
        let utts = fixture_utterances(0);
        assert_eq!(utts.len(), 8);
        for (i, u) in utts.iter().enumerate() {
            assert_eq!(u.sample_rate, 24_000);
            assert!(
                u.duration_seconds() > 1.5 && u.duration_seconds() < 4.0,
                "{}",
                u.duration_seconds()
            );
            assert!((u.peak() - 0.5).abs() < 1e-12);
            assert_eq!(u.speaker_id.as_deref(), Some(VOICES[i % 4].id));
            assert!(u.samples.iter().all(|v| v.is_finite()));
        }
        assert_eq!(fixture_noises(0).len(), 3);
        assert_eq!(fixture_utterances(0), utts);
    }
}
