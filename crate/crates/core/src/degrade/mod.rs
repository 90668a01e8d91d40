//! Paired-corpus manufacture: reverberation, additive noise and codec artifacts,
//! each reproducible from a recorded [`DegradationRecipe`].
//!
//! The chain always runs reverberation, then noise mixing, then the codec.

mod codec;
mod mix;
mod room;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use codec::{
    alaw_compress, alaw_expand, align_to_reference, apply_codec, backend_by_name, lowpass, Codec,
    CodecBackend, CodecSpec, FfmpegCodec, SurrogateCodec, MAX_CODEC_DELAY,
};
pub use mix::{
    activity_mask, fit_noise, measure_snr, mix_at_snr, mix_components, Mixture,
    ACTIVITY_THRESHOLD_DBFS, SNR_RANGE_DB,
};
pub use room::{
    apply_rir, convolve_truncated, generate_rir, generate_rir_with, schroeder_rt60, Rir, RoomSpec,
    Walls, MIN_SOURCE_MIC_DISTANCE, SPEED_OF_SOUND, WALL_MARGIN,
};

use crate::audio::{load_wav, resample, AudioClip, Manifest, OUTPUT_RATE};
use crate::error::{ensure, Error, Result};
use crate::seed;

/// Which optional stages accompany the always-present noise mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    #[serde(rename = "noise")]
    Noise,
    #[serde(rename = "reverb")]
    Reverb,
    #[serde(rename = "codec")]
    Codec,
    #[serde(rename = "reverb+codec")]
    ReverbCodec,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Noise,
        Pattern::Reverb,
        Pattern::Codec,
        Pattern::ReverbCodec,
    ];

    pub fn has_reverb(self) -> bool {
        matches!(self, Pattern::Reverb | Pattern::ReverbCodec)
    }

    pub fn has_codec(self) -> bool {
        matches!(self, Pattern::Codec | Pattern::ReverbCodec)
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Noise => "noise",
            Pattern::Reverb => "reverb",
            Pattern::Codec => "codec",
            Pattern::ReverbCodec => "reverb+codec",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" | "clean+noise" => Ok(Pattern::Noise),
            "reverb" | "+reverb" => Ok(Pattern::Reverb),
            "codec" | "+codec" => Ok(Pattern::Codec),
            "reverb+codec" | "+reverb+codec" => Ok(Pattern::ReverbCodec),
            other => Err(Error::Validation(format!(
                "unknown pattern '{other}' (noise, reverb, codec, reverb+codec)"
            ))),
        }
    }
}

/// Every random choice needed to turn one clean clip into its degraded partner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationRecipe {
    pub utt_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub room: Option<RoomSpec>,
    pub codec: Option<CodecSpec>,
    pub rng_seed: u64,
    /// Codec backend that produced the corpus, recorded by the corpus builder.
    #[serde(default)]
    pub codec_backend: Option<String>,
}

impl DegradationRecipe {
    pub fn pattern(&self) -> Pattern {
        match (self.room.is_some(), self.codec.is_some()) {
            (false, false) => Pattern::Noise,
            (true, false) => Pattern::Reverb,
            (false, true) => Pattern::Codec,
            (true, true) => Pattern::ReverbCodec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = SNR_RANGE_DB;
        ensure!(
            (lo..=hi).contains(&self.snr_db),
            "snr {} dB outside [{lo}, {hi}]",
            self.snr_db
        );
        if let Some(r) = &self.room {
            r.validate()?;
        }
        if let Some(c) = &self.codec {
            c.validate()?;
        }
        Ok(())
    }
}

/// Draws a recipe for `pattern`. SNR is drawn first, then the room, then the codec,
/// so patterns sharing a seed share the stages they have in common.
/// `utt_id` and `noise_id` are left empty for the caller to assign.
pub fn sample_recipe(rng_seed: u64, pattern: Pattern) -> DegradationRecipe {
    let mut rng = seed::rng(rng_seed);
    let snr_db = rng.random_range(SNR_RANGE_DB.0..=SNR_RANGE_DB.1);
    let room = RoomSpec::sample(&mut rng);
    let codec = CodecSpec::sample(&mut rng);
    DegradationRecipe {
        utt_id: String::new(),
        noise_id: String::new(),
        snr_db,
        room: pattern.has_reverb().then_some(room),
        codec: pattern.has_codec().then_some(codec),
        rng_seed,
        codec_backend: None,
    }
}

/// Lookup of noise clips by id.
pub trait NoiseSource {
    fn noise(&self, noise_id: &str) -> Result<AudioClip>;
}

impl NoiseSource for Manifest {
    fn noise(&self, noise_id: &str) -> Result<AudioClip> {
        let entry = self.get(noise_id).ok_or_else(|| {
            Error::Validation(format!("noise '{noise_id}' not in noise manifest"))
        })?;
        let mut clip = load_wav(self.resolve(entry))?;
        clip.utt_id = noise_id.to_string();
        Ok(clip)
    }
}

impl NoiseSource for BTreeMap<String, AudioClip> {
    fn noise(&self, noise_id: &str) -> Result<AudioClip> {
        self.get(noise_id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("noise '{noise_id}' not in noise bank")))
    }
}

const RIR_STREAM: u64 = 1;
const MIX_STREAM: u64 = 2;

/// Applies `recipe` to `clean`; output is 24 kHz and a pure function of the inputs.
pub fn degrade(
    clean: &AudioClip,
    noise_bank: &dyn NoiseSource,
    recipe: &DegradationRecipe,
    backend: &dyn CodecBackend,
) -> Result<AudioClip> {
    recipe.validate()?;
    let mut x = resample(clean, OUTPUT_RATE)?;
    if let Some(room) = &recipe.room {
        let rir = generate_rir(
            room,
            OUTPUT_RATE,
            seed::derive_seed(recipe.rng_seed, RIR_STREAM),
        )?;
        x = apply_rir(&x, &rir)?;
    }
    let noise = resample(&noise_bank.noise(&recipe.noise_id)?, OUTPUT_RATE)?;
    x = mix_at_snr(
        &x,
        &noise,
        recipe.snr_db,
        seed::derive_seed(recipe.rng_seed, MIX_STREAM),
    )?;
    if let Some(spec) = &recipe.codec {
        x = apply_codec(&x, spec, backend)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> BTreeMap<String, AudioClip> {
        let mut rng = seed::rng(11);
        let n: Vec<f64> = (0..6000).map(|_| rng.random_range(-0.3..0.3)).collect();
        BTreeMap::from([("n0".to_string(), AudioClip::new(n, 24000))])
    }

    fn speech() -> AudioClip {
        AudioClip::new(
            (0..12000)
                .map(|i| 0.4 * (i as f64 * 0.05).sin() * (1.0 + (i as f64 * 0.001).sin()))
                .collect(),
            24000,
        )
        .with_id("u1")
    }

    fn recipe(pattern: Pattern, seed: u64) -> DegradationRecipe {
        let mut r = sample_recipe(seed, pattern);
        r.utt_id = "u1".into();
        r.noise_id = "n0".into();
        r
    }

    #[test]
    fn recipes_are_deterministic_and_respect_pattern() {
        assert_eq!(
            sample_recipe(42, Pattern::ReverbCodec),
            sample_recipe(42, Pattern::ReverbCodec)
        );
        let r = sample_recipe(42, Pattern::Noise);
        assert!(r.room.is_none() && r.codec.is_none());
        assert_eq!(r.pattern(), Pattern::Noise);
        for p in Pattern::ALL {
            assert_eq!(sample_recipe(3, p).pattern(), p);
            assert_eq!(p.name().parse::<Pattern>().unwrap(), p);
        }
        let a = sample_recipe(9, Pattern::Reverb);
        let b = sample_recipe(9, Pattern::ReverbCodec);
        assert_eq!((a.snr_db, a.room), (b.snr_db, b.room));
    }

    #[test]
    fn noise_only_chain_is_plain_mixing() {
        let r = recipe(Pattern::Noise, 5);
        let out = degrade(&speech(), &bank(), &r, &SurrogateCodec).unwrap();
        let noise = bank()["n0"].clone();
        let direct = mix_at_snr(
            &speech(),
            &noise,
            r.snr_db,
            seed::derive_seed(5, MIX_STREAM),
        )
        .unwrap();
        assert_eq!(out.samples, direct.samples);
        assert_eq!(out.sample_rate, 24000);
    }

    #[test]
    fn chain_is_deterministic_and_codec_matters() {
        let r = recipe(Pattern::ReverbCodec, 8);
        let a = degrade(&speech(), &bank(), &r, &SurrogateCodec).unwrap();
        let b = degrade(&speech(), &bank(), &r, &SurrogateCodec).unwrap();
        assert_eq!(a, b);
        let rv = degrade(
            &speech(),
            &bank(),
            &recipe(Pattern::Reverb, 8),
            &SurrogateCodec,
        )
        .unwrap();
        assert_ne!(a.samples, rv.samples);
    }

    #[test]
    fn missing_noise_and_bad_snr() {
        let mut r = recipe(Pattern::Noise, 1);
        r.noise_id = "zzz".into();
        assert!(degrade(&speech(), &bank(), &r, &SurrogateCodec).is_err());
        let mut r = recipe(Pattern::Noise, 1);
        r.snr_db = 40.0;
        assert!(degrade(&speech(), &bank(), &r, &SurrogateCodec).is_err());
    }

    #[test]
    fn recipe_json_round_trip() {
        let r = recipe(Pattern::ReverbCodec, 77);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<DegradationRecipe>(&s).unwrap(), r);
    }
}
