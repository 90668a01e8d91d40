//! Waveform synthesis from cleaned speech features.
//!
//! Features at 25 frames/s are upsampled 4× by two shared single-channel transposed
//! convolutions, modulated by the speaker embedding with a FiLM layer, and decoded by
//! an iterative refinement loop `y ← G(y − F(y, c, t))` that starts from seeded white
//! noise. `G(y) = λ·y / max|y|`.
//!
//! `F` is a learned time-varying filterbank: a conditioning stack upsamples `c` to the
//! sample rate (one repeat-and-convolve stage per factor) and produces per-sample gains
//! for a bank of learned FIR filters applied to the current iterate.

mod losses;
pub(crate) use losses::sum_vars;

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use losses::{
    discriminator_loss, feature_matching_loss, generator_adv_loss, mpd_forward, stft_loss,
    stft_loss_graph, BranchOutput, MpdConfig, StftResolution,
};

use crate::audio::{AudioClip, OUTPUT_RATE};
use crate::cleaner::{check_layout, ensure_kind, film};
use crate::error::{ensure, Error, Result};
use crate::features::{SpeakerEmbedding, SpeechFeatures, FRAMES_PER_SECOND};
use crate::nn::layers::{add_conv, add_linear};
use crate::nn::{Bound, ConvSpec, Graph, ParamStore, Tensor, Var};
use crate::seed;
use crate::tensor_io::Checkpoint;

pub const CHECKPOINT_KIND: &str = "vocoder";
/// Kernel and stride of the two feature upsampling layers.
pub const UPSAMPLE_KERNEL: usize = 4;
pub const UPSAMPLE_STRIDE: usize = 2;
const UPSAMPLE_PADDING: usize = 1;
const UPSAMPLE_STAGES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderConfig {
    pub feature_rate_in: f64,
    pub upsampled_rate: f64,
    pub sample_rate: u32,
    pub ublock_factors: Vec<usize>,
    pub n_refine_iterations: usize,
    pub lambda_gain: f64,
    /// Speech feature dimension.
    #[serde(rename = "D")]
    pub d: usize,
    /// Speaker embedding dimension.
    #[serde(rename = "Q")]
    pub q: usize,
    /// Width of the conditioning stack.
    pub cond_channels: usize,
    /// Number of FIR filters in the refinement filterbank.
    pub filter_channels: usize,
    pub filter_kernel: usize,
    pub mpd: MpdConfig,
    pub stft_loss_resolutions: Vec<StftResolution>,
    pub stft_weight: f64,
    pub adv_weight: f64,
    pub feature_match_weight: f64,
    pub init_seed: u64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        VocoderConfig::desk_scale()
    }
}

impl VocoderConfig {
    pub fn desk_scale() -> Self {
        VocoderConfig {
            feature_rate_in: FRAMES_PER_SECOND,
            upsampled_rate: 100.0,
            sample_rate: OUTPUT_RATE,
            ublock_factors: vec![5, 4, 3, 2, 2],
            n_refine_iterations: 3,
            lambda_gain: 0.9,
            d: 64,
            q: 16,
            cond_channels: 24,
            filter_channels: 16,
            filter_kernel: 63,
            mpd: MpdConfig::desk_scale(),
            stft_loss_resolutions: StftResolution::parallel_wavegan(),
            stft_weight: 1.0,
            adv_weight: 0.05,
            feature_match_weight: 0.1,
            init_seed: 0,
        }
    }

    /// Small enough for finite-difference checks and quick overfitting tests.
    pub fn tiny() -> Self {
        VocoderConfig {
            n_refine_iterations: 2,
            d: 8,
            q: 4,
            cond_channels: 6,
            filter_channels: 6,
            filter_kernel: 15,
            mpd: MpdConfig::tiny(),
            ..Self::desk_scale()
        }
    }

    /// Waveform samples per input feature frame.
    pub fn samples_per_frame(&self) -> usize {
        (1 << UPSAMPLE_STAGES) * self.ublock_factors.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.ublock_factors.is_empty(), "ublock_factors is empty");
        ensure!(
            self.ublock_factors.iter().all(|&f| f >= 1),
            "ublock factors must be positive"
        );
        let product: usize = self.ublock_factors.iter().product();
        ensure!(
            (product as f64 * self.upsampled_rate - self.sample_rate as f64).abs() < 1e-9,
            "ublock factors {:?} multiply to {product}, but {product} x {} frames/s != {} Hz",
            self.ublock_factors,
            self.upsampled_rate,
            self.sample_rate
        );
        ensure!(
            (self.feature_rate_in * (1 << UPSAMPLE_STAGES) as f64 - self.upsampled_rate).abs()
                < 1e-9,
            "the feature upsampler multiplies the frame rate by 4: {} x 4 != {}",
            self.feature_rate_in,
            self.upsampled_rate
        );
        ensure!(
            self.lambda_gain > 0.0 && self.lambda_gain <= 1.0,
            "lambda_gain {} outside (0, 1]",
            self.lambda_gain
        );
        ensure!(
            self.n_refine_iterations >= 1,
            "n_refine_iterations must be at least 1"
        );
        ensure!(
            self.d > 0 && self.q > 0 && self.cond_channels > 0 && self.filter_channels > 0,
            "vocoder dimensions must be positive"
        );
        ensure!(self.filter_kernel % 2 == 1, "filter_kernel must be odd");
        ensure!(
            !self.stft_loss_resolutions.is_empty(),
            "no STFT loss resolutions"
        );
        for r in &self.stft_loss_resolutions {
            ensure!(
                r.hop >= 1 && r.window >= 1 && r.window <= r.fft_size,
                "invalid STFT resolution {r:?}"
            );
        }
        self.mpd.validate()
    }
}

/// `λ·y / max|y|`.
pub fn gain_normalize(y: &[f64], lambda_gain: f64) -> Result<Vec<f64>> {
    let m = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure!(m > 0.0, "cannot gain-normalize an all-zero waveform");
    ensure!(m.is_finite(), "waveform contains non-finite samples");
    Ok(y.iter().map(|v| lambda_gain * v / m).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocoderModel {
    pub config: VocoderConfig,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
}

impl VocoderModel {
    pub fn new(config: VocoderConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = seed::sub_rng(c.init_seed, 0x70C0);
        let mut gen = ParamStore::new();
        // Near-interpolating start: a triangular kernel; the first stage is shifted so
        // that negative features survive the ReLU.
        for stage in 0..UPSAMPLE_STAGES {
            let jitter = Tensor::uniform(&[1, 1, UPSAMPLE_KERNEL], 0.05, &mut rng);
            let base = Tensor::new(&[1, 1, UPSAMPLE_KERNEL], vec![0.5, 1.0, 1.0, 0.5]);
            gen.insert(
                format!("upsample{stage}.w"),
                base.zip_map(&jitter, |a, b| a + b),
            );
            gen.insert(
                format!("upsample{stage}.b"),
                Tensor::full(&[1], if stage == 0 { 1.0 } else { 0.0 }),
            );
        }
        film::register(&mut gen, &mut rng, "film_spk", c.d, c.q);
        add_linear(&mut gen, &mut rng, "cond_in", c.d, c.cond_channels);
        for j in 0..c.ublock_factors.len() {
            add_conv(
                &mut gen,
                &mut rng,
                &format!("ublock{j}"),
                c.cond_channels,
                c.cond_channels,
                3,
            );
        }
        gen.insert(
            "iteration_bias",
            Tensor::randn(&[c.n_refine_iterations, c.cond_channels], 0.1, &mut rng),
        );
        add_linear(
            &mut gen,
            &mut rng,
            "gain",
            c.cond_channels,
            c.filter_channels,
        );
        add_conv(
            &mut gen,
            &mut rng,
            "filterbank",
            1,
            c.filter_channels,
            c.filter_kernel,
        );
        add_linear(&mut gen, &mut rng, "mix", c.filter_channels, 1);
        add_linear(&mut gen, &mut rng, "direct", c.cond_channels, 1);
        let mut disc = ParamStore::new();
        c.mpd
            .register(&mut disc, &mut seed::sub_rng(c.init_seed, 0xD15C));
        Ok(VocoderModel {
            config,
            generator: gen,
            discriminator: disc,
        })
    }

    fn check_features(&self, s: &Tensor) -> Result<()> {
        ensure!(
            s.rank() == 2 && s.rows() >= 1,
            "vocoder input needs at least one frame"
        );
        ensure!(
            s.cols() == self.config.d,
            "features have {} channels, vocoder expects D = {}",
            s.cols(),
            self.config.d
        );
        Ok(())
    }

    /// `[K, D] -> [4K, D]`: two transposed convolutions (kernel 4, stride 2, ReLU)
    /// whose single-channel kernels are shared by every feature channel.
    pub fn upsample_graph<'g>(&self, p: &Bound<'g>, s: Var<'g>) -> Var<'g> {
        let shape = s.shape();
        let (k, d) = (shape[0], shape[1]);
        let mut h = s.transpose().reshape(&[d, k, 1]);
        for stage in 0..UPSAMPLE_STAGES {
            h = h
                .conv_transpose1d(
                    p.get(&format!("upsample{stage}.w")),
                    UPSAMPLE_STRIDE,
                    UPSAMPLE_PADDING,
                )
                .add_bias(p.get(&format!("upsample{stage}.b")))
                .relu();
        }
        let t = h.shape()[1];
        h.reshape(&[d, t]).transpose()
    }

    /// Conditioning `c = film(upsample(Ŝ), d)` at 100 frames/s.
    pub fn condition_graph<'g>(&self, p: &Bound<'g>, s: Var<'g>, d: Var<'g>) -> Var<'g> {
        film::apply(p, "film_spk", self.upsample_graph(p, s), d)
    }

    /// Conditioning at the sample rate, `[T, cond_channels]`.
    fn cond_stack<'g>(&self, p: &Bound<'g>, c: Var<'g>) -> Var<'g> {
        let mut h = p.linear("cond_in", c);
        for (j, &f) in self.config.ublock_factors.iter().enumerate() {
            h = p
                .conv(
                    &format!("ublock{j}"),
                    h.repeat_time(f),
                    ConvSpec::same(3, 1),
                )
                .leaky_relu(0.2);
        }
        h
    }

    /// One refinement step `F(y, c, t)`; `y [T, 1]`, `h [T, cond_channels]`.
    fn refine_step<'g>(&self, p: &Bound<'g>, y: Var<'g>, h: Var<'g>, t: usize) -> Var<'g> {
        let bias = p.get("iteration_bias").select_row(t);
        let gains = p.linear("gain", h.add_bias(bias));
        let bank = p.conv(
            "filterbank",
            y,
            ConvSpec::same(self.config.filter_kernel, 1),
        );
        p.linear("mix", bank.mul(gains))
            .add(p.linear("direct", h.add_bias(bias)))
    }

    /// Waveform after every refinement iteration, each `[T]` with peak `λ`.
    pub fn synthesize_graph<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        s: Var<'g>,
        d: Var<'g>,
        noise: &[f64],
    ) -> Vec<Var<'g>> {
        let c = self.condition_graph(p, s, d);
        let h = self.cond_stack(p, c);
        let t_out = h.shape()[0];
        assert_eq!(
            noise.len(),
            t_out,
            "noise length must equal the output length"
        );
        let mut y = g.constant(Tensor::new(&[t_out, 1], noise.to_vec()));
        let mut outs = Vec::with_capacity(self.config.n_refine_iterations);
        for t in 0..self.config.n_refine_iterations {
            y = y
                .sub(self.refine_step(p, y, h, t))
                .max_abs_normalize(self.config.lambda_gain);
            outs.push(y.reshape(&[t_out]));
        }
        outs
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames * self.config.samples_per_frame()
    }

    /// Seeded standard-normal initial waveform.
    pub fn initial_noise(&self, len: usize, rng_seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(rng_seed);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn upsample_features(&self, s: &SpeechFeatures) -> Result<SpeechFeatures> {
        self.check_features(&s.values)?;
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let out = self.upsample_graph(&p, g.constant(s.values.clone()));
        Ok(SpeechFeatures {
            values: (*out.value()).clone(),
            frame_rate: s.frame_rate * (1 << UPSAMPLE_STAGES) as f64,
            source_rate: s.source_rate,
        })
    }

    /// FiLM of upsampled features with the speaker embedding.
    pub fn condition_speaker(
        &self,
        s_up: &SpeechFeatures,
        d: &SpeakerEmbedding,
    ) -> Result<SpeechFeatures> {
        self.check_features(&s_up.values)?;
        ensure!(
            d.dim() == self.config.q,
            "speaker embedding has {} values, vocoder expects Q = {}",
            d.dim(),
            self.config.q
        );
        let fp = film::FilmParams::from_store(&self.generator, "film_spk")?;
        Ok(SpeechFeatures {
            values: film::film(&s_up.values, &d.values, &fp)?,
            ..s_up.clone()
        })
    }

    pub fn synthesize(
        &self,
        s: &SpeechFeatures,
        d: &SpeakerEmbedding,
        rng_seed: u64,
    ) -> Result<AudioClip> {
        self.check_features(&s.values)?;
        ensure!(
            d.dim() == self.config.q,
            "speaker embedding has {} values, vocoder expects Q = {}",
            d.dim(),
            self.config.q
        );
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let noise = self.initial_noise(self.output_len(s.num_frames()), rng_seed);
        let outs = self.synthesize_graph(
            &g,
            &p,
            g.constant(s.values.clone()),
            g.constant(d.as_tensor()),
            &noise,
        );
        let y = outs.last().expect("at least one iteration").value();
        ensure!(y.all_finite(), "vocoder produced non-finite samples");
        Ok(AudioClip::new(y.data().to_vec(), self.config.sample_rate))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = ParamStore::new();
        for (k, v) in self.generator.iter() {
            params.insert(format!("gen.{k}"), v.clone());
        }
        for (k, v) in self.discriminator.iter() {
            params.insert(format!("disc.{k}"), v.clone());
        }
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            params,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ensure_kind(&ckpt, CHECKPOINT_KIND)?;
        let config: VocoderConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::Format(format!("vocoder checkpoint config: {e}")))?;
        let fresh = VocoderModel::new(config)?;
        let (mut gen, mut disc) = (ParamStore::new(), ParamStore::new());
        for (k, v) in ckpt.params.iter() {
            if let Some(name) = k.strip_prefix("gen.") {
                gen.insert(name, v.clone());
            } else if let Some(name) = k.strip_prefix("disc.") {
                disc.insert(name, v.clone());
            } else {
                return Err(Error::Format(format!("unexpected vocoder parameter '{k}'")));
            }
        }
        check_layout(&fresh.generator, &gen)?;
        check_layout(&fresh.discriminator, &disc)?;
        Ok(VocoderModel {
            config: fresh.config,
            generator: gen,
            discriminator: disc,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(k: usize, d: usize, s: u64) -> SpeechFeatures {
        SpeechFeatures::new(Tensor::uniform(&[k, d], 1.0, &mut seed::rng(s))).unwrap()
    }

    fn spk(q: usize, s: u64) -> SpeakerEmbedding {
        SpeakerEmbedding::normalized(Tensor::randn(&[q], 1.0, &mut seed::rng(s)).into_data())
            .unwrap()
    }

    #[test]
    fn gain_normalize_by_hand() {
        let y = gain_normalize(&[0.5, -1.0, 0.25], 0.9).unwrap();
        let want = [0.45, -0.9, 0.225];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(gain_normalize(&y, 0.9).unwrap(), y);
        assert!(gain_normalize(&[0.0, 0.0], 0.9).is_err());
    }

    #[test]
    fn rejects_rate_inconsistent_factors() {
        let bad = VocoderConfig {
            ublock_factors: vec![5, 4, 2, 2, 2],
            ..VocoderConfig::desk_scale()
        };
        assert!(bad.validate().is_err());
        assert!(VocoderConfig::desk_scale().validate().is_ok());
        assert_eq!(VocoderConfig::desk_scale().samples_per_frame(), 960);
        let bad_gain = VocoderConfig {
            lambda_gain: 1.5,
            ..VocoderConfig::desk_scale()
        };
        assert!(bad_gain.validate().is_err());
    }

    #[test]
    fn upsampling_quadruples_frames() {
        let m = VocoderModel::new(VocoderConfig::tiny()).unwrap();
        let up = m.upsample_features(&feats(15, 8, 1)).unwrap();
        assert_eq!(up.values.shape(), &[60, 8]);
        assert_eq!(up.frame_rate, 100.0);
        assert_eq!(
            m.upsample_features(&feats(30, 8, 1)).unwrap().num_frames(),
            120
        );
        let other = VocoderModel::new(VocoderConfig {
            init_seed: 7,
            ..VocoderConfig::tiny()
        })
        .unwrap();
        assert_ne!(other.upsample_features(&feats(15, 8, 1)).unwrap(), up);
    }

    #[test]
    fn speaker_conditioning_is_live() {
        let m = VocoderModel::new(VocoderConfig::tiny()).unwrap();
        let up = m.upsample_features(&feats(5, 8, 2)).unwrap();
        let a = m.condition_speaker(&up, &spk(4, 1)).unwrap();
        let b = m.condition_speaker(&up, &spk(4, 2)).unwrap();
        assert_eq!(a.values.shape(), &[20, 8]);
        assert_ne!(a, b);
        assert!(m.condition_speaker(&up, &spk(5, 1)).is_err());
    }

    #[test]
    fn synthesis_length_peak_and_determinism() {
        let m = VocoderModel::new(VocoderConfig::tiny()).unwrap();
        let s = feats(15, 8, 3);
        let d = spk(4, 3);
        let y = m.synthesize(&s, &d, 42).unwrap();
        assert_eq!(y.len(), 14_400);
        assert_eq!(y.sample_rate, 24_000);
        assert!((y.peak() - 0.9).abs() < 1e-12);
        assert_eq!(y, m.synthesize(&s, &d, 42).unwrap());
        assert_ne!(y, m.synthesize(&s, &d, 43).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = VocoderModel::new(VocoderConfig {
            init_seed: 3,
            ..VocoderConfig::tiny()
        })
        .unwrap();
        let back = VocoderModel::from_checkpoint(
            Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
    }
}
