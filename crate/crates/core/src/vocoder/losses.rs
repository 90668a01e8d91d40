use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Stft;
use crate::error::{ensure, Result};
use crate::nn::layers::add_conv;
use crate::nn::{Bound, ConvSpec, Graph, ParamStore, Tensor, Var};

/// Power floor inside the STFT magnitude (keeps `ln` and its gradient finite).
const MAG_POWER_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftResolution {
    pub fft_size: usize,
    pub hop: usize,
    pub window: usize,
}

impl StftResolution {
    /// The three resolutions of the Parallel WaveGAN multi-resolution STFT loss.
    pub fn parallel_wavegan() -> Vec<StftResolution> {
        vec![
            StftResolution {
                fft_size: 1024,
                hop: 120,
                window: 600,
            },
            StftResolution {
                fft_size: 2048,
                hop: 240,
                window: 1200,
            },
            StftResolution {
                fft_size: 512,
                hop: 50,
                window: 240,
            },
        ]
    }

    pub fn stft(&self) -> Stft {
        Stft::new(self.fft_size, self.hop, self.window)
    }
}

/// Spectral convergence plus mean log-magnitude distance, averaged over resolutions:
/// `‖|S|−|Y|‖_F / ‖|S|‖_F + mean |ln|S| − ln|Y||`.
pub fn stft_loss_graph<'g>(g: &'g Graph, y: Var<'g>, s: &[f64], stfts: &[Stft]) -> Var<'g> {
    let target = g.constant(Tensor::new(&[s.len()], s.to_vec()));
    let mut total: Option<Var<'g>> = None;
    for stft in stfts {
        let ms = target.stft_magnitude(stft, MAG_POWER_FLOOR);
        let my = y.stft_magnitude(stft, MAG_POWER_FLOOR);
        let ref_norm = ms.value().sq_sum().sqrt().max(1e-12);
        let sc = ms
            .sub(my)
            .square()
            .sum()
            .add_scalar(1e-24)
            .sqrt()
            .scale(1.0 / ref_norm);
        let mag = ms.ln().sub(my.ln()).abs().mean();
        let term = sc.add(mag).scale(1.0 / stfts.len() as f64);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.expect("at least one STFT resolution")
}

/// Multi-resolution STFT loss between two equal-length waveforms.
pub fn stft_loss(y: &[f64], s: &[f64], resolutions: &[StftResolution]) -> Result<f64> {
    ensure!(
        y.len() == s.len(),
        "waveform lengths differ: {} vs {}",
        y.len(),
        s.len()
    );
    ensure!(!resolutions.is_empty(), "no STFT resolutions");
    if y == s {
        return Ok(0.0);
    }
    let stfts: Vec<Stft> = resolutions.iter().map(StftResolution::stft).collect();
    let g = Graph::new();
    let yv = g.constant(Tensor::new(&[y.len()], y.to_vec()));
    Ok(stft_loss_graph(&g, yv, s, &stfts).item())
}

/// Multi-period discriminator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpdConfig {
    pub periods: Vec<usize>,
    /// Output channels of the strided layers.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub final_kernel: usize,
    pub lrelu_slope: f64,
}

impl Default for MpdConfig {
    fn default() -> Self {
        MpdConfig::desk_scale()
    }
}

impl MpdConfig {
    pub const PERIODS: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

    pub fn desk_scale() -> Self {
        MpdConfig {
            periods: Self::PERIODS.to_vec(),
            channels: vec![8, 16, 32],
            kernel: 5,
            stride: 3,
            final_kernel: 3,
            lrelu_slope: 0.1,
        }
    }

    pub fn tiny() -> Self {
        MpdConfig {
            channels: vec![2, 3],
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.periods.is_empty(), "MPD needs at least one period");
        ensure!(
            self.periods.iter().all(|&p| p >= 1),
            "MPD periods must be positive"
        );
        let mut sorted = self.periods.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(
            sorted.len() == self.periods.len(),
            "MPD periods must be distinct"
        );
        ensure!(
            !self.channels.is_empty() && self.channels.iter().all(|&c| c > 0),
            "MPD channels must be positive"
        );
        ensure!(
            self.kernel % 2 == 1 && self.final_kernel % 2 == 1,
            "MPD kernels must be odd"
        );
        ensure!(self.stride >= 1, "MPD stride must be positive");
        Ok(())
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for &p in &self.periods {
            let mut ci = 1;
            for (l, &co) in self.channels.iter().enumerate() {
                add_conv(store, rng, &format!("mpd{p}.conv{l}"), ci, co, self.kernel);
                ci = co;
            }
            add_conv(store, rng, &format!("mpd{p}.out"), ci, 1, self.final_kernel);
        }
    }
}

/// Output of one period branch: final logits and every hidden activation.
pub struct BranchOutput<'g> {
    pub logits: Var<'g>,
    pub features: Vec<Var<'g>>,
}

/// Runs every period branch on waveform `y [T]`.
///
/// A branch folds the (zero-padded) waveform into `p` interleaved phases and runs the
/// same strided 1-D convolutions along each phase, i.e. a `(k, 1)` 2-D convolution.
pub fn mpd_forward<'g>(cfg: &MpdConfig, p: &Bound<'g>, y: Var<'g>) -> Vec<BranchOutput<'g>> {
    let t = y.value().numel();
    cfg.periods
        .iter()
        .map(|&period| {
            let pad = (period - t % period) % period;
            let rows = (t + pad) / period;
            let folded = y
                .reshape(&[t, 1])
                .pad_time(0, pad)
                .reshape(&[rows, period])
                .transpose()
                .reshape(&[period, rows, 1]);
            let strided = ConvSpec {
                stride: cfg.stride,
                ..ConvSpec::same(cfg.kernel, 1)
            };
            let mut h = folded;
            let mut features = Vec::with_capacity(cfg.channels.len());
            for l in 0..cfg.channels.len() {
                h = p
                    .conv(&format!("mpd{period}.conv{l}"), h, strided)
                    .leaky_relu(cfg.lrelu_slope);
                features.push(h);
            }
            let logits = p.conv(
                &format!("mpd{period}.out"),
                h,
                ConvSpec::same(cfg.final_kernel, 1),
            );
            BranchOutput { logits, features }
        })
        .collect()
}

/// Least-squares discriminator loss `Σ_branches mean((D(s) − 1)²) + mean(D(y)²)`.
pub fn discriminator_loss<'g>(real: &[BranchOutput<'g>], fake: &[BranchOutput<'g>]) -> Var<'g> {
    let terms: Vec<Var<'g>> = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            r.logits
                .add_scalar(-1.0)
                .square()
                .mean()
                .add(f.logits.square().mean())
        })
        .collect();
    sum_vars(&terms)
}

/// Least-squares generator loss `Σ_branches mean((D(y) − 1)²)`.
pub fn generator_adv_loss<'g>(fake: &[BranchOutput<'g>]) -> Var<'g> {
    let terms: Vec<Var<'g>> = fake
        .iter()
        .map(|f| f.logits.add_scalar(-1.0).square().mean())
        .collect();
    sum_vars(&terms)
}

/// Feature matching `Σ mean |f_real − f_fake|` over every hidden activation.
pub fn feature_matching_loss<'g>(
    g: &'g Graph,
    real: &[BranchOutput<'g>],
    fake: &[BranchOutput<'g>],
) -> Var<'g> {
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        for (fr, ff) in r.features.iter().zip(&f.features) {
            let fr = g.constant((*fr.value()).clone());
            terms.push(fr.sub(*ff).abs().mean());
        }
    }
    sum_vars(&terms)
}

pub(crate) fn sum_vars<'g>(terms: &[Var<'g>]) -> Var<'g> {
    let mut it = terms.iter().copied();
    let first = it.next().expect("at least one term");
    it.fold(first, |acc, t| acc.add(t))
}
