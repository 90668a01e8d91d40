use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{limit_peak, AudioClip};
use crate::error::{ensure, Result};
use crate::seed;

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const WALL_MARGIN: f64 = 0.3;
pub const MIN_SOURCE_MIC_DISTANCE: f64 = 0.5;
const COLLOCATED_DISTANCE: f64 = 0.1;
/// Residual energy below which the impulse response is cut (-60 dB).
const TRUNCATION_RESIDUAL: f64 = 1e-6;
/// Relative spread of the random gain applied to each reflection.
const REFLECTION_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub width_x: f64,
    pub width_y: f64,
    pub height_z: f64,
    pub rt60: f64,
    pub source_pos: [f64; 3],
    pub mic_pos: [f64; 3],
}

impl RoomSpec {
    pub const WIDTH_RANGE: (f64, f64) = (2.0, 10.0);
    pub const HEIGHT_RANGE: (f64, f64) = (2.0, 5.0);
    pub const RT60_RANGE: (f64, f64) = (0.2, 0.5);

    /// Draws a room with uniform dimensions/RT60 and uniform source and microphone
    /// positions (0.3 m from every wall, at least 0.5 m apart).
    pub fn sample(rng: &mut impl Rng) -> Self {
        let width_x = rng.random_range(Self::WIDTH_RANGE.0..=Self::WIDTH_RANGE.1);
        let width_y = rng.random_range(Self::WIDTH_RANGE.0..=Self::WIDTH_RANGE.1);
        let height_z = rng.random_range(Self::HEIGHT_RANGE.0..=Self::HEIGHT_RANGE.1);
        let rt60 = rng.random_range(Self::RT60_RANGE.0..=Self::RT60_RANGE.1);
        let dims = [width_x, width_y, height_z];
        let point = |rng: &mut _| -> [f64; 3] {
            dims.map(|w| Rng::random_range(rng, WALL_MARGIN..=w - WALL_MARGIN))
        };
        loop {
            let source_pos = point(rng);
            let mic_pos = point(rng);
            if distance(&source_pos, &mic_pos) >= MIN_SOURCE_MIC_DISTANCE {
                return RoomSpec {
                    width_x,
                    width_y,
                    height_z,
                    rt60,
                    source_pos,
                    mic_pos,
                };
            }
        }
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.width_x, self.width_y, self.height_z]
    }

    pub fn volume(&self) -> f64 {
        self.width_x * self.width_y * self.height_z
    }

    pub fn surface(&self) -> f64 {
        2.0 * (self.width_x * self.width_y
            + self.width_x * self.height_z
            + self.width_y * self.height_z)
    }

    pub fn source_mic_distance(&self) -> f64 {
        distance(&self.source_pos, &self.mic_pos)
    }

    /// Uniform wall reflection (pressure) coefficient giving the requested RT60 at
    /// `sample_rate`, see [`calibrate_reflection`].
    pub fn reflection_coefficient(&self, sample_rate: u32) -> f64 {
        let lattice = ImageLattice::new(self, sample_rate);
        calibrate_reflection(&lattice, self.rt60, sample_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let (wl, wh) = Self::WIDTH_RANGE;
        let (hl, hh) = Self::HEIGHT_RANGE;
        let (rl, rh) = Self::RT60_RANGE;
        ensure!(
            (wl..=wh).contains(&self.width_x) && (wl..=wh).contains(&self.width_y),
            "room widths {} x {} outside [{wl}, {wh}] m",
            self.width_x,
            self.width_y
        );
        ensure!(
            (hl..=hh).contains(&self.height_z),
            "room height {} outside [{hl}, {hh}] m",
            self.height_z
        );
        ensure!(
            (rl..=rh).contains(&self.rt60),
            "rt60 {} outside [{rl}, {rh}] s",
            self.rt60
        );
        for (name, p) in [("source", &self.source_pos), ("mic", &self.mic_pos)] {
            for (axis, (&v, w)) in p.iter().zip(self.dims()).enumerate() {
                ensure!(
                    v >= WALL_MARGIN - 1e-12 && v <= w - WALL_MARGIN + 1e-12,
                    "{name} coordinate {axis} = {v} closer than {WALL_MARGIN} m to a wall"
                );
            }
        }
        Ok(())
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl Rir {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|v| v * v).sum()
    }

    /// Index of the first nonzero tap.
    pub fn onset(&self) -> Option<usize> {
        self.taps.iter().position(|&v| v != 0.0)
    }
}

/// Wall behaviour used by [`generate_rir_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Walls {
    /// Reflection coefficient derived from the room's RT60.
    FromRt60,
    /// Fixed pressure reflection coefficient; `0.0` is the free-field limit.
    Reflection(f64),
}

struct Image {
    delay: usize,
    order: u32,
    dist: f64,
}

/// Image sources of a shoebox room whose delay falls inside the response window of
/// `direct + 1.5 * RT60` samples, in a fixed enumeration order.
struct ImageLattice {
    images: Vec<Image>,
    len: usize,
}

impl ImageLattice {
    fn new(room: &RoomSpec, sample_rate: u32) -> Self {
        let fs = sample_rate as f64;
        let direct = (fs * room.source_mic_distance() / SPEED_OF_SOUND).round() as usize;
        let len = direct + (1.5 * room.rt60 * fs).ceil() as usize + 1;
        let r_max = len as f64 * SPEED_OF_SOUND / fs;
        let dims = room.dims();
        let (s, m) = (room.source_pos, room.mic_pos);
        let mut images = Vec::new();

        let nx = (r_max / (2.0 * dims[0])).ceil() as i64 + 1;
        let ny = (r_max / (2.0 * dims[1])).ceil() as i64 + 1;
        let nz = (r_max / (2.0 * dims[2])).ceil() as i64 + 1;
        for lx in -nx..=nx {
            for qx in 0..2i64 {
                let dx = (1 - 2 * qx) as f64 * s[0] - m[0] + 2.0 * lx as f64 * dims[0];
                let ox = (lx - qx).abs() + lx.abs();
                if dx.abs() > r_max {
                    continue;
                }
                for ly in -ny..=ny {
                    for qy in 0..2i64 {
                        let dy = (1 - 2 * qy) as f64 * s[1] - m[1] + 2.0 * ly as f64 * dims[1];
                        let oy = (ly - qy).abs() + ly.abs();
                        let rem = r_max * r_max - dx * dx - dy * dy;
                        if rem < 0.0 {
                            continue;
                        }
                        for lz in -nz..=nz {
                            for qz in 0..2i64 {
                                let dz =
                                    (1 - 2 * qz) as f64 * s[2] - m[2] + 2.0 * lz as f64 * dims[2];
                                if dz * dz > rem {
                                    continue;
                                }
                                let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                                let delay = (fs * dist / SPEED_OF_SOUND).round() as usize;
                                if delay < len {
                                    let order = (ox + oy + (lz - qz).abs() + lz.abs()) as u32;
                                    images.push(Image { delay, order, dist });
                                }
                            }
                        }
                    }
                }
            }
        }
        ImageLattice { images, len }
    }

    /// Expected energy per tap for reflection coefficient `beta`. Random polarity
    /// makes the cross terms vanish, so the energies of coinciding images add.
    fn expected_energy(&self, beta: f64) -> Vec<f64> {
        let max_order = self.images.iter().map(|i| i.order).max().unwrap_or(0) as usize;
        let mut pow = vec![1.0; max_order + 1];
        for n in 1..=max_order {
            pow[n] = pow[n - 1] * beta * beta;
        }
        let mut energy = vec![0.0; self.len];
        for img in &self.images {
            energy[img.delay] += pow[img.order as usize] / (img.dist * img.dist);
        }
        energy
    }
}

/// T20-based reverberation time of a per-tap energy profile, measured after the
/// first nonzero tap as [`schroeder_rt60`] does.
fn energy_rt60(energy: &[f64], sample_rate: u32) -> Option<f64> {
    let end = truncation_point(energy);
    let amplitude: Vec<f64> = energy[..end].iter().map(|e| e.sqrt()).collect();
    schroeder_rt60(&amplitude, sample_rate)
}

/// Length after which less than -60 dB of the total energy remains.
fn truncation_point(energy: &[f64]) -> usize {
    let total: f64 = energy.iter().sum();
    let mut residual = total;
    for (i, e) in energy.iter().enumerate() {
        residual -= e;
        if residual < TRUNCATION_RESIDUAL * total {
            return i + 1;
        }
    }
    energy.len()
}

/// Reflection coefficient whose expected impulse response has the requested RT60.
///
/// Inverting Sabine's formula ignores where the images of a particular room fall in
/// time. Instead the expected Schroeder decay of this room's own image lattice is
/// evaluated. With very absorbent walls a few early reflections dominate and the T20
/// stops growing monotonically with the coefficient, so the largest coefficient that
/// meets `rt60` is bracketed on a coarse grid first and then bisected.
fn calibrate_reflection(lattice: &ImageLattice, rt60: f64, sample_rate: u32) -> f64 {
    let too_long = |beta: f64| match energy_rt60(&lattice.expected_energy(beta), sample_rate) {
        Some(t) => t > rt60,
        None => false,
    };
    const GRID: usize = 50;
    let mut hi = 1.0;
    let mut lo = 0.0;
    for k in (0..GRID).rev() {
        let beta = k as f64 / GRID as f64;
        if !too_long(beta) {
            lo = beta;
            break;
        }
        hi = beta;
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if too_long(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut beta = 0.5 * (lo + hi);
    // Near a cliff the per-reflection jitter alone can flip the fit onto the collapsed
    // side, so step up until a slightly smaller coefficient still decays slowly enough.
    let collapsed = |beta: f64| {
        energy_rt60(
            &lattice.expected_energy((beta - CLIFF_MARGIN).max(0.0)),
            sample_rate,
        )
        .is_none_or(|t| t < CLIFF_FRACTION * rt60)
    };
    while beta < 1.0 - CLIFF_STEP && collapsed(beta) {
        beta += CLIFF_STEP;
    }
    beta
}

const CLIFF_MARGIN: f64 = 0.03;
const CLIFF_STEP: f64 = 0.01;
const CLIFF_FRACTION: f64 = 0.7;

pub fn generate_rir(room: &RoomSpec, sample_rate: u32, rng_seed: u64) -> Result<Rir> {
    room.validate()?;
    generate_rir_with(room, sample_rate, rng_seed, Walls::FromRt60)
}

/// Image-source impulse response of a shoebox room.
///
/// Every image contributes `beta^reflections / distance` at the integer delay
/// `round(fs * distance / c)`, scaled by a seeded random gain `1 ± 10%` and a
/// random sign for reflected paths. The response is cut where the remaining energy drops below
/// -60 dB of the total.
pub fn generate_rir_with(
    room: &RoomSpec,
    sample_rate: u32,
    rng_seed: u64,
    walls: Walls,
) -> Result<Rir> {
    let d0 = room.source_mic_distance();
    ensure!(
        d0 >= COLLOCATED_DISTANCE,
        "source and microphone are {d0:.3} m apart (minimum {COLLOCATED_DISTANCE} m)"
    );
    ensure!(sample_rate > 0, "sample rate must be positive");
    let lattice = ImageLattice::new(room, sample_rate);
    let beta = match walls {
        Walls::FromRt60 => calibrate_reflection(&lattice, room.rt60, sample_rate),
        Walls::Reflection(b) => {
            ensure!(
                (0.0..=1.0).contains(&b),
                "reflection coefficient {b} outside [0, 1]"
            );
            b
        }
    };
    let mut rng = seed::rng(rng_seed);
    let mut taps = vec![0.0; lattice.len];
    for img in &lattice.images {
        let mut amp = if img.order == 0 {
            1.0
        } else {
            beta.powi(img.order as i32)
        };
        if img.order > 0 {
            // Drawn even when the amplitude is zero so the stream does not
            // depend on the wall model.
            amp *= 1.0 + REFLECTION_JITTER * rng.random_range(-1.0..=1.0);
            // Late images pile up several per tap; random polarity keeps their
            // energies additive instead of letting them sum coherently.
            if rng.random::<bool>() {
                amp = -amp;
            }
        }
        taps[img.delay] += amp / img.dist;
    }

    let energy: Vec<f64> = taps.iter().map(|v| v * v).collect();
    taps.truncate(truncation_point(&energy));
    Ok(Rir { taps, sample_rate })
}

/// Linear convolution of `x` with `h`, keeping the first `x.len()` samples.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    if h.len() <= 32 {
        let mut out = vec![0.0; x.len()];
        for (k, &hv) in h.iter().enumerate() {
            if hv != 0.0 {
                for i in k..x.len() {
                    out[i] += hv * x[i - k];
                }
            }
        }
        return out;
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex64> = v.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        b.resize(n, Complex64::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

/// Reverberates `clip`; the result is scaled down only if its peak would exceed 1.
pub fn apply_rir(clip: &AudioClip, rir: &Rir) -> Result<AudioClip> {
    ensure!(
        clip.sample_rate == rir.sample_rate,
        "clip at {} Hz but impulse response at {} Hz",
        clip.sample_rate,
        rir.sample_rate
    );
    let mut y = convolve_truncated(&clip.samples, &rir.taps);
    limit_peak(&mut y, 1.0);
    Ok(clip.with_samples(y))
}

/// Reverberation time from Schroeder backward integration of the response after
/// the direct path, by a line fit to the -5..-25 dB span of the decay curve (T20).
pub fn schroeder_rt60(taps: &[f64], sample_rate: u32) -> Option<f64> {
    let onset = taps.iter().position(|&v| v != 0.0)?;
    let tail = &taps[onset + 1..];
    let mut edc: Vec<f64> = tail.iter().map(|v| v * v).collect();
    for i in (0..edc.len().saturating_sub(1)).rev() {
        edc[i] += edc[i + 1];
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &e) in edc.iter().enumerate() {
        let db = 10.0 * (e / total).log10();
        if db <= -5.0 && db >= -25.0 {
            let t = i as f64 / sample_rate as f64;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
            n += 1.0;
        }
    }
    if n < 2.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}
