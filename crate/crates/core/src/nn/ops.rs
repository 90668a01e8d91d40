use std::rc::Rc;

use rustfft::num_complex::Complex64;

use super::kernels::{self, btc, with_btc_shape, ConvSpec};
use super::{Tensor, Var};
use crate::audio::Stft;

fn col_sum(g: &Tensor, c: usize) -> Tensor {
    let mut out = vec![0.0; c];
    for row in g.data().chunks_exact(c) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    Tensor::new(&[c], out)
}

impl<'g> Var<'g> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.graph.op((*y).clone(), &[self], move |g| {
            let d: Vec<f64> = x
                .data()
                .iter()
                .zip(yc.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                .collect();
            vec![Tensor::new(x.shape(), d)]
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph
            .op(v, &[self, other], |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph
            .op(v, &[self, other], |g| vec![g.clone(), g.scale(-1.0)])
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph.op(v, &[self, other], move |g| {
            vec![g.zip_map(&b, |x, y| x * y), g.zip_map(&a, |x, y| x * y)]
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().scale(c);
        self.graph.op(v, &[self], move |g| vec![g.scale(c)])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.graph.op(v, &[self], |g| vec![g.clone()])
    }

    /// Adds `b [C]` to every row of `self [..., C]`.
    pub fn add_bias(self, b: Var<'g>) -> Var<'g> {
        let (x, bv) = (self.value(), b.value());
        let c = bv.numel();
        assert_eq!(x.last_dim(), c, "bias of {c} for shape {:?}", x.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(o, v)| *o += v);
        }
        let shape = x.shape().to_vec();
        self.graph
            .op(Tensor::new(&shape, out), &[self, b], move |g| {
                vec![g.clone(), col_sum(g, c)]
            })
    }

    /// Multiplies every row of `self [..., C]` by `s [C]`.
    pub fn mul_bias(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        let c = sv.numel();
        assert_eq!(x.last_dim(), c, "scale of {c} for shape {:?}", x.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(sv.data()).for_each(|(o, v)| *o *= v);
        }
        let shape = x.shape().to_vec();
        self.graph
            .op(Tensor::new(&shape, out), &[self, s], move |g| {
                let mut dx = g.data().to_vec();
                for row in dx.chunks_exact_mut(c) {
                    row.iter_mut().zip(sv.data()).for_each(|(o, v)| *o *= v);
                }
                let mut ds = vec![0.0; c];
                for (grow, xrow) in g.data().chunks_exact(c).zip(x.data().chunks_exact(c)) {
                    for j in 0..c {
                        ds[j] += grow[j] * xrow[j];
                    }
                }
                vec![Tensor::new(x.shape(), dx), Tensor::new(&[c], ds)]
            })
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = kernels::matmul(&a, &b);
        self.graph.op(v, &[self, other], move |g| {
            vec![
                kernels::matmul(g, &b.transpose()),
                kernels::matmul(&a.transpose(), g),
            ]
        })
    }

    /// `self [R, in] · w [in, out] + b [out]`.
    pub fn linear(self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        self.matmul(w).add_bias(b)
    }

    pub fn transpose(self) -> Var<'g> {
        let v = self.value().transpose();
        self.graph.op(v, &[self], |g| vec![g.transpose()])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let v = (*x).clone().reshape(shape);
        self.graph
            .op(v, &[self], move |g| vec![g.clone().reshape(&orig)])
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'g> {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.op(Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Tensor::full(&shape, g.item())]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn softmax_last(self) -> Var<'g> {
        let x = self.value();
        let c = x.last_dim();
        let mut y = x.data().to_vec();
        for row in y.chunks_exact_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Rc::new(Tensor::new(x.shape(), y));
        let yc = y.clone();
        self.graph.op((*y).clone(), &[self], move |g| {
            let mut dx = vec![0.0; g.numel()];
            for ((drow, grow), yrow) in dx
                .chunks_exact_mut(c)
                .zip(g.data().chunks_exact(c))
                .zip(yc.data().chunks_exact(c))
            {
                let s = kernels::dot(grow, yrow);
                for j in 0..c {
                    drow[j] = yrow[j] * (grow[j] - s);
                }
            }
            vec![Tensor::new(yc.shape(), dx)]
        })
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize_last(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let c = x.last_dim();
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (xrow, orow)) in x
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .enumerate()
        {
            let mu = xrow.iter().sum::<f64>() / c as f64;
            let var = xrow.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                orow[j] = (xrow[j] - mu) * is;
            }
        }
        let xhat = Rc::new(Tensor::new(x.shape(), xhat));
        let xh = xhat.clone();
        self.graph.op((*xhat).clone(), &[self], move |g| {
            let mut dx = vec![0.0; g.numel()];
            for (r, ((drow, grow), hrow)) in dx
                .chunks_exact_mut(c)
                .zip(g.data().chunks_exact(c))
                .zip(xh.data().chunks_exact(c))
                .enumerate()
            {
                let mg = grow.iter().sum::<f64>() / c as f64;
                let mgh = kernels::dot(grow, hrow) / c as f64;
                for j in 0..c {
                    drow[j] = inv_std[r] * (grow[j] - mg - hrow[j] * mgh);
                }
            }
            vec![Tensor::new(xh.shape(), dx)]
        })
    }

    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
        self.normalize_last(1e-5).mul_bias(gamma).add_bias(beta)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let c = x.last_dim();
        assert!(start + len <= c, "slice {start}+{len} out of {c}");
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let data: Vec<f64> = x
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let full = x.shape().to_vec();
        self.graph.op(Tensor::new(&shape, data), &[self], move |g| {
            let mut dx = vec![0.0; full.iter().product()];
            for (drow, grow) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                drow[start..start + len].copy_from_slice(grow);
            }
            vec![Tensor::new(&full, dx)]
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
        let rows = vals[0].numel() / widths[0];
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = vals[0].shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        graph.op(Tensor::new(&shape, data), parts, move |g| {
            let mut outs: Vec<Vec<f64>> = widths
                .iter()
                .map(|w| Vec::with_capacity(rows * w))
                .collect();
            for grow in g.data().chunks_exact(total) {
                let mut off = 0;
                for (o, &w) in outs.iter_mut().zip(&widths) {
                    o.extend_from_slice(&grow[off..off + w]);
                    off += w;
                }
            }
            outs.into_iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::new(s, d))
                .collect()
        })
    }

    /// Row `i` of a rank-2 tensor, as a vector.
    pub fn select_row(self, i: usize) -> Var<'g> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let v = Tensor::new(&[c], x.row(i).to_vec());
        self.graph.op(v, &[self], move |g| {
            let mut dx = vec![0.0; r * c];
            dx[i * c..(i + 1) * c].copy_from_slice(g.data());
            vec![Tensor::new(&[r, c], dx)]
        })
    }

    /// 1-D convolution over time; `self [B,T,Ci]` or `[T,Ci]`, `w [Co,Ci,K]`.
    pub fn conv1d(self, w: Var<'g>, spec: ConvSpec) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        let v = kernels::conv1d(&x, &wv, spec);
        self.graph.op(v, &[self, w], move |g| {
            let (dx, dw) = kernels::conv1d_backward(&x, &wv, g, spec);
            vec![dx, dw]
        })
    }

    pub fn depthwise_conv1d(self, w: Var<'g>, spec: ConvSpec) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        let v = kernels::depthwise_conv1d(&x, &wv, spec);
        self.graph.op(v, &[self, w], move |g| {
            let (dx, dw) = kernels::depthwise_conv1d_backward(&x, &wv, g, spec);
            vec![dx, dw]
        })
    }

    /// Transposed 1-D convolution; `w [Ci,Co,K]`.
    pub fn conv_transpose1d(self, w: Var<'g>, stride: usize, padding: usize) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        let v = kernels::conv_transpose1d(&x, &wv, stride, padding);
        self.graph.op(v, &[self, w], move |g| {
            let (dx, dw) = kernels::conv_transpose1d_backward(&x, &wv, g, stride, padding);
            vec![dx, dw]
        })
    }

    /// Nearest-neighbour upsampling along time by `factor`.
    pub fn repeat_time(self, factor: usize) -> Var<'g> {
        let x = self.value();
        let (b, t, c) = btc(&x);
        let mut out = Vec::with_capacity(b * t * factor * c);
        for row in x.data().chunks_exact(c) {
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        let v = with_btc_shape(&x, b, t * factor, c, out);
        self.graph.op(v, &[self], move |g| {
            let mut dx = vec![0.0; b * t * c];
            for (r, drow) in dx.chunks_exact_mut(c).enumerate() {
                for f in 0..factor {
                    let gr = &g.data()[(r * factor + f) * c..(r * factor + f + 1) * c];
                    drow.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                }
            }
            vec![with_btc_shape(&x, b, t, c, dx)]
        })
    }

    /// Zero padding along time.
    pub fn pad_time(self, left: usize, right: usize) -> Var<'g> {
        let x = self.value();
        let (b, t, c) = btc(&x);
        let to = t + left + right;
        let mut out = vec![0.0; b * to * c];
        for bb in 0..b {
            out[(bb * to + left) * c..(bb * to + left + t) * c]
                .copy_from_slice(&x.data()[bb * t * c..(bb + 1) * t * c]);
        }
        let v = with_btc_shape(&x, b, to, c, out);
        self.graph.op(v, &[self], move |g| {
            let mut dx = Vec::with_capacity(b * t * c);
            for bb in 0..b {
                dx.extend_from_slice(&g.data()[(bb * to + left) * c..(bb * to + left + t) * c]);
            }
            vec![with_btc_shape(&x, b, t, c, dx)]
        })
    }

    /// `lambda * x / max|x|` over the whole tensor; the max is taken at its first position.
    pub fn max_abs_normalize(self, lambda: f64) -> Var<'g> {
        let x = self.value();
        let (jstar, m) = x
            .data()
            .iter()
            .enumerate()
            .fold(
                (0, 0.0f64),
                |(j, m), (i, v)| if v.abs() > m { (i, v.abs()) } else { (j, m) },
            );
        assert!(m > 0.0, "max_abs_normalize of an all-zero tensor");
        let v = x.scale(lambda / m);
        let sign = x.data()[jstar].signum();
        self.graph.op(v, &[self], move |g| {
            let mut dx = g.scale(lambda / m);
            let gx = kernels::dot(g.data(), x.data());
            dx.data_mut()[jstar] -= lambda * sign * gx / (m * m);
            vec![dx]
        })
    }

    /// One-sided STFT magnitude `[frames, fft/2 + 1]` of a flattened waveform,
    /// `sqrt(max(|X|^2, power_floor))`.
    pub fn stft_magnitude(self, stft: &Stft, power_floor: f64) -> Var<'g> {
        let x = self.value();
        let n = x.numel();
        let spectra = stft.spectrum(x.data());
        let bins = stft.num_bins();
        let frames = spectra.len();
        let mut mags = Vec::with_capacity(frames * bins);
        for s in &spectra {
            for c in &s[..bins] {
                mags.push(c.norm_sqr().max(power_floor).sqrt());
            }
        }
        let stft = stft.clone();
        let shape = x.shape().to_vec();
        self.graph
            .op(Tensor::new(&[frames, bins], mags), &[self], move |g| {
                let size = stft.fft_size();
                let fft = stft.fft().clone();
                let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
                let mut dx = vec![0.0; n];
                let mut z = vec![Complex64::new(0.0, 0.0); size];
                for (f, spec) in spectra.iter().enumerate() {
                    z.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                    for k in 0..bins {
                        let p = spec[k].norm_sqr();
                        if p > power_floor {
                            z[k] = spec[k].conj() * (g.data()[f * bins + k] / p.sqrt());
                        }
                    }
                    fft.process_with_scratch(&mut z, &mut scratch);
                    for (i, zi) in z.iter().enumerate() {
                        if let Some(pos) = stft.source_index(f, i, n) {
                            dx[pos] += stft.window()[i] * zi.re;
                        }
                    }
                }
                vec![Tensor::new(&shape, dx)]
            })
    }
}
