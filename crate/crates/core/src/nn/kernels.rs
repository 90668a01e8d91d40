//! Forward/backward kernels on `[batch, time, channels]` layouts.

use super::Tensor;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(a, b)| *a += alpha * b);
}

/// Views a rank-2 `[T, C]` or rank-3 `[B, T, C]` tensor as `(B, T, C)`.
pub(crate) fn btc(t: &Tensor) -> (usize, usize, usize) {
    match *t.shape() {
        [tl, c] => (1, tl, c),
        [b, tl, c] => (b, tl, c),
        ref s => panic!("expected rank-2 or rank-3 tensor, got {s:?}"),
    }
}

pub(crate) fn with_btc_shape(
    like: &Tensor,
    b: usize,
    t: usize,
    c: usize,
    data: Vec<f64>,
) -> Tensor {
    if like.rank() == 2 {
        Tensor::new(&[t, c], data)
    } else {
        Tensor::new(&[b, t, c], data)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k) = (a.rows(), a.cols());
    let (k2, c) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(orow, av, &bd[kk * c..(kk + 1) * c]);
            }
        }
    }
    Tensor::new(&[r, c], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    /// Stride 1, "same" length for odd kernels.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        ConvSpec {
            stride: 1,
            dilation,
            pad_left: total / 2,
            pad_right: total - total / 2,
        }
    }

    pub fn out_len(&self, t: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = t + self.pad_left + self.pad_right;
        assert!(
            padded >= span,
            "input of length {t} shorter than receptive field {span}"
        );
        (padded - span) / self.stride + 1
    }

    #[inline]
    fn input_index(&self, to: usize, k: usize, t: usize) -> Option<usize> {
        let ti = (to * self.stride + k * self.dilation) as isize - self.pad_left as isize;
        (ti >= 0 && (ti as usize) < t).then_some(ti as usize)
    }
}

/// `x [B,T,Ci]`, `w [Co,Ci,K]` -> `[B,To,Co]`.
pub fn conv1d(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
    let (b, t, ci) = btc(x);
    let (co, ci2, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, ci2, "conv1d channel mismatch: input {ci}, weight {ci2}");
    let to = spec.out_len(t, k);
    let wd = w.data();
    let mut wk = vec![0.0; k * co * ci];
    for o in 0..co {
        for i in 0..ci {
            for kk in 0..k {
                wk[(kk * co + o) * ci + i] = wd[(o * ci + i) * k + kk];
            }
        }
    }
    let xd = x.data();
    let mut out = vec![0.0; b * to * co];
    for bb in 0..b {
        for tt in 0..to {
            let orow = &mut out[(bb * to + tt) * co..(bb * to + tt + 1) * co];
            for kk in 0..k {
                if let Some(ti) = spec.input_index(tt, kk, t) {
                    let xrow = &xd[(bb * t + ti) * ci..(bb * t + ti + 1) * ci];
                    for (o, ov) in orow.iter_mut().enumerate() {
                        *ov += dot(&wk[(kk * co + o) * ci..(kk * co + o + 1) * ci], xrow);
                    }
                }
            }
        }
    }
    with_btc_shape(x, b, to, co, out)
}

pub fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor, spec: ConvSpec) -> (Tensor, Tensor) {
    let (b, t, ci) = btc(x);
    let (co, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let to = spec.out_len(t, k);
    let wd = w.data();
    let mut wkt = vec![0.0; k * ci * co];
    for o in 0..co {
        for i in 0..ci {
            for kk in 0..k {
                wkt[(kk * ci + i) * co + o] = wd[(o * ci + i) * k + kk];
            }
        }
    }
    let (xd, gd) = (x.data(), g.data());
    let mut dx = vec![0.0; b * t * ci];
    let mut dwk = vec![0.0; k * co * ci];
    for bb in 0..b {
        for tt in 0..to {
            let grow = &gd[(bb * to + tt) * co..(bb * to + tt + 1) * co];
            for kk in 0..k {
                if let Some(ti) = spec.input_index(tt, kk, t) {
                    let base = (bb * t + ti) * ci;
                    let xrow = &xd[base..base + ci];
                    let dxrow = &mut dx[base..base + ci];
                    for (i, dv) in dxrow.iter_mut().enumerate() {
                        *dv += dot(grow, &wkt[(kk * ci + i) * co..(kk * ci + i + 1) * co]);
                    }
                    for (o, &gv) in grow.iter().enumerate() {
                        if gv != 0.0 {
                            axpy(
                                &mut dwk[(kk * co + o) * ci..(kk * co + o + 1) * ci],
                                gv,
                                xrow,
                            );
                        }
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; co * ci * k];
    for o in 0..co {
        for i in 0..ci {
            for kk in 0..k {
                dw[(o * ci + i) * k + kk] = dwk[(kk * co + o) * ci + i];
            }
        }
    }
    (with_btc_shape(x, b, t, ci, dx), Tensor::new(w.shape(), dw))
}

/// Per-channel convolution, `x [B,T,C]`, `w [C,K]`, stride 1.
pub fn depthwise_conv1d(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
    assert_eq!(spec.stride, 1, "depthwise conv supports stride 1 only");
    let (b, t, c) = btc(x);
    let (c2, k) = (w.shape()[0], w.shape()[1]);
    assert_eq!(c, c2, "depthwise channel mismatch");
    let to = spec.out_len(t, k);
    let wt = w.transpose();
    let (xd, wd) = (x.data(), wt.data());
    let mut out = vec![0.0; b * to * c];
    for bb in 0..b {
        for tt in 0..to {
            let orow = &mut out[(bb * to + tt) * c..(bb * to + tt + 1) * c];
            for kk in 0..k {
                if let Some(ti) = spec.input_index(tt, kk, t) {
                    let xrow = &xd[(bb * t + ti) * c..(bb * t + ti + 1) * c];
                    let wrow = &wd[kk * c..(kk + 1) * c];
                    for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    with_btc_shape(x, b, to, c, out)
}

pub fn depthwise_conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    spec: ConvSpec,
) -> (Tensor, Tensor) {
    let (b, t, c) = btc(x);
    let k = w.shape()[1];
    let to = spec.out_len(t, k);
    let wt = w.transpose();
    let (xd, wd, gd) = (x.data(), wt.data(), g.data());
    let mut dx = vec![0.0; b * t * c];
    let mut dwt = vec![0.0; k * c];
    for bb in 0..b {
        for tt in 0..to {
            let grow = &gd[(bb * to + tt) * c..(bb * to + tt + 1) * c];
            for kk in 0..k {
                if let Some(ti) = spec.input_index(tt, kk, t) {
                    let base = (bb * t + ti) * c;
                    for ch in 0..c {
                        dx[base + ch] += grow[ch] * wd[kk * c + ch];
                        dwt[kk * c + ch] += grow[ch] * xd[base + ch];
                    }
                }
            }
        }
    }
    (
        with_btc_shape(x, b, t, c, dx),
        Tensor::new(&[k, c], dwt).transpose(),
    )
}

/// `x [B,T,Ci]`, `w [Ci,Co,K]` -> `[B, (T-1)*stride - 2*padding + K, Co]`.
pub fn conv_transpose1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (b, t, ci) = btc(x);
    let (ci2, co, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, ci2, "conv_transpose1d channel mismatch");
    let full = (t - 1) * stride + k;
    assert!(full > 2 * padding, "transposed conv output would be empty");
    let to = full - 2 * padding;
    let wk = transposed_weight_layout(w);
    let xd = x.data();
    let mut out = vec![0.0; b * to * co];
    for bb in 0..b {
        for tt in 0..t {
            let xrow = &xd[(bb * t + tt) * ci..(bb * t + tt + 1) * ci];
            for kk in 0..k {
                let pos = (tt * stride + kk) as isize - padding as isize;
                if pos < 0 || pos as usize >= to {
                    continue;
                }
                let p = pos as usize;
                let orow = &mut out[(bb * to + p) * co..(bb * to + p + 1) * co];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv != 0.0 {
                        axpy(orow, xv, &wk[(kk * ci + i) * co..(kk * ci + i + 1) * co]);
                    }
                }
            }
        }
    }
    with_btc_shape(x, b, to, co, out)
}

// [Ci,Co,K] -> [K][Ci][Co]
fn transposed_weight_layout(w: &Tensor) -> Vec<f64> {
    let (ci, co, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let wd = w.data();
    let mut wk = vec![0.0; k * ci * co];
    for i in 0..ci {
        for o in 0..co {
            for kk in 0..k {
                wk[(kk * ci + i) * co + o] = wd[(i * co + o) * k + kk];
            }
        }
    }
    wk
}

pub fn conv_transpose1d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor) {
    let (b, t, ci) = btc(x);
    let (_, co, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let to = (t - 1) * stride + k - 2 * padding;
    let wk = transposed_weight_layout(w);
    let (xd, gd) = (x.data(), g.data());
    let mut dx = vec![0.0; b * t * ci];
    let mut dwk = vec![0.0; k * ci * co];
    for bb in 0..b {
        for tt in 0..t {
            let base = (bb * t + tt) * ci;
            for kk in 0..k {
                let pos = (tt * stride + kk) as isize - padding as isize;
                if pos < 0 || pos as usize >= to {
                    continue;
                }
                let p = pos as usize;
                let grow = &gd[(bb * to + p) * co..(bb * to + p + 1) * co];
                for i in 0..ci {
                    let wrow = (kk * ci + i) * co;
                    dx[base + i] += dot(grow, &wk[wrow..wrow + co]);
                    let xv = xd[base + i];
                    if xv != 0.0 {
                        axpy(&mut dwk[wrow..wrow + co], xv, grow);
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; ci * co * k];
    for i in 0..ci {
        for o in 0..co {
            for kk in 0..k {
                dw[(i * co + o) * k + kk] = dwk[(kk * ci + i) * co + o];
            }
        }
    }
    (with_btc_shape(x, b, t, ci, dx), Tensor::new(w.shape(), dw))
}
