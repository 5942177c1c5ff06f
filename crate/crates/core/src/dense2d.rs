//! Dense 2D convolution and transposed convolution for the fusion network.
//!
//! Maps are `c x h x w` arrays. Two padding regimes are used by the
//! pipeline: "same" (stride 1, odd kernel) for the fusion stack, and
//! "valid" strided convolutions for down/upsampling between pyramid levels.

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use thiserror::Error;

use crate::scalar::Real;
use crate::sparse_ops::ActivationKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad2d {
    Valid,
    Same,
}

/// Weights for [`conv2d`]: `w` has shape (c_out, c_in, kh, kw).
/// For [`deconv2d`] the first two axes read (c_in, c_out) instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dWeights<T: Real> {
    pub w: Array4<T>,
    pub b: Array1<T>,
}

impl<T: Real> Conv2dWeights<T> {
    pub fn zeros(d0: usize, d1: usize, kh: usize, kw: usize) -> Self {
        Conv2dWeights {
            w: Array4::zeros((d0, d1, kh, kw)),
            b: Array1::zeros(d0),
        }
    }

    pub fn random<R: Rng>(d0: usize, d1: usize, kh: usize, kw: usize, scale: f64, rng: &mut R) -> Self {
        let mut w = Array4::zeros((d0, d1, kh, kw));
        for v in w.iter_mut() {
            *v = T::from_f64_lossy(rng.gen_range(-scale..scale));
        }
        Conv2dWeights {
            w,
            b: Array1::zeros(d0),
        }
    }

    /// Bias length must match the output-channel axis; for deconv weights
    /// that is axis 1, so callers resize it explicitly.
    pub fn with_bias_len(mut self, n: usize) -> Self {
        self.b = Array1::zeros(n);
        self
    }
}

#[derive(Debug, Error)]
pub enum Dense2dError {
    #[error("channel mismatch: input has {got}, weights expect {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("same-padding requires stride 1 and odd kernel, got k=({0},{1}) s={2}")]
    BadSameGeometry(usize, usize, usize),
    #[error("(d - k) not divisible by stride: d={d}, k={k}, s={s}")]
    NotDivisible { d: usize, k: usize, s: usize },
}

/// Dense 2D convolution. Returns (activated output, pre-activation).
pub fn conv2d<T: Real>(
    input: &Array3<T>,
    w: &Conv2dWeights<T>,
    stride: usize,
    pad: Pad2d,
    act: ActivationKind,
) -> Result<(Array3<T>, Array3<T>), Dense2dError> {
    let (c_in, h, wd) = input.dim();
    let (c_out, wc_in, kh, kw) = w.w.dim();
    if c_in != wc_in {
        return Err(Dense2dError::ChannelMismatch {
            got: c_in,
            expected: wc_in,
        });
    }
    let (oh, ow, ph, pw) = match pad {
        Pad2d::Same => {
            if stride != 1 || kh % 2 == 0 || kw % 2 == 0 {
                return Err(Dense2dError::BadSameGeometry(kh, kw, stride));
            }
            (h, wd, (kh - 1) / 2, (kw - 1) / 2)
        }
        Pad2d::Valid => {
            if (h - kh) % stride != 0 {
                return Err(Dense2dError::NotDivisible {
                    d: h,
                    k: kh,
                    s: stride,
                });
            }
            if (wd - kw) % stride != 0 {
                return Err(Dense2dError::NotDivisible {
                    d: wd,
                    k: kw,
                    s: stride,
                });
            }
            ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
        }
    };
    let mut pre: Array3<T> = Array3::zeros((c_out, oh, ow));
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = w.b[co];
                for i in 0..kh {
                    for j in 0..kw {
                        let py = (oy * stride + i) as i64 - ph as i64;
                        let px = (ox * stride + j) as i64 - pw as i64;
                        if py < 0 || px < 0 || py >= h as i64 || px >= wd as i64 {
                            continue;
                        }
                        for ci in 0..c_in {
                            acc += input[(ci, py as usize, px as usize)] * w.w[(co, ci, i, j)];
                        }
                    }
                }
                pre[(co, oy, ox)] = acc;
            }
        }
    }
    let mut out = pre.clone();
    if act == ActivationKind::ReLU {
        out.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    }
    Ok((out, pre))
}

/// Gradients for [`conv2d`]. `grad_out` matches the output map; the ReLU
/// mask comes from the stored pre-activation.
pub fn conv2d_backward<T: Real>(
    input: &Array3<T>,
    w: &Conv2dWeights<T>,
    stride: usize,
    pad: Pad2d,
    act: ActivationKind,
    preact: &Array3<T>,
    grad_out: &Array3<T>,
) -> (Conv2dWeights<T>, Array3<T>) {
    let (c_in, h, wd) = input.dim();
    let (c_out, _, kh, kw) = w.w.dim();
    let (_, oh, ow) = grad_out.dim();
    let (ph, pw) = match pad {
        Pad2d::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Pad2d::Valid => (0, 0),
    };
    let mut d_pre = grad_out.clone();
    if act == ActivationKind::ReLU {
        for (d, &p) in d_pre.iter_mut().zip(preact.iter()) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
    }
    let mut gw = Conv2dWeights::zeros(c_out, c_in, kh, kw);
    let mut gi: Array3<T> = Array3::zeros(input.dim());
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_pre[(co, oy, ox)];
                if g == T::zero() {
                    continue;
                }
                gw.b[co] += g;
                for i in 0..kh {
                    for j in 0..kw {
                        let py = (oy * stride + i) as i64 - ph as i64;
                        let px = (ox * stride + j) as i64 - pw as i64;
                        if py < 0 || px < 0 || py >= h as i64 || px >= wd as i64 {
                            continue;
                        }
                        for ci in 0..c_in {
                            gw.w[(co, ci, i, j)] += input[(ci, py as usize, px as usize)] * g;
                            gi[(ci, py as usize, px as usize)] += w.w[(co, ci, i, j)] * g;
                        }
                    }
                }
            }
        }
    }
    (gw, gi)
}

/// Dense 2D transposed convolution; output dims (d-1)*s + k. Weight layout
/// (c_in, c_out, kh, kw); bias has length c_out.
pub fn deconv2d<T: Real>(
    input: &Array3<T>,
    w: &Conv2dWeights<T>,
    stride: usize,
    act: ActivationKind,
) -> Result<(Array3<T>, Array3<T>), Dense2dError> {
    let (c_in, h, wd) = input.dim();
    let (wc_in, c_out, kh, kw) = w.w.dim();
    if c_in != wc_in {
        return Err(Dense2dError::ChannelMismatch {
            got: c_in,
            expected: wc_in,
        });
    }
    let oh = (h - 1) * stride + kh;
    let ow = (wd - 1) * stride + kw;
    let mut pre: Array3<T> = Array3::zeros((c_out, oh, ow));
    for py in 0..h {
        for px in 0..wd {
            for i in 0..kh {
                for j in 0..kw {
                    let qy = py * stride + i;
                    let qx = px * stride + j;
                    for co in 0..c_out {
                        let mut acc = T::zero();
                        for ci in 0..c_in {
                            acc += input[(ci, py, px)] * w.w[(ci, co, i, j)];
                        }
                        pre[(co, qy, qx)] += acc;
                    }
                }
            }
        }
    }
    for co in 0..c_out {
        for qy in 0..oh {
            for qx in 0..ow {
                pre[(co, qy, qx)] += w.b[co];
            }
        }
    }
    let mut out = pre.clone();
    if act == ActivationKind::ReLU {
        out.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    }
    Ok((out, pre))
}

/// Gradients for [`deconv2d`].
pub fn deconv2d_backward<T: Real>(
    input: &Array3<T>,
    w: &Conv2dWeights<T>,
    stride: usize,
    act: ActivationKind,
    preact: &Array3<T>,
    grad_out: &Array3<T>,
) -> (Conv2dWeights<T>, Array3<T>) {
    let (c_in, h, wd) = input.dim();
    let (_, c_out, kh, kw) = w.w.dim();
    let mut d_pre = grad_out.clone();
    if act == ActivationKind::ReLU {
        for (d, &p) in d_pre.iter_mut().zip(preact.iter()) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
    }
    let mut gw = Conv2dWeights::zeros(c_in, c_out, kh, kw).with_bias_len(c_out);
    let mut gi: Array3<T> = Array3::zeros(input.dim());
    for (co, gb) in gw.b.iter_mut().enumerate() {
        for qy in 0..d_pre.dim().1 {
            for qx in 0..d_pre.dim().2 {
                *gb += d_pre[(co, qy, qx)];
            }
        }
    }
    for py in 0..h {
        for px in 0..wd {
            for i in 0..kh {
                for j in 0..kw {
                    let qy = py * stride + i;
                    let qx = px * stride + j;
                    for co in 0..c_out {
                        let g = d_pre[(co, qy, qx)];
                        if g == T::zero() {
                            continue;
                        }
                        for ci in 0..c_in {
                            gw.w[(ci, co, i, j)] += input[(ci, py, px)] * g;
                            gi[(ci, py, px)] += w.w[(ci, co, i, j)] * g;
                        }
                    }
                }
            }
        }
    }
    (gw, gi)
}
