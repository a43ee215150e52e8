//! The kernel set used by the encoder and the score head.
//!
//! All kernels are pure functions over borrowed inputs and allocate a fresh
//! output. Convolution and matrix products accumulate in `f32` with a fixed
//! loop order, so repeated calls are bit-identical. Normalization and softmax
//! reduce in `f64` before rounding back to `f32`.
//!
//! Shapes must match exactly; the only broadcasts are the documented bias
//! vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// 2-D convolution, NCHW input and OIHW weight, zero padding.
///
/// `weight` has shape `O × C/groups × KH × KW`; `groups == C` gives a
/// depthwise convolution. Output extents are
/// `(H + 2·pad − KH) / stride + 1` (floor), likewise for W.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    params: Conv2dParams,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    if input.rank() != 4 {
        return Err(Error::dim(OP, "input rank", 4, input.rank()));
    }
    if weight.rank() != 4 {
        return Err(Error::dim(OP, "weight rank", 4, weight.rank()));
    }
    let (n, c, h, w) = dims4(input.shape());
    let (o, wc, kh, kw) = dims4(weight.shape());
    let Conv2dParams {
        stride: (sh, sw),
        padding: (ph, pw),
        groups,
    } = params;
    if sh == 0 || sw == 0 {
        return Err(Error::Config(format!("{OP}: stride must be positive")));
    }
    if groups == 0 {
        return Err(Error::Config(format!("{OP}: groups must be positive")));
    }
    if c % groups != 0 {
        return Err(Error::dim(
            OP,
            "input channels (axis 1)",
            format!("multiple of groups={groups}"),
            c,
        ));
    }
    if o % groups != 0 {
        return Err(Error::dim(
            OP,
            "output channels (weight axis 0)",
            format!("multiple of groups={groups}"),
            o,
        ));
    }
    let ipg = c / groups;
    let opg = o / groups;
    if wc != ipg {
        return Err(Error::dim(OP, "weight input channels (axis 1)", ipg, wc));
    }
    if h + 2 * ph < kh {
        return Err(Error::dim(
            OP,
            "padded height (axis 2)",
            format!(">= kernel height {kh}"),
            h + 2 * ph,
        ));
    }
    if w + 2 * pw < kw {
        return Err(Error::dim(
            OP,
            "padded width (axis 3)",
            format!(">= kernel width {kw}"),
            w + 2 * pw,
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::dim(
                OP,
                "bias",
                format!("[{o}]"),
                format!("{:?}", b.shape()),
            ));
        }
    }

    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; n * o * oh * ow];

    // For each kernel column, the contiguous range of output columns whose
    // receptive field lands inside the unpadded input.
    let col_ranges: Vec<(usize, usize)> = (0..kw).map(|k| valid_range(ow, w, sw, pw, k)).collect();
    let row_ranges: Vec<(usize, usize)> = (0..kh).map(|k| valid_range(oh, h, sh, ph, k)).collect();

    for b in 0..n {
        for g in 0..groups {
            for ocl in 0..opg {
                let oc = g * opg + ocl;
                let plane = &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                if let Some(bias) = bias {
                    plane.fill(bias.data()[oc]);
                }
                for icl in 0..ipg {
                    let ic = g * ipg + icl;
                    let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for ky in 0..kh {
                        let (r0, r1) = row_ranges[ky];
                        for kx in 0..kw {
                            let (c0, c1) = col_ranges[kx];
                            let wv = wt[((oc * ipg + icl) * kh + ky) * kw + kx];
                            for oy in r0..r1 {
                                let iy = oy * sh + ky - ph;
                                let dst = &mut plane[oy * ow..(oy + 1) * ow];
                                let row = &src[iy * w..(iy + 1) * w];
                                for ox in c0..c1 {
                                    dst[ox] += wv * row[ox * sw + kx - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Output indices `[start, end)` for which `i * stride + k - pad` is a valid
/// input index in `0..extent`.
fn valid_range(out: usize, extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let start = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // i * stride + k - pad <= extent - 1
    let limit = extent + pad;
    let end = if limit <= k {
        0
    } else {
        ((limit - k - 1) / stride + 1).min(out)
    };
    (start.min(end), end)
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

/// Fixed-order dot product. Eight interleaved partial sums, combined
/// pairwise at the end; the order never depends on the data.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ac, bc) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y[n, o] = Σ_i x[n, i] · weight[o, i] + bias[o]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "linear";
    if x.rank() != 2 {
        return Err(Error::dim(OP, "input rank", 2, x.rank()));
    }
    if weight.rank() != 2 {
        return Err(Error::dim(OP, "weight rank", 2, weight.rank()));
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let (dout, win) = (weight.shape()[0], weight.shape()[1]);
    if win != din {
        return Err(Error::dim(OP, "inner extent (weight axis 1)", din, win));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::dim(
                OP,
                "bias",
                format!("[{dout}]"),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let mut out = Vec::with_capacity(n * dout);
    for row in x.data().chunks_exact(din) {
        for (oi, wrow) in weight.data().chunks_exact(din).enumerate() {
            let b = bias.map_or(0.0, |b| b.data()[oi]);
            out.push(dot(row, wrow) + b);
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// Layer normalization over the last axis with population variance:
/// `(x − μ) / √(σ² + ε) · γ + β`.
pub fn layer_norm(
    x: &Tensor,
    normalized_extent: usize,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f32,
) -> Result<Tensor> {
    const OP: &str = "layer_norm";
    let last = *x.shape().last().expect("rank >= 1");
    if last != normalized_extent {
        return Err(Error::dim(OP, "last axis", normalized_extent, last));
    }
    if gamma.shape() != [normalized_extent] {
        return Err(Error::dim(
            OP,
            "gamma",
            normalized_extent,
            format!("{:?}", gamma.shape()),
        ));
    }
    if beta.shape() != [normalized_extent] {
        return Err(Error::dim(
            OP,
            "beta",
            normalized_extent,
            format!("{:?}", beta.shape()),
        ));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("{OP}: epsilon must be positive")));
    }
    let mut out = Vec::with_capacity(x.numel());
    let (g, b) = (gamma.data(), beta.data());
    let inv_n = 1.0 / normalized_extent as f64;
    for row in x.data().chunks_exact(normalized_extent) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() * inv_n;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            * inv_n;
        let inv_std = 1.0 / (var + epsilon as f64).sqrt();
        for (i, &v) in row.iter().enumerate() {
            out.push(((v as f64 - mean) * inv_std * g[i] as f64 + b[i] as f64) as f32);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

/// Elementwise activation.
///
/// GELU is the exact form `x · Φ(x) = ½ x (1 + erf(x / √2))`, evaluated in
/// `f64`. The tanh approximation is not used.
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(relu),
        Activation::Gelu => x.map(gelu),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

#[inline]
pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))) as f32
}

/// Logistic function; never overflows `exp`.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    sigmoid_f64(x as f64) as f32
}

#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim(
            "softmax",
            "axis",
            format!("< {}", x.rank()),
            axis,
        ));
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0f32; x.numel()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|j| src[base + j * inner])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = (src[base + j * inner] as f64 - max).exp();
                sum += *slot;
            }
            for (j, &e) in buf.iter().enumerate() {
                out[base + j * inner] = (e / sum) as f32;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Per-head `softmax(q·kᵀ / √Dk + bias) · v`.
///
/// `q`, `k`: `H × L × Dk`; `v`: `H × L × Dv`; optional `bias`: `H × L × L`.
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    const OP: &str = "attention";
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 3 {
            return Err(Error::dim(OP, format!("{name} rank"), 3, t.rank()));
        }
    }
    let (h, l, dk) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if k.shape() != q.shape() {
        return Err(Error::dim(
            OP,
            "k shape",
            format!("{:?}", q.shape()),
            format!("{:?}", k.shape()),
        ));
    }
    if v.shape()[0] != h {
        return Err(Error::dim(OP, "v heads (axis 0)", h, v.shape()[0]));
    }
    if v.shape()[1] != l {
        return Err(Error::dim(OP, "v length (axis 1)", l, v.shape()[1]));
    }
    let dv = v.shape()[2];
    if let Some(b) = bias {
        if b.shape() != [h, l, l] {
            return Err(Error::dim(
                OP,
                "bias",
                format!("[{h}, {l}, {l}]"),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let scale = 1.0 / (dk as f32).sqrt();
    let mut scores = Vec::with_capacity(h * l * l);
    for hd in 0..h {
        let qh = &q.data()[hd * l * dk..(hd + 1) * l * dk];
        let kh = &k.data()[hd * l * dk..(hd + 1) * l * dk];
        for i in 0..l {
            let qi = &qh[i * dk..(i + 1) * dk];
            for j in 0..l {
                let mut s = dot(qi, &kh[j * dk..(j + 1) * dk]) * scale;
                if let Some(b) = bias {
                    s += b.data()[(hd * l + i) * l + j];
                }
                scores.push(s);
            }
        }
    }
    let probs = softmax(&Tensor::new(vec![h, l, l], scores)?, 2)?;
    let p = probs.data();
    let mut out = vec![0.0f32; h * l * dv];
    for hd in 0..h {
        let vh = &v.data()[hd * l * dv..(hd + 1) * l * dv];
        for i in 0..l {
            let dst = &mut out[(hd * l + i) * dv..(hd * l + i + 1) * dv];
            for j in 0..l {
                let pij = p[(hd * l + i) * l + j];
                for (d, &vv) in dst.iter_mut().zip(&vh[j * dv..(j + 1) * dv]) {
                    *d += pij * vv;
                }
            }
        }
    }
    Tensor::new(vec![h, l, dv], out)
}
