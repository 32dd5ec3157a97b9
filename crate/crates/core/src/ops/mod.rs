//! Differentiable primitives.
//!
//! Every primitive has a plain forward kernel and a `*_dual` constructor that
//! returns the output together with its analytic backward pass. The tape in
//! [`graph`] records dual results; [`gradcheck`] validates them against
//! central finite differences.

pub mod gradcheck;
pub mod graph;

use rand::Rng;

use crate::cidc::MaskMatrix;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::tensor::Tensor;

pub type BackwardFn = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

/// Output of a primitive plus the map from upstream gradient to input gradients.
pub struct DualResult {
    pub output: Tensor,
    backward: BackwardFn,
}

impl DualResult {
    pub fn new(output: Tensor, backward: BackwardFn) -> Self {
        Self { output, backward }
    }

    /// Gradients for each differentiable input, in argument order.
    pub fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        if upstream.shape() != self.output.shape() {
            return dim_err(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                self.output.shape()
            ));
        }
        (self.backward)(upstream)
    }
}

// ---------------------------------------------------------------------------
// masked softmax

/// Row-wise softmax over the unmasked entries; masked entries are exactly 0.
///
/// Masked logits are excluded from the normalizer rather than offset by an
/// infinite penalty, so no non-finite value is ever produced.
pub fn masked_softmax_rows(logits: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
    let [rows, cols] = logits.dims2()?;
    if (rows, cols) != (mask.rows(), mask.cols()) {
        return dim_err(format!(
            "logits {rows}x{cols} vs mask {}x{}",
            mask.rows(),
            mask.cols()
        ));
    }
    let mut out = vec![0.0; rows * cols];
    softmax_rows_into(logits.data(), mask, &mut out)?;
    Tensor::from_vec(&[rows, cols], out)
}

pub(crate) fn softmax_rows_into(logits: &[f64], mask: &MaskMatrix, out: &mut [f64]) -> Result<()> {
    let cols = mask.cols();
    for r in 0..mask.rows() {
        let row = &logits[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut peak = f64::NEG_INFINITY;
        for (s, &v) in row.iter().enumerate() {
            if !mask.is_masked(r, s) {
                peak = peak.max(v);
            }
        }
        if peak == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask {
                row: r,
                rows: mask.rows(),
                cols,
            });
        }
        let mut total = 0.0;
        for (s, &v) in row.iter().enumerate() {
            dst[s] = if mask.is_masked(r, s) {
                0.0
            } else {
                let e = (v - peak).exp();
                total += e;
                e
            };
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Ok(())
}

/// Backward of a row softmax given its output `s`; masked entries have s = 0
/// and therefore receive zero gradient.
pub(crate) fn softmax_rows_backward(s: &[f64], grad: &[f64], cols: usize, out: &mut [f64]) {
    for ((s, g), o) in s
        .chunks(cols)
        .zip(grad.chunks(cols))
        .zip(out.chunks_mut(cols))
    {
        let inner: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &sv), &gv) in o.iter_mut().zip(s).zip(g) {
            *o = sv * (gv - inner);
        }
    }
}

pub fn masked_softmax_rows_dual(logits: &Tensor, mask: &MaskMatrix) -> Result<DualResult> {
    let out = masked_softmax_rows(logits, mask)?;
    let s = out.clone();
    let cols = mask.cols();
    Ok(DualResult::new(
        out,
        Box::new(move |g| {
            let mut gx = Tensor::zeros_like(&s);
            softmax_rows_backward(s.data(), g.data(), cols, gx.data_mut());
            Ok(vec![gx])
        }),
    ))
}

// ---------------------------------------------------------------------------
// pointwise (1x1x1) convolution

fn check_pointwise(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<([usize; 4], usize)> {
    let dims = x.dims4()?;
    let [c_out, c_in] = w.dims2()?;
    if c_in != dims[0] {
        return dim_err(format!(
            "pointwise weights expect {c_in} input channels, input has {}",
            dims[0]
        ));
    }
    if b.shape() != [c_out] {
        return dim_err(format!("bias {:?} for {c_out} output channels", b.shape()));
    }
    Ok((dims, c_out))
}

/// `out[o,t,w,h] = bias[o] + sum_i weights[o,i] * x[i,t,w,h]`.
pub fn pointwise_conv(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ([c_in, t, w, h], c_out) = check_pointwise(x, weights, bias)?;
    let plane = t * w * h;
    let mut out = vec![0.0; c_out * plane];
    let (xd, wd) = (x.data(), weights.data());
    for (o, dst) in out.chunks_mut(plane).enumerate() {
        dst.fill(bias.data()[o]);
        for i in 0..c_in {
            let wv = wd[o * c_in + i];
            if wv == 0.0 {
                continue;
            }
            for (d, &s) in dst.iter_mut().zip(&xd[i * plane..(i + 1) * plane]) {
                *d += wv * s;
            }
        }
    }
    Tensor::from_vec(&[c_out, t, w, h], out)
}

pub fn pointwise_conv_dual(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<DualResult> {
    let out = pointwise_conv(x, weights, bias)?;
    let (x, weights) = (x.clone(), weights.clone());
    Ok(DualResult::new(
        out,
        Box::new(move |g| {
            let [c_in, t, w, h] = x.dims4()?;
            let c_out = weights.shape()[0];
            let plane = t * w * h;
            let (xd, wd, gd) = (x.data(), weights.data(), g.data());
            let mut gx = vec![0.0; c_in * plane];
            let mut gw = vec![0.0; c_out * c_in];
            let mut gb = vec![0.0; c_out];
            for o in 0..c_out {
                let go = &gd[o * plane..(o + 1) * plane];
                gb[o] = go.iter().sum();
                for i in 0..c_in {
                    let xi = &xd[i * plane..(i + 1) * plane];
                    gw[o * c_in + i] = go.iter().zip(xi).map(|(a, b)| a * b).sum();
                    let wv = wd[o * c_in + i];
                    for (d, &s) in gx[i * plane..(i + 1) * plane].iter_mut().zip(go) {
                        *d += wv * s;
                    }
                }
            }
            Ok(vec![
                Tensor::from_vec(&[c_in, t, w, h], gx)?,
                Tensor::from_vec(&[c_out, c_in], gw)?,
                Tensor::from_vec(&[c_out], gb)?,
            ])
        }),
    ))
}

// ---------------------------------------------------------------------------
// 3x3 spatial convolution, zero padding 1, applied independently per frame

struct Conv3x3Geom {
    c_in: usize,
    c_out: usize,
    t: usize,
    w: usize,
    h: usize,
    wo: usize,
    ho: usize,
    stride: usize,
}

impl Conv3x3Geom {
    fn new(x: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<Self> {
        let [c_in, t, w, h] = x.dims4()?;
        let c_out = match weights.shape() {
            &[o, i, 3, 3] if i == c_in => o,
            s => {
                return dim_err(format!(
                    "3x3 weights {s:?} incompatible with {c_in} input channels"
                ))
            }
        };
        if bias.shape() != [c_out] {
            return dim_err(format!(
                "bias {:?} for {c_out} output channels",
                bias.shape()
            ));
        }
        if w < 3 || h < 3 {
            return dim_err(format!("spatial extent {w}x{h} below 3"));
        }
        if stride == 0 {
            return arg_err("stride must be positive");
        }
        Ok(Self {
            c_in,
            c_out,
            t,
            w,
            h,
            wo: w.div_ceil(stride),
            ho: h.div_ceil(stride),
            stride,
        })
    }

    /// Output positions `p` for which input index `p*stride + k - 1` is in `0..n`.
    fn valid(&self, k: usize, n: usize, n_out: usize) -> std::ops::Range<usize> {
        let lo = usize::from(k == 0);
        // p*stride + k - 1 <= n - 1  =>  p <= (n - k) / stride; n >= 3 > k
        let hi = ((n - k) / self.stride + 1).min(n_out);
        lo..hi.max(lo)
    }

    /// Rows of the patch matrix: one per (input channel, kw, kh).
    fn patch_rows(&self) -> usize {
        self.c_in * 9
    }

    /// Patch matrix of frame `t`: `(C_in*9) x (W_out*H_out)`, zero where the
    /// window hangs over the border.
    fn im2col(&self, x: &[f64], t: usize, patches: &mut [f64]) {
        let cols = self.wo * self.ho;
        patches.fill(0.0);
        for i in 0..self.c_in {
            let src = &x[(i * self.t + t) * self.w * self.h..][..self.w * self.h];
            for kw in 0..3 {
                for kh in 0..3 {
                    let dst = &mut patches[((i * 3 + kw) * 3 + kh) * cols..][..cols];
                    let qs = self.valid(kh, self.h, self.ho);
                    for p in self.valid(kw, self.w, self.wo) {
                        let row = &src[(p * self.stride + kw - 1) * self.h..][..self.h];
                        for q in qs.clone() {
                            dst[p * self.ho + q] = row[q * self.stride + kh - 1];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`], accumulating into frame `t` of `gx`.
    fn col2im(&self, patches: &[f64], t: usize, gx: &mut [f64]) {
        let cols = self.wo * self.ho;
        for i in 0..self.c_in {
            let dst = &mut gx[(i * self.t + t) * self.w * self.h..][..self.w * self.h];
            for kw in 0..3 {
                for kh in 0..3 {
                    let src = &patches[((i * 3 + kw) * 3 + kh) * cols..][..cols];
                    let qs = self.valid(kh, self.h, self.ho);
                    for p in self.valid(kw, self.w, self.wo) {
                        let row = &mut dst[(p * self.stride + kw - 1) * self.h..][..self.h];
                        for q in qs.clone() {
                            row[q * self.stride + kh - 1] += src[p * self.ho + q];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward pass; also returns every frame's patch matrix for reuse in backward.
fn conv3x3_forward(
    g: &Conv3x3Geom,
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let cols = g.wo * g.ho;
    let rows = g.patch_rows();
    let mut patches = vec![0.0; g.t * rows * cols];
    let mut out = vec![0.0; g.c_out * g.t * cols];
    let wd = weights.data();
    for t in 0..g.t {
        let pt = &mut patches[t * rows * cols..][..rows * cols];
        g.im2col(x.data(), t, pt);
        for o in 0..g.c_out {
            let dst = &mut out[(o * g.t + t) * cols..][..cols];
            dst.fill(bias.data()[o]);
            for (r, prow) in pt.chunks(cols).enumerate() {
                let wv = wd[o * rows + r];
                if wv != 0.0 {
                    axpy(wv, prow, dst);
                }
            }
        }
    }
    (out, patches)
}

/// Per-frame 2-D cross-correlation with a 3x3 kernel and zero padding of 1.
pub fn spatial_conv3x3(
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let g = Conv3x3Geom::new(x, weights, bias, stride)?;
    let (out, _) = conv3x3_forward(&g, x, weights, bias);
    Tensor::from_vec(&[g.c_out, g.t, g.wo, g.ho], out)
}

pub fn spatial_conv3x3_dual(
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<DualResult> {
    let g = Conv3x3Geom::new(x, weights, bias, stride)?;
    let (out, patches) = conv3x3_forward(&g, x, weights, bias);
    let out = Tensor::from_vec(&[g.c_out, g.t, g.wo, g.ho], out)?;
    let (x_shape, weights) = (x.shape().to_vec(), weights.clone());
    Ok(DualResult::new(
        out,
        Box::new(move |grad| {
            let cols = g.wo * g.ho;
            let rows = g.patch_rows();
            let (wd, gd) = (weights.data(), grad.data());
            let mut gx = vec![0.0; x_shape.iter().product()];
            let mut gw = vec![0.0; weights.len()];
            let mut gb = vec![0.0; g.c_out];
            let mut gpatch = vec![0.0; rows * cols];
            for t in 0..g.t {
                let pt = &patches[t * rows * cols..][..rows * cols];
                gpatch.fill(0.0);
                for o in 0..g.c_out {
                    let go = &gd[(o * g.t + t) * cols..][..cols];
                    gb[o] += go.iter().sum::<f64>();
                    for (r, (prow, grow)) in
                        pt.chunks(cols).zip(gpatch.chunks_mut(cols)).enumerate()
                    {
                        gw[o * rows + r] += dot(go, prow);
                        axpy(wd[o * rows + r], go, grow);
                    }
                }
                g.col2im(&gpatch, t, &mut gx);
            }
            Ok(vec![
                Tensor::from_vec(&x_shape, gx)?,
                Tensor::from_vec(weights.shape(), gw)?,
                Tensor::from_vec(&[g.c_out], gb)?,
            ])
        }),
    ))
}

// ---------------------------------------------------------------------------
// elementwise and pooling

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_dual(x: &Tensor) -> DualResult {
    let out = relu(x);
    let y = out.clone();
    DualResult::new(
        out,
        Box::new(move |g| {
            Ok(vec![
                g.zip_map(&y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })?
            ])
        }),
    )
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Windows of `factor` along one axis, ceil mode (last window may be partial).
fn pool_windows(n: usize, factor: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(factor)).map(move |p| p * factor..((p + 1) * factor).min(n))
}

/// Spatial average pooling with a `factor x factor` window, ceil mode.
///
/// A partial window at the border averages only the pixels it covers.
pub fn avg_pool_spatial(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [c, t, w, h] = x.dims4()?;
    if factor == 0 {
        return arg_err("pooling factor must be positive");
    }
    let (wo, ho) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut out = Vec::with_capacity(c * t * wo * ho);
    for src in x.data().chunks(w * h) {
        for pw in pool_windows(w, factor) {
            for ph in pool_windows(h, factor) {
                let n = (pw.len() * ph.len()) as f64;
                let s: f64 = pw
                    .clone()
                    .map(|i| src[i * h + ph.start..i * h + ph.end].iter().sum::<f64>())
                    .sum();
                out.push(s / n);
            }
        }
    }
    Tensor::from_vec(&[c, t, wo, ho], out)
}

pub fn avg_pool_spatial_dual(x: &Tensor, factor: usize) -> Result<DualResult> {
    let out = avg_pool_spatial(x, factor)?;
    let [c, t, w, h] = x.dims4()?;
    Ok(DualResult::new(
        out,
        Box::new(move |g| {
            let mut gx = vec![0.0; c * t * w * h];
            let mut gi = g.data().iter();
            for dst in gx.chunks_mut(w * h) {
                for pw in pool_windows(w, factor) {
                    for ph in pool_windows(h, factor) {
                        let v = gi.next().copied().unwrap_or(0.0) / (pw.len() * ph.len()) as f64;
                        for i in pw.clone() {
                            for d in &mut dst[i * h + ph.start..i * h + ph.end] {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Ok(vec![Tensor::from_vec(&[c, t, w, h], gx)?])
        }),
    ))
}

/// Average of adjacent groups of `factor` frames along the temporal axis (ceil mode).
pub fn temporal_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [c, t, w, h] = x.dims4()?;
    if factor == 0 {
        return arg_err("temporal factor must be positive");
    }
    let plane = w * h;
    let to = t.div_ceil(factor);
    let mut out = vec![0.0; c * to * plane];
    for ch in 0..c {
        for (p, win) in pool_windows(t, factor).enumerate() {
            let inv = 1.0 / win.len() as f64;
            let dst = &mut out[(ch * to + p) * plane..][..plane];
            for s in win {
                let src = &x.data()[(ch * t + s) * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v * inv;
                }
            }
        }
    }
    Tensor::from_vec(&[c, to, w, h], out)
}

pub fn temporal_pool_dual(x: &Tensor, factor: usize) -> Result<DualResult> {
    let out = temporal_pool(x, factor)?;
    let [c, t, w, h] = x.dims4()?;
    Ok(DualResult::new(
        out,
        Box::new(move |g| {
            let plane = w * h;
            let to = t.div_ceil(factor);
            let mut gx = vec![0.0; c * t * plane];
            for ch in 0..c {
                for (p, win) in pool_windows(t, factor).enumerate() {
                    let inv = 1.0 / win.len() as f64;
                    let src = &g.data()[(ch * to + p) * plane..][..plane];
                    for s in win {
                        for (d, v) in gx[(ch * t + s) * plane..][..plane].iter_mut().zip(src) {
                            *d += v * inv;
                        }
                    }
                }
            }
            Ok(vec![Tensor::from_vec(&[c, t, w, h], gx)?])
        }),
    ))
}

/// Mean over every axis but the first: `[C, ...] -> [C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let per = x.len() / c;
    let data = x
        .data()
        .chunks(per)
        .map(|ch| ch.iter().sum::<f64>() / per as f64)
        .collect();
    Tensor::from_vec(&[c], data).expect("channel count is positive")
}

pub fn global_avg_pool_dual(x: &Tensor) -> DualResult {
    let shape = x.shape().to_vec();
    let per = x.len() / shape[0];
    DualResult::new(
        global_avg_pool(x),
        Box::new(move |g| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v / per as f64, per))
                .collect();
            Ok(vec![Tensor::from_vec(&shape, data)?])
        }),
    )
}

/// Inverted dropout. Identity when `train` is false.
pub fn dropout_dual(x: &Tensor, rate: f64, rng: &mut impl Rng, train: bool) -> Result<DualResult> {
    if !(0.0..1.0).contains(&rate) {
        return arg_err(format!("dropout rate {rate} outside [0, 1)"));
    }
    if !train || rate == 0.0 {
        return Ok(DualResult::new(
            x.clone(),
            Box::new(|g| Ok(vec![g.clone()])),
        ));
    }
    let keep = 1.0 / (1.0 - rate);
    let gate = x.map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
    let out = x.zip_map(&gate, |a, b| a * b)?;
    Ok(DualResult::new(
        out,
        Box::new(move |g| Ok(vec![g.zip_map(&gate, |a, b| a * b)?])),
    ))
}

pub fn dropout(x: &Tensor, rate: f64, rng: &mut impl Rng, train: bool) -> Result<Tensor> {
    Ok(dropout_dual(x, rate, rng, train)?.output)
}

fn check_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let [o, i] = w.dims2()?;
    if x.shape() != [i] || b.shape() != [o] {
        return dim_err(format!(
            "linear: input {:?}, weights {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    Ok((o, i))
}

/// `weights · x + bias` for a vector input.
pub fn linear(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (o, i) = check_linear(x, weights, bias)?;
    let data = (0..o)
        .map(|r| {
            bias.data()[r]
                + weights.data()[r * i..(r + 1) * i]
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    Tensor::from_vec(&[o], data)
}

pub fn linear_dual(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<DualResult> {
    let out = linear(x, weights, bias)?;
    let (x, weights) = (x.clone(), weights.clone());
    Ok(DualResult::new(
        out,
        Box::new(move |g| {
            let [o, i] = weights.dims2()?;
            let mut gx = vec![0.0; i];
            let mut gw = vec![0.0; o * i];
            for r in 0..o {
                let gv = g.data()[r];
                for c in 0..i {
                    gx[c] += gv * weights.data()[r * i + c];
                    gw[r * i + c] = gv * x.data()[c];
                }
            }
            Ok(vec![
                Tensor::from_vec(&[i], gx)?,
                Tensor::from_vec(&[o, i], gw)?,
                g.clone(),
            ])
        }),
    ))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - peak).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Negative log-likelihood of `label` under softmax(`logits`).
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    if logits.rank() != 1 {
        return dim_err(format!("logits must be a vector, got {:?}", logits.shape()));
    }
    if label >= logits.len() {
        return arg_err(format!("label {label} for {} classes", logits.len()));
    }
    let d = logits.data();
    let peak = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let zy = d[label];
    if zy == peak {
        // ln(1 + sum_{i != y} exp(z_i - z_y)) avoids cancelling two O(z) terms
        let rest: f64 = d
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label)
            .map(|(_, v)| (v - zy).exp())
            .sum();
        return Ok(rest.ln_1p());
    }
    let lse = peak + d.iter().map(|v| (v - peak).exp()).sum::<f64>().ln();
    Ok(lse - zy)
}

pub fn softmax_cross_entropy_dual(logits: &Tensor, label: usize) -> Result<DualResult> {
    let loss = softmax_cross_entropy(logits, label)?;
    let mut p = softmax(logits.data());
    p[label] -= 1.0;
    let dl = Tensor::from_vec(logits.shape(), p)?;
    Ok(DualResult::new(
        Tensor::scalar(loss),
        Box::new(move |g| Ok(vec![dl.scale(g.data()[0])])),
    ))
}

pub fn flip_axis_dual(x: &Tensor, axis: usize) -> Result<DualResult> {
    let out = x.flip_axis(axis)?;
    Ok(DualResult::new(
        out,
        Box::new(move |g| Ok(vec![g.flip_axis(axis)?])),
    ))
}

pub fn concat_dual(parts: &[&Tensor], axis: usize) -> Result<DualResult> {
    let out = Tensor::concat(parts, axis)?;
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Ok(DualResult::new(
        out,
        Box::new(move |g| {
            let mut start = 0;
            extents
                .iter()
                .map(|&n| {
                    let s = g.slice_axis(axis, start, n);
                    start += n;
                    s
                })
                .collect()
        }),
    ))
}

pub fn add_dual(a: &Tensor, b: &Tensor) -> Result<DualResult> {
    Ok(DualResult::new(
        a.add(b)?,
        Box::new(|g| Ok(vec![g.clone(), g.clone()])),
    ))
}
