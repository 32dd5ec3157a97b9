//! Channel independent directional convolution.
//!
//! A CIDC unit mixes each channel's temporal sequence with its own `T' x T`
//! kernel whose future-looking entries are forced to zero, then mixes
//! channels with a pointwise convolution. Kernel logits are normalized with a
//! masked row softmax followed by a per-channel affine rescale to `[-1, 1]`.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::ops::graph::{Graph, Var};
use crate::ops::{softmax_rows_backward, softmax_rows_into, DualResult};
use crate::tensor::{bilinear_resize_2d, Tensor};

/// Below this spread the softmax values are kept as they are.
pub const RESCALE_MIN_RANGE: f64 = 1e-9;

/// Binary `T' x T` matrix; `true` marks a forbidden (future-looking) entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    masked: Vec<bool>,
}

impl MaskMatrix {
    /// Validates that every row keeps at least one admissible entry.
    pub fn from_bits(rows: usize, cols: usize, masked: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || masked.len() != rows * cols {
            return dim_err(format!("mask of {} bits for {rows}x{cols}", masked.len()));
        }
        if let Some(row) = (0..rows).find(|r| masked[r * cols..(r + 1) * cols].iter().all(|&m| m)) {
            return Err(Error::DegenerateMask { row, rows, cols });
        }
        Ok(Self { rows, cols, masked })
    }

    /// Mask with nothing forbidden.
    pub fn open(rows: usize, cols: usize) -> Result<Self> {
        Self::from_bits(rows, cols, vec![false; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.cols + col]
    }

    /// Column indices that row `row` may read.
    pub fn support(&self, row: usize) -> Vec<usize> {
        (0..self.cols)
            .filter(|&c| !self.is_masked(row, c))
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .masked
            .iter()
            .map(|&m| f64::from(u8::from(m)))
            .collect();
        Tensor::from_vec(&[self.rows, self.cols], data).expect("mask extents are positive")
    }
}

/// Directional mask for `t_out` output steps over `t_in` input steps.
///
/// For equal lengths this is the strict upper-triangular indicator. Otherwise
/// the square `t_in x t_in` indicator is bilinearly resized to
/// `t_out x t_in` and every entry with a positive value is forbidden.
pub fn build_directional_mask(t_out: usize, t_in: usize) -> Result<MaskMatrix> {
    if t_out == 0 || t_in == 0 {
        return Err(Error::Argument("temporal extents must be positive".into()));
    }
    if t_out == t_in {
        let bits = (0..t_out * t_in).map(|i| i % t_in > i / t_in).collect();
        return MaskMatrix::from_bits(t_out, t_in, bits);
    }
    let square = Tensor::from_vec(
        &[t_in, t_in],
        (0..t_in * t_in)
            .map(|i| if i % t_in > i / t_in { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let resized = bilinear_resize_2d(&square, t_out, t_in)?;
    MaskMatrix::from_bits(
        t_out,
        t_in,
        resized.data().iter().map(|&v| v > 0.0).collect(),
    )
}

/// How the temporal kernel is constrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// No masking; every output step sees the whole sequence.
    Open,
    /// Future-looking entries are forbidden.
    Directional,
}

impl MaskMode {
    pub fn build(self, t_out: usize, t_in: usize) -> Result<MaskMatrix> {
        match self {
            MaskMode::Open => MaskMatrix::open(t_out, t_in),
            MaskMode::Directional => build_directional_mask(t_out, t_in),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

fn kernel_dims(k: &Tensor, mask: &MaskMatrix) -> Result<[usize; 3]> {
    match *k.shape() {
        [c, r, s] if r == mask.rows() && s == mask.cols() => Ok([c, r, s]),
        _ => dim_err(format!(
            "kernel {:?} does not match a {}x{} mask",
            k.shape(),
            mask.rows(),
            mask.cols()
        )),
    }
}

/// Per-channel rescale bookkeeping needed by the backward pass.
struct Rescale {
    lo: f64,
    range: f64,
    argmin: usize,
    argmax: usize,
}

fn unmasked_extremes(s: &[f64], mask: &MaskMatrix) -> Option<Rescale> {
    let mut best: Option<(usize, usize)> = None;
    for (i, &v) in s.iter().enumerate() {
        if mask.masked[i] {
            continue;
        }
        best = Some(match best {
            None => (i, i),
            Some((lo, hi)) => (
                if v < s[lo] { i } else { lo },
                if v > s[hi] { i } else { hi },
            ),
        });
    }
    let (argmin, argmax) = best?;
    let range = s[argmax] - s[argmin];
    (range > RESCALE_MIN_RANGE).then_some(Rescale {
        lo: s[argmin],
        range,
        argmin,
        argmax,
    })
}

/// Masked row softmax of every channel of `k`, before the rescale.
pub fn kernel_softmax(k: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
    kernel_dims(k, mask)?;
    let mut s = vec![0.0; k.len()];
    let plane = mask.rows() * mask.cols();
    for (src, dst) in k.data().chunks(plane).zip(s.chunks_mut(plane)) {
        softmax_rows_into(src, mask, dst)?;
    }
    Tensor::from_vec(k.shape(), s)
}

fn normalize_with_state(
    k: &Tensor,
    mask: &MaskMatrix,
) -> Result<(Tensor, Tensor, Vec<Option<Rescale>>)> {
    let soft = kernel_softmax(k, mask)?;
    let plane = mask.rows() * mask.cols();
    let mut out = soft.data().to_vec();
    let mut states = Vec::new();
    for dst in out.chunks_mut(plane) {
        let state = unmasked_extremes(dst, mask);
        if let Some(r) = &state {
            for (i, v) in dst.iter_mut().enumerate() {
                if !mask.masked[i] {
                    *v = (-1.0 + 2.0 * (*v - r.lo) / r.range).clamp(-1.0, 1.0);
                }
            }
        }
        states.push(state);
    }
    Ok((Tensor::from_vec(k.shape(), out)?, soft, states))
}

/// Normalized kernel `w` from logits `k` (`C x T' x T`).
///
/// Each channel gets a masked row softmax; its unmasked entries are then
/// mapped affinely so that their minimum is -1 and maximum +1, unless they
/// span less than [`RESCALE_MIN_RANGE`]. Masked entries are exactly zero.
pub fn normalize_kernel(k: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
    Ok(normalize_with_state(k, mask)?.0)
}

pub fn normalize_kernel_dual(k: &Tensor, mask: &MaskMatrix) -> Result<DualResult> {
    let (w, soft, states) = normalize_with_state(k, mask)?;
    let mask = mask.clone();
    Ok(DualResult::new(
        w,
        Box::new(move |g| {
            let plane = mask.rows * mask.cols;
            let mut gk = vec![0.0; soft.len()];
            let mut gs = vec![0.0; plane];
            for (ch, state) in states.iter().enumerate() {
                let s = &soft.data()[ch * plane..][..plane];
                let gw = &g.data()[ch * plane..][..plane];
                match state {
                    None => gs.copy_from_slice(gw),
                    Some(r) => {
                        let scale = 2.0 / r.range;
                        let (mut to_min, mut to_max) = (0.0, 0.0);
                        for i in 0..plane {
                            if mask.masked[i] {
                                gs[i] = 0.0;
                                continue;
                            }
                            let u = (s[i] - r.lo) / r.range;
                            gs[i] = scale * gw[i];
                            to_min += gw[i] * scale * (u - 1.0);
                            to_max -= gw[i] * scale * u;
                        }
                        gs[r.argmin] += to_min;
                        gs[r.argmax] += to_max;
                    }
                }
                softmax_rows_backward(s, &gs, mask.cols, &mut gk[ch * plane..][..plane]);
            }
            Ok(vec![Tensor::from_vec(soft.shape(), gk)?])
        }),
    ))
}

fn apply_dims(f: &Tensor, w: &Tensor) -> Result<([usize; 4], usize)> {
    let dims @ [c, t, _, _] = f.dims4()?;
    match *w.shape() {
        [wc, t_out, wt] if wc == c && wt == t => Ok((dims, t_out)),
        _ => dim_err(format!(
            "kernel {:?} incompatible with feature map {:?}",
            w.shape(),
            f.shape()
        )),
    }
}

/// `out[c,t',x,y] = sum_s w[c,t',s] * f[c,s,x,y]`.
///
/// Zero weights are skipped, so masked time steps never touch the output.
pub fn cidc_apply(f: &Tensor, w: &Tensor) -> Result<Tensor> {
    let ([c, t, x, y], t_out) = apply_dims(f, w)?;
    let plane = x * y;
    let mut out = vec![0.0; c * t_out * plane];
    for ch in 0..c {
        for r in 0..t_out {
            let dst = &mut out[(ch * t_out + r) * plane..][..plane];
            for s in 0..t {
                let wv = w.data()[(ch * t_out + r) * t + s];
                if wv == 0.0 {
                    continue;
                }
                let src = &f.data()[(ch * t + s) * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += wv * v;
                }
            }
        }
    }
    Tensor::from_vec(&[c, t_out, x, y], out)
}

pub fn cidc_apply_dual(f: &Tensor, w: &Tensor) -> Result<DualResult> {
    let out = cidc_apply(f, w)?;
    let (f, w) = (f.clone(), w.clone());
    Ok(DualResult::new(
        out,
        Box::new(move |g| {
            let ([c, t, x, y], t_out) = apply_dims(&f, &w)?;
            let plane = x * y;
            let mut gf = vec![0.0; f.len()];
            let mut gw = vec![0.0; w.len()];
            for ch in 0..c {
                for r in 0..t_out {
                    let go = &g.data()[(ch * t_out + r) * plane..][..plane];
                    for s in 0..t {
                        let idx = (ch * t_out + r) * t + s;
                        let src = &f.data()[(ch * t + s) * plane..][..plane];
                        gw[idx] = go.iter().zip(src).map(|(a, b)| a * b).sum();
                        let wv = w.data()[idx];
                        for (d, v) in gf[(ch * t + s) * plane..][..plane].iter_mut().zip(go) {
                            *d += wv * v;
                        }
                    }
                }
            }
            Ok(vec![
                Tensor::from_vec(f.shape(), gf)?,
                Tensor::from_vec(w.shape(), gw)?,
            ])
        }),
    ))
}

/// Learnable state of one CIDC unit.
#[derive(Clone, Debug, PartialEq)]
pub struct CidcParams {
    /// Kernel logits, `C x T' x T`.
    pub k: Tensor,
    /// Pointwise mixing, `C_out x C`.
    pub mix_weights: Tensor,
    pub mix_bias: Tensor,
    pub direction: Direction,
    pub mask_mode: MaskMode,
}

impl CidcParams {
    /// `k ~ U(-0.01, 0.01)`, fan-in scaled uniform mixing, zero bias.
    pub fn init(
        channels: usize,
        channels_out: usize,
        t_out: usize,
        t_in: usize,
        direction: Direction,
        mask_mode: MaskMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = channels * t_out * t_in;
        let k = Tensor::from_vec(
            &[channels, t_out, t_in],
            (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect(),
        )?;
        let bound = (3.0 / channels as f64).sqrt();
        let mix_weights = Tensor::from_vec(
            &[channels_out, channels],
            (0..channels_out * channels)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )?;
        Ok(Self {
            k,
            mix_weights,
            mix_bias: Tensor::zeros(&[channels_out])?,
            direction,
            mask_mode,
        })
    }

    /// `(C, T', T)` of the kernel.
    pub fn kernel_dims(&self) -> [usize; 3] {
        let s = self.k.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels_out(&self) -> usize {
        self.mix_weights.shape()[0]
    }

    /// Mask implied by the kernel extents and mask mode.
    pub fn mask(&self) -> Result<MaskMatrix> {
        let [_, t_out, t_in] = self.kernel_dims();
        self.mask_mode.build(t_out, t_in)
    }
}

/// Graph handles for the learnable tensors of one unit.
#[derive(Clone, Copy, Debug)]
pub struct UnitVars {
    pub k: Var,
    pub mix_weights: Var,
    pub mix_bias: Var,
}

impl UnitVars {
    pub fn record(g: &mut Graph, p: &CidcParams) -> Self {
        Self {
            k: g.leaf(p.k.clone()),
            mix_weights: g.leaf(p.mix_weights.clone()),
            mix_bias: g.leaf(p.mix_bias.clone()),
        }
    }
}

/// Record one CIDC unit on the tape: normalize, directional convolution
/// (on the time-reversed input for the backward direction), pointwise mix.
pub fn unit_on_graph(
    g: &mut Graph,
    f: Var,
    vars: UnitVars,
    direction: Direction,
    mask: &MaskMatrix,
) -> Result<Var> {
    let w = g.apply(&[vars.k], |v| normalize_kernel_dual(v[0], mask))?;
    let reversed = direction == Direction::Backward;
    let src = if reversed { g.flip(f, 1)? } else { f };
    let y = g.apply(&[src, w], |v| cidc_apply_dual(v[0], v[1]))?;
    let y = if reversed { g.flip(y, 1)? } else { y };
    g.pointwise_conv(y, vars.mix_weights, vars.mix_bias)
}

/// Forward pass of a single unit.
pub fn cidc_unit_forward(f: &Tensor, params: &CidcParams) -> Result<Tensor> {
    let mask = params.mask()?;
    let mut g = Graph::new();
    let fv = g.leaf(f.clone());
    let vars = UnitVars::record(&mut g, params);
    let out = unit_on_graph(&mut g, fv, vars, params.direction, &mask)?;
    Ok(g.value(out).clone())
}

fn check_pair(fwd: &CidcParams, bwd: &CidcParams) -> Result<()> {
    if fwd.channels_out() != bwd.channels_out() || fwd.kernel_dims()[1] != bwd.kernel_dims()[1] {
        return dim_err(format!(
            "bidirectional halves disagree: C_out {} vs {}, T' {} vs {}",
            fwd.channels_out(),
            bwd.channels_out(),
            fwd.kernel_dims()[1],
            bwd.kernel_dims()[1]
        ));
    }
    Ok(())
}

/// Both directions on the tape, concatenated along time.
pub fn bidirectional_on_graph(
    g: &mut Graph,
    f: Var,
    fwd: (&CidcParams, UnitVars),
    bwd: (&CidcParams, UnitVars),
) -> Result<Var> {
    check_pair(fwd.0, bwd.0)?;
    let a = unit_on_graph(g, f, fwd.1, fwd.0.direction, &fwd.0.mask()?)?;
    let b = unit_on_graph(g, f, bwd.1, bwd.0.direction, &bwd.0.mask()?)?;
    g.concat(&[a, b], 1)
}

/// `C_out x 2T' x W x H`: forward unit output followed by backward unit output.
pub fn bidirectional_cidc(f: &Tensor, fwd: &CidcParams, bwd: &CidcParams) -> Result<Tensor> {
    check_pair(fwd, bwd)?;
    let a = cidc_unit_forward(f, fwd)?;
    let b = cidc_unit_forward(f, bwd)?;
    Tensor::concat(&[&a, &b], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_mask_is_strict_triangle() {
        let m = build_directional_mask(4, 4).unwrap();
        assert_eq!(m.support(0), vec![0]);
        let forbidden: Vec<Vec<usize>> = (0..4)
            .map(|r| (0..4).filter(|&c| m.is_masked(r, c)).collect())
            .collect();
        assert_eq!(forbidden, vec![vec![1, 2, 3], vec![2, 3], vec![3], vec![]]);
        let one = build_directional_mask(1, 1).unwrap();
        assert!(!one.is_masked(0, 0));
    }

    #[test]
    fn fully_masked_row_rejected() {
        let err = MaskMatrix::from_bits(2, 2, vec![false, true, true, true]).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1, .. }));
        let logits = Tensor::zeros(&[2, 2]).unwrap();
        let bad = MaskMatrix {
            rows: 2,
            cols: 2,
            masked: vec![true, true, false, false],
        };
        assert!(matches!(
            crate::ops::masked_softmax_rows(&logits, &bad).unwrap_err(),
            Error::DegenerateMask { row: 0, .. }
        ));
    }

    #[test]
    fn apply_expands_directly() {
        let (a, b) = (0.7, -1.3);
        let f = Tensor::from_vec(&[1, 2, 1, 1], vec![a, b]).unwrap();
        let w = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let y = cidc_apply(&f, &w).unwrap();
        assert_eq!(y.data(), &[a, 0.5 * a + 0.5 * b]);
        let eye = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(cidc_apply(&f, &eye).unwrap(), f);
        assert!(cidc_apply(&f, &Tensor::zeros(&[2, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn masked_weights_are_zero_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = build_directional_mask(3, 5).unwrap();
        let k = Tensor::from_vec(
            &[2, 3, 5],
            (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let w = normalize_kernel(&k, &mask).unwrap();
        for ch in 0..2 {
            for r in 0..3 {
                for s in 0..5 {
                    let v = w.data()[(ch * 3 + r) * 5 + s];
                    if mask.is_masked(r, s) {
                        assert_eq!(v.to_bits(), 0f64.to_bits());
                    } else {
                        assert!((-1.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }

    #[test]
    fn flat_channel_keeps_softmax() {
        let mask = MaskMatrix::open(2, 3).unwrap();
        let k = Tensor::zeros(&[1, 2, 3]).unwrap();
        let w = normalize_kernel(&k, &mask).unwrap();
        for v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bidirectional_rejects_mismatched_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = CidcParams::init(
            2,
            3,
            2,
            4,
            Direction::Forward,
            MaskMode::Directional,
            &mut rng,
        )
        .unwrap();
        let b = CidcParams::init(
            2,
            3,
            3,
            4,
            Direction::Backward,
            MaskMode::Directional,
            &mut rng,
        )
        .unwrap();
        let f = Tensor::zeros(&[2, 4, 2, 2]).unwrap();
        assert!(matches!(
            bidirectional_cidc(&f, &a, &b).unwrap_err(),
            Error::Dimension(_)
        ));
    }
}
