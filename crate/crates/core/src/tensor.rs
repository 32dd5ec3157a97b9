//! Dense row-major tensors.
//!
//! Feature maps use the axis order `(C, T, W, H)`; the last axis is contiguous.

use crate::error::{arg_err, dim_err, Result};

/// Dense N-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return arg_err("shape must have at least one axis");
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return arg_err(format!("extent of axis {axis} is zero in {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Tensor of the given shape with every element set to `fill`.
    pub fn full(shape: &[usize], fill: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    /// Tensor of the given shape holding `values` in row-major order.
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if values.len() != len {
            return dim_err(format!(
                "{} values supplied for shape {shape:?} ({len} elements)",
                values.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: values,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extents of a rank-4 `(C, T, W, H)` tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [c, t, w, h] => Ok([c, t, w, h]),
            _ => dim_err(format!("expected a rank-4 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => dim_err(format!("expected a rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "cannot accumulate {:?} into {:?}",
                other.shape, self.shape
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return dim_err(format!("dot of {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Product of extents before `axis`, extent of `axis`, product after.
    fn split_at_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return arg_err(format!("axis {axis} out of range for rank {}", self.rank()));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Reverse the order of elements along `axis`.
    pub fn flip_axis(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = self.split_at_axis(axis)?;
        let mut data = Vec::with_capacity(self.data.len());
        for o in 0..outer {
            for i in (0..n).rev() {
                let start = (o * n + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Concatenate tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let Some(first) = parts.first() else {
            return arg_err("concat of zero tensors");
        };
        let (outer, _, inner) = first.split_at_axis(axis)?;
        let mut total = 0;
        for p in parts {
            let same_rest = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !same_rest {
                return dim_err(format!(
                    "cannot concat {:?} with {:?} along axis {axis}",
                    p.shape, first.shape
                ));
            }
            total += p.shape[axis];
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, n, inner) = self.split_at_axis(axis)?;
        if len == 0 || start + len > n {
            return arg_err(format!(
                "slice {start}..{} out of range for extent {n}",
                start + len
            ));
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Self { shape, data })
    }
}

/// Sampling plan for one axis of a corner-aligned linear resize.
///
/// Entry `i` gives the two source indices and the weight of the second one.
pub(crate) fn linear_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    if f == 0.0 {
        return a;
    }
    (a + (b - a) * f).clamp(a.min(b), a.max(b))
}

/// Resize one row-major `in_h x in_w` plane into `out`.
pub(crate) fn bilinear_plane(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    out: &mut [f64],
    rows: &[(usize, usize, f64)],
    cols: &[(usize, usize, f64)],
) {
    debug_assert_eq!(src.len(), in_h * in_w);
    let out_w = cols.len();
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let top = lerp(src[r0 * in_w + c0], src[r0 * in_w + c1], fc);
            let bottom = lerp(src[r1 * in_w + c0], src[r1 * in_w + c1], fc);
            out[i * out_w + j] = lerp(top, bottom, fr);
        }
    }
}

/// Adjoint of [`bilinear_plane`]: scatter `grad` back onto the source plane.
pub(crate) fn bilinear_plane_adjoint(
    grad: &[f64],
    in_w: usize,
    acc: &mut [f64],
    rows: &[(usize, usize, f64)],
    cols: &[(usize, usize, f64)],
) {
    let out_w = cols.len();
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let g = grad[i * out_w + j];
            let (gt, gb) = (g * (1.0 - fr), g * fr);
            acc[r0 * in_w + c0] += gt * (1.0 - fc);
            acc[r0 * in_w + c1] += gt * fc;
            acc[r1 * in_w + c0] += gb * (1.0 - fc);
            acc[r1 * in_w + c1] += gb * fc;
        }
    }
}

/// Bilinear resize of a 2-D tensor with corner-aligned sampling.
///
/// Output corners coincide with input corners, so resizing to the input's own
/// extents returns the input unchanged.
pub fn bilinear_resize_2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [in_h, in_w] = x.dims2()?;
    if out_h == 0 || out_w == 0 {
        return arg_err("bilinear output extents must be positive");
    }
    let rows = linear_plan(in_h, out_h);
    let cols = linear_plan(in_w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    bilinear_plane(x.data(), in_h, in_w, &mut out, &rows, &cols);
    Tensor::from_vec(&[out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_fill_and_copy() {
        let z = Tensor::full(&[2, 2], 0.0).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let v = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn create_rejects_bad_shapes() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
        assert!(matches!(
            Tensor::zeros(&[2, 0]).unwrap_err(),
            crate::Error::Argument(_)
        ));
        assert!(matches!(
            Tensor::zeros(&[]).unwrap_err(),
            crate::Error::Argument(_)
        ));
    }

    #[test]
    fn flip_examples() {
        let v = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.flip_axis(0).unwrap().data(), &[3.0, 2.0, 1.0]);
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.flip_axis(1).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(m.flip_axis(0).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);
        assert!(matches!(
            m.flip_axis(2).unwrap_err(),
            crate::Error::Argument(_)
        ));
    }

    #[test]
    fn resize_midpoint() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize_2d(&x, 1, 3).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice_axis(1, 0, 2).unwrap(), a);
        assert_eq!(c.slice_axis(1, 2, 1).unwrap(), b);
        assert!(Tensor::concat(&[&a, &b], 0).is_err());
    }
}
