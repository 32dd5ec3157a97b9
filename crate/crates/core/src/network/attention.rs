//! Spatial attention propagation from a late stage onto an earlier one.

use crate::error::{dim_err, Result};
use crate::ops::{sigmoid, DualResult};
use crate::tensor::{bilinear_plane, bilinear_plane_adjoint, linear_plan, Tensor};

/// `att[t,i,j] = sigmoid(mean_c f[c,t,i,j])`, shape `T x W x H`.
pub fn spatial_attention_map(f: &Tensor) -> Result<Tensor> {
    let [c, t, w, h] = f.dims4()?;
    let n = t * w * h;
    let mut mean = vec![0.0; n];
    for ch in f.data().chunks(n) {
        for (m, v) in mean.iter_mut().zip(ch) {
            *m += v;
        }
    }
    let inv = 1.0 / c as f64;
    Tensor::from_vec(
        &[t, w, h],
        mean.into_iter().map(|m| sigmoid(m * inv)).collect(),
    )
}

/// Index of the late time step gating early step `t_early`.
fn time_map(t_early: usize, n_early: usize, n_late: usize) -> usize {
    t_early * n_late / n_early
}

fn check_times(n_early: usize, n_late: usize) -> Result<()> {
    if !n_early.is_multiple_of(n_late) && !n_late.is_multiple_of(n_early) {
        return dim_err(format!(
            "temporal extents {n_late} (late) and {n_early} (early) are not integer multiples"
        ));
    }
    Ok(())
}

/// Spatially upsampled gate for every early time step: `T_early x W x H`.
fn upsample_gate(gate: &Tensor, t_early: usize, w: usize, h: usize) -> Result<Tensor> {
    let [t_late, wl, hl] = match *gate.shape() {
        [a, b, c] => [a, b, c],
        _ => return dim_err(format!("gate must be rank 3, got {:?}", gate.shape())),
    };
    check_times(t_early, t_late)?;
    let rows = linear_plan(wl, w);
    let cols = linear_plan(hl, h);
    let mut out = vec![0.0; t_early * w * h];
    for (t, dst) in out.chunks_mut(w * h).enumerate() {
        let src = &gate.data()[time_map(t, t_early, t_late) * wl * hl..][..wl * hl];
        bilinear_plane(src, wl, hl, dst, &rows, &cols);
    }
    Tensor::from_vec(&[t_early, w, h], out)
}

/// `gate_up ⊙ f_early + f_early` with the gate broadcast across channels.
///
/// `gate` is `T_late x W_late x H_late`; it is bilinearly upsampled to the
/// early spatial extents and replicated in time when the early map has an
/// integer multiple of the late map's time steps.
pub fn propagate_with_gate(gate: &Tensor, f_early: &Tensor) -> Result<Tensor> {
    let [_, t, w, h] = f_early.dims4()?;
    let up = upsample_gate(gate, t, w, h)?;
    let n = t * w * h;
    let mut out = f_early.data().to_vec();
    for ch in out.chunks_mut(n) {
        for (v, a) in ch.iter_mut().zip(up.data()) {
            *v += a * *v;
        }
    }
    Tensor::from_vec(f_early.shape(), out)
}

/// Gate early features by the upsampled attention of late features, plus a residual.
pub fn attention_propagate(f_late: &Tensor, f_early: &Tensor) -> Result<Tensor> {
    propagate_with_gate(&spatial_attention_map(f_late)?, f_early)
}

pub fn attention_propagate_dual(f_late: &Tensor, f_early: &Tensor) -> Result<DualResult> {
    let [c_late, t_late, wl, hl] = f_late.dims4()?;
    let [_, t_early, w, h] = f_early.dims4()?;
    let att = spatial_attention_map(f_late)?;
    let up = upsample_gate(&att, t_early, w, h)?;
    let out = propagate_with_gate(&att, f_early)?;
    let f_early = f_early.clone();
    Ok(DualResult::new(
        out,
        Box::new(move |g| {
            let n = t_early * w * h;
            let mut g_early = vec![0.0; f_early.len()];
            let mut g_up = vec![0.0; n];
            for ((ge, go), fe) in g_early
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(f_early.data().chunks(n))
            {
                for i in 0..n {
                    ge[i] = go[i] * (1.0 + up.data()[i]);
                    g_up[i] += go[i] * fe[i];
                }
            }
            let rows = linear_plan(wl, w);
            let cols = linear_plan(hl, h);
            let plane = wl * hl;
            let mut g_att = vec![0.0; t_late * plane];
            for (t, gu) in g_up.chunks(w * h).enumerate() {
                let dst = &mut g_att[time_map(t, t_early, t_late) * plane..][..plane];
                bilinear_plane_adjoint(gu, hl, dst, &rows, &cols);
            }
            let inv = 1.0 / c_late as f64;
            let local: Vec<f64> = g_att
                .iter()
                .zip(att.data())
                .map(|(ga, a)| ga * a * (1.0 - a) * inv)
                .collect();
            let mut g_late = Vec::with_capacity(c_late * local.len());
            for _ in 0..c_late {
                g_late.extend_from_slice(&local);
            }
            Ok(vec![
                Tensor::from_vec(&[c_late, t_late, wl, hl], g_late)?,
                Tensor::from_vec(f_early.shape(), g_early)?,
            ])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_features_give_half_gate() {
        let f = Tensor::zeros(&[3, 2, 4, 4]).unwrap();
        let att = spatial_attention_map(&f).unwrap();
        assert!(att.data().iter().all(|&v| v == 0.5));
        let early = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let out = attention_propagate(&f, &early).unwrap();
        assert_eq!(out, early.scale(1.5));
    }

    #[test]
    fn saturated_gate() {
        let f = Tensor::full(&[2, 1, 2, 2], 20.0).unwrap();
        let att = spatial_attention_map(&f).unwrap();
        assert!(att.data().iter().all(|&v| (1.0 - v) < 1e-6));
    }

    #[test]
    fn zero_gate_is_residual_identity() {
        let early = Tensor::from_vec(&[2, 2, 1, 2], (0..8).map(f64::from).collect()).unwrap();
        let gate = Tensor::zeros(&[1, 3, 3]).unwrap();
        assert_eq!(propagate_with_gate(&gate, &early).unwrap(), early);
    }

    #[test]
    fn irreconcilable_times_rejected() {
        let late = Tensor::zeros(&[1, 3, 2, 2]).unwrap();
        let early = Tensor::zeros(&[1, 4, 4, 4]).unwrap();
        assert!(matches!(
            attention_propagate(&late, &early).unwrap_err(),
            crate::Error::Dimension(_)
        ));
    }
}
