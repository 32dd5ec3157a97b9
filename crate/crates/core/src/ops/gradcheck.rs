//! Central finite-difference validation of analytic backward passes.
//!
//! The scalar probed is `<u, op(x)>` for a fixed pseudo-random upstream `u`,
//! so every output element contributes to every checked derivative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DualResult;
use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

/// Where the largest discrepancy was found.
#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Probes dropped because they straddle a kink (piecewise checks only).
    pub skipped: usize,

    pub worst: Option<Worst>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare `op`'s backward against central differences on every element of
/// every input.
pub fn grad_check<F>(
    op: F,
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<DualResult>,
{
    grad_check_where(op, inputs, epsilon, tolerance, |_, _| true)
}

/// Relative disagreement of the one-sided differences above which a probe
/// is taken to straddle a kink.
pub const KINK_RATIO: f64 = 1e-2;
/// Absolute floor for the same test, below finite-difference noise.
pub const KINK_FLOOR: f64 = 1e-6;
/// Absolute floor for the step-halving test: central differences at
/// epsilon and epsilon / 2 must agree unless a kink lies between them.
pub const HALVING_FLOOR: f64 = 1e-11;

/// As [`grad_check`] for piecewise-smooth functions such as a network with
/// ReLUs. A probe whose forward and backward one-sided differences disagree
/// by more than [`KINK_RATIO`] (and [`KINK_FLOOR`] in absolute terms), or
/// whose central difference changes by more than half the tolerance when the
/// step is halved, crosses a kink; it is counted in `skipped` instead of
/// compared.
pub fn grad_check_piecewise<F>(
    op: F,
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<DualResult>,
{
    check_impl(op, inputs, epsilon, tolerance, |_, _| true, true)
}

/// As [`grad_check`], probing only the elements accepted by `probe(input, element)`.
pub fn grad_check_where<F, P>(
    op: F,
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    probe: P,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<DualResult>,
    P: Fn(usize, usize) -> bool,
{
    check_impl(op, inputs, epsilon, tolerance, probe, false)
}

fn check_impl<F, P>(
    op: F,
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    probe: P,
    skip_kinks: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<DualResult>,
    P: Fn(usize, usize) -> bool,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return arg_err(format!("epsilon {epsilon} outside [1e-7, 1e-4]"));
    }
    let dual = op(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let upstream = dual.output.map(|_| rng.gen_range(-1.0..1.0));
    let analytic = dual.backward(&upstream)?;

    let objective = |xs: &[Tensor]| -> Result<f64> { op(xs)?.output.dot(&upstream) };
    let centre = dual.output.dot(&upstream)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tolerance,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe_inputs = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate().take(inputs.len()) {
        for e in 0..inputs[i].len() {
            if !probe(i, e) {
                continue;
            }
            let orig = inputs[i].data()[e];
            probe_inputs[i].data_mut()[e] = orig + epsilon;
            let plus = objective(&probe_inputs)?;
            probe_inputs[i].data_mut()[e] = orig - epsilon;
            let minus = objective(&probe_inputs)?;
            probe_inputs[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            if skip_kinks {
                let ahead = (plus - centre) / epsilon;
                let behind = (centre - minus) / epsilon;
                let jump = (ahead - behind).abs();
                let one_sided =
                    jump > KINK_FLOOR && jump > KINK_RATIO * ahead.abs().max(behind.abs());
                let half = epsilon / 2.0;
                probe_inputs[i].data_mut()[e] = orig + half;
                let plus_h = objective(&probe_inputs)?;
                probe_inputs[i].data_mut()[e] = orig - half;
                let minus_h = objective(&probe_inputs)?;
                probe_inputs[i].data_mut()[e] = orig;
                let numeric_h = (plus_h - minus_h) / epsilon;
                let drift = (numeric - numeric_h).abs();
                let halving = drift > HALVING_FLOOR
                    && drift > 0.5 * tolerance * (numeric.abs() + numeric_h.abs());
                if one_sided || halving {
                    report.skipped += 1;
                    continue;
                }
            }
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Worst {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
