//! SGD with momentum, L2 weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is divided by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    /// lr 0.01 divided by 10 at epochs 40 and 80, momentum 0.9, decay 1e-4.
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_epochs: vec![40, 80],
            decay_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
}

impl OptimState {
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            velocity: params.iter().map(Tensor::zeros_like).collect(),
            epoch: 0,
        }
    }

    /// Learning rate in effect for the current epoch.
    pub fn lr(&self) -> f64 {
        let steps = self
            .config
            .decay_epochs
            .iter()
            .filter(|&&e| e <= self.epoch)
            .count();
        self.config.lr / self.config.decay_factor.powi(steps as i32)
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }
}

/// `g' = g + wd*p; v = momentum*v + g'; p -= lr*v`.
///
/// Any non-finite gradient aborts the step before a parameter is touched.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return dim_err(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return dim_err(format!("parameter {i}: shape mismatch"));
        }
        if let Some(e) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient at parameter {i}, element {e}"
            )));
        }
    }
    let lr = state.lr();
    let SgdConfig {
        momentum,
        weight_decay,
        ..
    } = state.config;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = gv + weight_decay * *pv;
            *vv = momentum * *vv + step;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
