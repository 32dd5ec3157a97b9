//! A minimal reverse-mode tape over [`DualResult`]s.

use rand::Rng;

use super::DualResult;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    dual: Option<DualResult>,
}

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order, so the backward sweep is a single reverse scan.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Accumulated gradients, indexed by [`Var`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a leaf value (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            dual: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].dual {
            Some(d) => &d.output,
            None => &self.nodes[v.0].value,
        }
    }

    /// Record the result of a primitive applied to `inputs`.
    pub fn push(&mut self, inputs: &[Var], dual: DualResult) -> Var {
        self.nodes.push(Node {
            value: Tensor::scalar(0.0),
            inputs: inputs.to_vec(),
            dual: Some(dual),
        });
        Var(self.nodes.len() - 1)
    }

    /// Apply `op` to the current values of `inputs` and record the result.
    pub fn apply(
        &mut self,
        inputs: &[Var],
        op: impl FnOnce(&[&Tensor]) -> Result<DualResult>,
    ) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let dual = op(&values)?;
        Ok(self.push(inputs, dual))
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as the root).
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return dim_err(format!(
                "seed {:?} does not match root {:?}",
                seed.shape(),
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(dual) = &node.dual else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let input_grads = dual.backward(&g)?;
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    // -- convenience wrappers for the primitives --------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(&[x], |v| Ok(super::relu_dual(v[0])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&[a, b], |v| super::add_dual(v[0], v[1]))
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(&[x], |v| super::flip_axis_dual(v[0], axis))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(parts, |v| super::concat_dual(v, axis))
    }

    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(&[x, w, b], |v| super::pointwise_conv_dual(v[0], v[1], v[2]))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.apply(&[x, w, b], |v| {
            super::spatial_conv3x3_dual(v[0], v[1], v[2], stride)
        })
    }

    pub fn avg_pool_spatial(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.apply(&[x], |v| super::avg_pool_spatial_dual(v[0], factor))
    }

    pub fn temporal_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.apply(&[x], |v| super::temporal_pool_dual(v[0], factor))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(&[x], |v| Ok(super::global_avg_pool_dual(v[0])))
    }

    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng, train: bool) -> Result<Var> {
        self.apply(&[x], |v| super::dropout_dual(v[0], rate, rng, train))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(&[x, w, b], |v| super::linear_dual(v[0], v[1], v[2]))
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.apply(&[logits], |v| {
            super::softmax_cross_entropy_dual(v[0], label)
        })
    }
}
