//! Multi-scale CIDC network: toy backbone, attention propagation, per-stage
//! CIDC branches with high-to-low resolution aggregation, fusion and head.

pub mod attention;
pub mod checkpoint;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cidc::{unit_on_graph, CidcParams, Direction, MaskMode, UnitVars};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::ops::graph::{Graph, Var};
use crate::ops::{avg_pool_spatial, pointwise_conv, DualResult};
use crate::tensor::Tensor;

pub use attention::{attention_propagate, propagate_with_gate, spatial_attention_map};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels_out: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub t_in: usize,
    /// Output steps per direction.
    pub t_out: usize,
    pub channels: usize,
    pub bidirectional: bool,
    pub unit_count: usize,
}

impl BranchConfig {
    /// Temporal extent of the branch output.
    pub fn output_steps(&self) -> usize {
        if self.bidirectional {
            2 * self.t_out
        } else {
            self.t_out
        }
    }
}

/// How backbone features and CIDC features are combined before the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    ConcatT,
    ConcatC,
    Sum,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat_t" => Ok(Self::ConcatT),
            "concat_c" => Ok(Self::ConcatC),
            "sum" => Ok(Self::Sum),
            _ => arg_err(format!("unknown fusion mode {s:?}")),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConcatT => "concat_t",
            Self::ConcatC => "concat_c",
            Self::Sum => "sum",
        })
    }
}

/// Directional modelling variant of the CIDC branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionMode {
    /// No temporal masking.
    Non,
    /// Forward-masked units.
    Uni,
    /// Forward and time-reversed units, concatenated along time.
    Bi,
}

impl FromStr for DirectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non" => Ok(Self::Non),
            "uni" => Ok(Self::Uni),
            "bi" => Ok(Self::Bi),
            _ => arg_err(format!("unknown direction mode {s:?}")),
        }
    }
}

impl fmt::Display for DirectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Non => "non",
            Self::Uni => "uni",
            Self::Bi => "bi",
        })
    }
}

/// What sits on the temporal path between backbone and head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPath {
    Cidc,
    /// Order-invariant control: the head sees only pooled backbone features.
    Pooling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(C, T, W, H)` of an input clip.
    pub input: [usize; 4],
    pub stages: Vec<StageConfig>,
    pub branches: Vec<BranchConfig>,
    pub mask_mode: MaskMode,
    pub fusion: FusionMode,
    pub temporal_path: TemporalPath,
    pub classes: usize,
    pub dropout: f64,
}

/// Number of tapped backbone stages.
pub const TAPPED_STAGES: usize = 3;

impl ModelConfig {
    /// Three-stage toy network sized for `input`, with branches matched to the
    /// deepest stage so every fusion mode is shape-compatible.
    pub fn toy(input: [usize; 4], direction: DirectionMode, fusion: FusionMode) -> Result<Self> {
        let stages = vec![
            StageConfig {
                channels_out: 8,
                spatial_stride: 2,
                temporal_stride: 1,
            },
            StageConfig {
                channels_out: 16,
                spatial_stride: 2,
                temporal_stride: 1,
            },
            StageConfig {
                channels_out: 32,
                spatial_stride: 2,
                temporal_stride: 2,
            },
        ];
        Self::with_stages(input, stages, direction, fusion)
    }

    /// Default desk-scale configuration: `1 x 8 x 36 x 36` clips, 4 classes.
    pub fn desk(direction: DirectionMode, fusion: FusionMode) -> Self {
        Self::toy([1, 8, 36, 36], direction, fusion).expect("desk configuration is valid")
    }

    pub fn with_stages(
        input: [usize; 4],
        stages: Vec<StageConfig>,
        direction: DirectionMode,
        fusion: FusionMode,
    ) -> Result<Self> {
        let bidirectional = direction == DirectionMode::Bi;
        let mut cfg = Self {
            input,
            stages,
            branches: Vec::new(),
            mask_mode: if direction == DirectionMode::Non {
                MaskMode::Open
            } else {
                MaskMode::Directional
            },
            fusion,
            temporal_path: TemporalPath::Cidc,
            classes: 4,
            dropout: 0.6,
        };
        let shapes = cfg.stage_shapes()?;
        let last = shapes[shapes.len() - 1];
        let dirs = if bidirectional { 2 } else { 1 };
        let t_out = (last[1] / dirs).max(1);
        cfg.branches = shapes
            .iter()
            .skip(shapes.len().saturating_sub(TAPPED_STAGES))
            .map(|s| BranchConfig {
                t_in: s[1],
                t_out,
                channels: s[0],
                bidirectional,
                unit_count: 2,
            })
            .collect();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Order-invariant control built from the same backbone.
    pub fn pooling_control(mut self) -> Self {
        self.temporal_path = TemporalPath::Pooling;
        self.branches.clear();
        self
    }

    pub fn direction(&self) -> DirectionMode {
        match (
            self.mask_mode,
            self.branches.first().map(|b| b.bidirectional),
        ) {
            (_, Some(true)) => DirectionMode::Bi,
            (MaskMode::Open, _) => DirectionMode::Non,
            _ => DirectionMode::Uni,
        }
    }

    /// `(C, T, W, H)` after every backbone stage.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 4]>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if !(1..=2).contains(&s.spatial_stride) || !(1..=2).contains(&s.temporal_stride) {
                return arg_err(format!("stage {i}: strides must be 1 or 2"));
            }
            if cur[2] < 3 || cur[3] < 3 {
                return dim_err(format!(
                    "stage {i}: spatial extent {}x{} below 3",
                    cur[2], cur[3]
                ));
            }
            cur = [
                s.channels_out,
                cur[1].div_ceil(s.temporal_stride),
                cur[2].div_ceil(s.spatial_stride),
                cur[3].div_ceil(s.spatial_stride),
            ];
            out.push(cur);
        }
        Ok(out)
    }

    /// Shape of the CIDC path output (after aggregation).
    fn cidc_shape(&self, shapes: &[[usize; 4]]) -> Option<[usize; 4]> {
        let b = self.branches.last()?;
        let s = shapes.last()?;
        Some([b.channels, b.output_steps(), s[2], s[3]])
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.stage_shapes()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return arg_err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.classes < 2 {
            return arg_err("at least two classes are required");
        }
        if self.temporal_path == TemporalPath::Pooling {
            return Ok(());
        }
        if shapes.len() < TAPPED_STAGES || self.branches.len() != TAPPED_STAGES {
            return dim_err(format!(
                "{} stages and {} branches; {TAPPED_STAGES} tapped stages are required",
                shapes.len(),
                self.branches.len()
            ));
        }
        let tapped = &shapes[shapes.len() - TAPPED_STAGES..];
        let steps = self.branches[0].output_steps();
        for (i, (b, s)) in self.branches.iter().zip(tapped).enumerate() {
            if b.t_in != s[1] || b.t_out == 0 || b.unit_count == 0 || b.channels == 0 {
                return dim_err(format!("branch {i} {b:?} does not fit stage shape {s:?}"));
            }
            if b.output_steps() != steps {
                return dim_err("branch outputs must share a temporal extent");
            }
            if i > 0 {
                pool_factor(tapped[i - 1], *s)?;
            }
        }
        let f = shapes[shapes.len() - 1];
        let c = self.cidc_shape(&shapes).expect("branches present");
        let ok = match self.fusion {
            FusionMode::Sum => f == c,
            FusionMode::ConcatC => f[1..] == c[1..],
            FusionMode::ConcatT => f[0] == c[0] && f[2..] == c[2..],
        };
        if !ok {
            return dim_err(format!(
                "fusion {} needs compatible shapes, got {f:?} and {c:?}",
                self.fusion
            ));
        }
        Ok(())
    }

    /// Channels entering the classifier.
    pub fn head_inputs(&self) -> Result<usize> {
        let shapes = self.stage_shapes()?;
        let f = shapes[shapes.len() - 1][0];
        Ok(match (self.temporal_path, self.fusion) {
            (TemporalPath::Cidc, FusionMode::ConcatC) => {
                f + self.branches[TAPPED_STAGES - 1].channels
            }
            _ => f,
        })
    }

    /// Ordered parameter names and shapes.
    pub fn param_specs(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.stage_shapes()?;
        let mut specs = Vec::new();
        let mut c_in = self.input[0];
        for (i, s) in self.stages.iter().enumerate() {
            specs.push((format!("stage{i}.weight"), vec![s.channels_out, c_in, 3, 3]));
            specs.push((format!("stage{i}.bias"), vec![s.channels_out]));
            c_in = s.channels_out;
        }
        if self.temporal_path == TemporalPath::Cidc {
            let tapped = &shapes[shapes.len() - TAPPED_STAGES..];
            for (bi, (b, s)) in self.branches.iter().zip(tapped).enumerate() {
                let mut unit_in = (s[0], b.t_in);
                for u in 0..b.unit_count {
                    for dir in directions(b) {
                        let p = format!("branch{bi}.unit{u}.{}", dir_tag(*dir));
                        specs.push((format!("{p}.k"), vec![unit_in.0, b.t_out, unit_in.1]));
                        specs.push((format!("{p}.mix_weights"), vec![b.channels, unit_in.0]));
                        specs.push((format!("{p}.mix_bias"), vec![b.channels]));
                    }
                    unit_in = (b.channels, b.output_steps());
                }
            }
            for i in 1..TAPPED_STAGES {
                let (from, to) = (self.branches[i - 1].channels, self.branches[i].channels);
                specs.push((format!("agg{i}.weight"), vec![to, from]));
                specs.push((format!("agg{i}.bias"), vec![to]));
            }
        }
        let h = self.head_inputs()?;
        specs.push(("head.weight".into(), vec![self.classes, h]));
        specs.push(("head.bias".into(), vec![self.classes]));
        Ok(specs)
    }
}

fn directions(b: &BranchConfig) -> &'static [Direction] {
    if b.bidirectional {
        &[Direction::Forward, Direction::Backward]
    } else {
        &[Direction::Forward]
    }
}

fn dir_tag(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "fwd",
        Direction::Backward => "bwd",
    }
}

/// Integer pooling factor taking `hi`'s spatial extents onto `lo`'s (ceil mode).
fn pool_factor(hi: [usize; 4], lo: [usize; 4]) -> Result<usize> {
    (1..=hi[2].max(hi[3]))
        .find(|&f| hi[2].div_ceil(f) == lo[2] && hi[3].div_ceil(f) == lo[3])
        .map_or_else(
            || {
                dim_err(format!(
                    "no integer pooling ratio maps {}x{} onto {}x{}",
                    hi[2], hi[3], lo[2], lo[3]
                ))
            },
            Ok,
        )
}

/// Learnable parameters, in [`ModelConfig::param_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Model {
    /// Fan-in scaled uniform initialization; all biases start at zero.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs()?;
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let t = if name.ends_with("bias") {
                Tensor::zeros(&shape)?
            } else if name.ends_with(".k") {
                let [c, r, s] = [shape[0], shape[1], shape[2]];
                CidcParams::init(c, 1, r, s, Direction::Forward, MaskMode::Open, rng)?.k
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("stage") { 6.0 } else { 3.0 };
                let bound = (gain / fan_in as f64).sqrt();
                let n = shape.iter().product();
                Tensor::from_vec(
                    &shape,
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                )?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    /// Assemble from named tensors; names and shapes must match the config.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs()?;
        if specs.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, shape), (n, t)) in specs.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Everything recorded by one forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    /// One leaf per model parameter, in model order.
    pub params: Vec<Var>,
    /// Backbone stage outputs, high to low resolution.
    pub stages: Vec<Var>,
    /// Aggregated CIDC path output, absent for the pooling control.
    pub cidc: Option<Var>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }
}

struct ParamVars<'a> {
    index: HashMap<&'a str, Var>,
}

impl ParamVars<'_> {
    fn get(&self, name: &str) -> Var {
        self.index[name]
    }

    fn unit(&self, prefix: &str) -> UnitVars {
        UnitVars {
            k: self.get(&format!("{prefix}.k")),
            mix_weights: self.get(&format!("{prefix}.mix_weights")),
            mix_bias: self.get(&format!("{prefix}.mix_bias")),
        }
    }
}

/// Record the toy backbone. Temporal stride 2 averages adjacent frame pairs
/// before the stage's convolution.
pub fn backbone_on_graph(
    g: &mut Graph,
    clip: Var,
    config: &ModelConfig,
    weights: &[(Var, Var)],
) -> Result<Vec<Var>> {
    let mut x = clip;
    let mut outs = Vec::with_capacity(config.stages.len());
    for (s, &(w, b)) in config.stages.iter().zip(weights) {
        if s.temporal_stride == 2 {
            x = g.temporal_pool(x, 2)?;
        }
        x = g.conv3x3(x, w, b, s.spatial_stride)?;
        x = g.relu(x)?;
        outs.push(x);
    }
    Ok(outs)
}

/// Stage outputs of the backbone for `clip`, high to low resolution.
pub fn backbone_forward(clip: &Tensor, model: &Model) -> Result<Vec<Tensor>> {
    check_clip(clip, &model.config)?;
    let mut g = Graph::new();
    let x = g.leaf(clip.clone());
    let weights: Vec<(Var, Var)> = (0..model.config.stages.len())
        .map(|i| {
            (
                g.leaf(
                    model
                        .param(&format!("stage{i}.weight"))
                        .expect("stage weight")
                        .clone(),
                ),
                g.leaf(
                    model
                        .param(&format!("stage{i}.bias"))
                        .expect("stage bias")
                        .clone(),
                ),
            )
        })
        .collect();
    let outs = backbone_on_graph(&mut g, x, &model.config, &weights)?;
    Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
}

fn check_clip(clip: &Tensor, config: &ModelConfig) -> Result<()> {
    if clip.dims4()? != config.input {
        return dim_err(format!(
            "clip {:?} does not match configured input {:?}",
            clip.shape(),
            config.input
        ));
    }
    Ok(())
}

/// `avg_pool_spatial(f_hi) -> pointwise projection -> + f_lo`.
pub fn cross_scale_aggregate(
    f_hi: &Tensor,
    f_lo: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let factor = pool_factor(f_hi.dims4()?, f_lo.dims4()?)?;
    let projected = pointwise_conv(&avg_pool_spatial(f_hi, factor)?, weights, bias)?;
    projected.add(f_lo)
}

fn aggregate_on_graph(g: &mut Graph, hi: Var, lo: Var, w: Var, b: Var) -> Result<Var> {
    let factor = pool_factor(g.value(hi).dims4()?, g.value(lo).dims4()?)?;
    let pooled = g.avg_pool_spatial(hi, factor)?;
    let projected = g.pointwise_conv(pooled, w, b)?;
    g.add(projected, lo)
}

fn fusion_axis(mode: FusionMode) -> Option<usize> {
    match mode {
        FusionMode::ConcatT => Some(1),
        FusionMode::ConcatC => Some(0),
        FusionMode::Sum => None,
    }
}

/// Combine backbone features `f` with CIDC features.
pub fn fuse(f: &Tensor, f_cidc: &Tensor, mode: FusionMode) -> Result<Tensor> {
    Ok(fuse_dual(f, f_cidc, mode)?.output)
}

pub fn fuse_dual(f: &Tensor, f_cidc: &Tensor, mode: FusionMode) -> Result<DualResult> {
    f_cidc.dims4()?;
    let [c, t, w, h] = f.dims4()?;
    let o = f_cidc.shape();
    let ok = match mode {
        FusionMode::Sum => f.shape() == o,
        FusionMode::ConcatT => o[0] == c && o[2] == w && o[3] == h,
        FusionMode::ConcatC => o[1] == t && o[2] == w && o[3] == h,
    };
    if !ok {
        return dim_err(format!("fusion {mode} of {:?} with {o:?}", f.shape()));
    }
    match fusion_axis(mode) {
        Some(axis) => crate::ops::concat_dual(&[f, f_cidc], axis),
        None => crate::ops::add_dual(f, f_cidc),
    }
}

/// Record the full network for one clip.
pub fn forward_on_graph(
    model: &Model,
    clip: &Tensor,
    rng: &mut impl Rng,
    train: bool,
) -> Result<ForwardPass> {
    let cfg = &model.config;
    check_clip(clip, cfg)?;
    let mut g = Graph::new();
    let input = g.leaf(clip.clone());
    let params: Vec<Var> = model.tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let pv = ParamVars {
        index: model
            .names
            .iter()
            .map(String::as_str)
            .zip(params.iter().copied())
            .collect(),
    };

    let stage_weights: Vec<(Var, Var)> = (0..cfg.stages.len())
        .map(|i| {
            (
                pv.get(&format!("stage{i}.weight")),
                pv.get(&format!("stage{i}.bias")),
            )
        })
        .collect();
    let stages = backbone_on_graph(&mut g, input, cfg, &stage_weights)?;
    let deepest = *stages.last().expect("at least one stage");

    let (fused, cidc) = match cfg.temporal_path {
        TemporalPath::Pooling => (deepest, None),
        TemporalPath::Cidc => {
            let tapped = &stages[stages.len() - TAPPED_STAGES..];
            let mut agg: Option<Var> = None;
            for (bi, (branch, &feat)) in cfg.branches.iter().zip(tapped).enumerate() {
                let mut x = if bi + 1 < TAPPED_STAGES {
                    g.apply(&[deepest, feat], |v| {
                        attention::attention_propagate_dual(v[0], v[1])
                    })?
                } else {
                    feat
                };
                for u in 0..branch.unit_count {
                    x = branch_unit(&mut g, &pv, cfg, branch, bi, u, x)?;
                    x = g.relu(x)?;
                }
                agg = Some(match agg {
                    None => x,
                    Some(prev) => aggregate_on_graph(
                        &mut g,
                        prev,
                        x,
                        pv.get(&format!("agg{bi}.weight")),
                        pv.get(&format!("agg{bi}.bias")),
                    )?,
                });
            }
            let f_cidc = agg.expect("three branches");
            let mode = cfg.fusion;
            let fused = g.apply(&[deepest, f_cidc], |v| fuse_dual(v[0], v[1], mode))?;
            (fused, Some(f_cidc))
        }
    };

    let pooled = g.global_avg_pool(fused)?;
    let dropped = g.dropout(pooled, cfg.dropout, rng, train)?;
    let logits = g.linear(dropped, pv.get("head.weight"), pv.get("head.bias"))?;
    Ok(ForwardPass {
        graph: g,
        logits,
        params,
        stages,
        cidc,
    })
}

fn branch_unit(
    g: &mut Graph,
    pv: &ParamVars<'_>,
    cfg: &ModelConfig,
    branch: &BranchConfig,
    bi: usize,
    u: usize,
    x: Var,
) -> Result<Var> {
    let unit_mask = |g: &Graph, vars: UnitVars| -> Result<_> {
        let k = g.value(vars.k).shape();
        cfg.mask_mode.build(k[1], k[2])
    };
    if branch.bidirectional {
        let fv = pv.unit(&format!("branch{bi}.unit{u}.fwd"));
        let bv = pv.unit(&format!("branch{bi}.unit{u}.bwd"));
        let mask = unit_mask(g, fv)?;
        let a = unit_on_graph(g, x, fv, Direction::Forward, &mask)?;
        let b = unit_on_graph(g, x, bv, Direction::Backward, &mask)?;
        g.concat(&[a, b], 1)
    } else {
        let fv = pv.unit(&format!("branch{bi}.unit{u}.fwd"));
        let mask = unit_mask(g, fv)?;
        unit_on_graph(g, x, fv, Direction::Forward, &mask)
    }
}

/// Class logits for one clip.
pub fn multiscale_cidc_forward(
    clip: &Tensor,
    model: &Model,
    rng: &mut impl Rng,
    train: bool,
) -> Result<Tensor> {
    Ok(forward_on_graph(model, clip, rng, train)?.logits().clone())
}

/// Cross-entropy loss, its gradient for every parameter, and the logits.
pub fn loss_and_gradients(
    model: &Model,
    clip: &Tensor,
    label: usize,
    rng: &mut impl Rng,
    train: bool,
) -> Result<(f64, Vec<Tensor>, Tensor)> {
    let mut pass = forward_on_graph(model, clip, rng, train)?;
    let loss = pass.graph.cross_entropy(pass.logits, label)?;
    let mut grads = pass.graph.backward(loss, Tensor::scalar(1.0))?;
    let value = pass.graph.value(loss).data()[0];
    let per_param = pass
        .params
        .iter()
        .zip(&model.tensors)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(t)))
        .collect();
    Ok((value, per_param, pass.logits().clone()))
}
