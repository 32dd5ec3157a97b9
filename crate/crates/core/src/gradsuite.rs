//! The gradient-check suite: every differentiable operation, each over many
//! random seeds, plus the end-to-end network loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cidc::{
    build_directional_mask, cidc_apply_dual, normalize_kernel_dual, unit_on_graph, Direction,
    MaskMatrix, UnitVars,
};
use crate::error::Result;
use crate::network::attention::attention_propagate_dual;
use crate::network::{
    forward_on_graph, fuse_dual, DirectionMode, FusionMode, Model, ModelConfig, StageConfig,
};
use crate::ops::gradcheck::{
    grad_check, grad_check_piecewise, grad_check_where, GradCheckReport, Worst,
};
use crate::ops::graph::{Graph, Var};
use crate::ops::{self, DualResult};
use crate::tensor::Tensor;

/// Tolerance for primitive operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the end-to-end network gradient.
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const EPSILON: f64 = 1e-5;
pub const OP_SEEDS: u64 = 20;
/// Logit offset given to the true class in the end-to-end check.
pub const CONFIDENCE_MARGIN: f64 = 5.0;
pub const MODEL_SEEDS: u64 = 20;

pub type CaseFn = Box<dyn Fn(u64) -> Result<GradCheckReport>>;

/// A named check, run once per seed.
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub seeds: u64,
    pub run: CaseFn,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: u64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst: Option<Worst>,
    pub checked: usize,
    /// Probes dropped as straddling a kink.
    pub skipped: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("positive extents")
}

/// Wrap a graph-building closure as a single dual operation over `inputs`.
pub fn graph_dual(
    inputs: &[Tensor],
    build: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<DualResult> {
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let output = g.value(out).clone();
    Ok(DualResult::new(
        output,
        Box::new(move |up| {
            let grads = g.backward(out, up.clone())?;
            Ok(leaves
                .iter()
                .map(|&v| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros_like(g.value(v)))
                })
                .collect())
        }),
    ))
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xC1DC_0000 + seed)
}

fn case(name: &'static str, run: impl Fn(u64) -> Result<GradCheckReport> + 'static) -> GradCase {
    GradCase {
        name,
        tolerance: OP_TOLERANCE,
        seeds: OP_SEEDS,
        run: Box::new(run),
    }
}

/// Small model used for the end-to-end check on a `2 x 4 x 9 x 9` clip.
pub fn gradcheck_model_config(direction: DirectionMode, fusion: FusionMode) -> Result<ModelConfig> {
    let stages = vec![
        StageConfig {
            channels_out: 3,
            spatial_stride: 2,
            temporal_stride: 1,
        },
        StageConfig {
            channels_out: 4,
            spatial_stride: 2,
            temporal_stride: 1,
        },
        StageConfig {
            channels_out: 5,
            spatial_stride: 2,
            temporal_stride: 2,
        },
    ];
    let mut cfg = ModelConfig::with_stages([2, 4, 9, 9], stages, direction, fusion)?;
    cfg.dropout = 0.5;
    Ok(cfg)
}

/// End-to-end check of the training loss for one seed.
pub fn check_model(
    seed: u64,
    direction: DirectionMode,
    fusion: FusionMode,
) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed);
    let mut model = Model::init(gradcheck_model_config(direction, fusion)?, &mut rng)?;
    // Spread logits and biases away from zero so every path carries signal.
    for (name, p) in model.names().to_vec().iter().zip(model.params_mut()) {
        if name.ends_with("bias") {
            *p = p.map(|_| rng.gen_range(-0.2..0.2));
        } else if name.ends_with(".k") {
            *p = p.map(|_| rng.gen_range(-1.0..1.0));
        }
    }
    let clip = random_tensor(&[2, 4, 9, 9], &mut rng);
    let label = rng.gen_range(0..4);
    // A confident operating point keeps the loss near 0.02, so one ulp of it
    // stays far below what the tolerance must resolve on near-zero gradients.
    model.param_mut("head.bias").expect("head bias").data_mut()[label] += CONFIDENCE_MARGIN;
    let dropout_seed = rng.gen::<u64>();
    let names = model.names().to_vec();
    let config = model.config.clone();
    let op = move |params: &[Tensor]| -> Result<DualResult> {
        let named = names.iter().cloned().zip(params.iter().cloned()).collect();
        let m = Model::from_parts(config.clone(), named)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut pass = forward_on_graph(&m, &clip, &mut drop_rng, true)?;
        let loss = pass.graph.cross_entropy(pass.logits, label)?;
        let output = pass.graph.value(loss).clone();
        let leaves = pass.params.clone();
        let graph = pass.graph;
        Ok(DualResult::new(
            output,
            Box::new(move |up| {
                let grads = graph.backward(loss, up.clone())?;
                Ok(leaves
                    .iter()
                    .map(|&v| {
                        grads
                            .get(v)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros_like(graph.value(v)))
                    })
                    .collect())
            }),
        ))
    };
    grad_check_piecewise(op, model.params(), EPSILON, MODEL_TOLERANCE)
}

fn strict_mask(n: usize) -> MaskMatrix {
    build_directional_mask(n, n).expect("square mask")
}

/// Every primitive and composite operation, then the end-to-end model.
pub fn standard_cases() -> Vec<GradCase> {
    let mut cases = vec![
        case("masked_softmax_rows", |s| {
            let mut rng = rng_for(s);
            let mask = strict_mask(4);
            grad_check(
                move |x| ops::masked_softmax_rows_dual(&x[0], &mask),
                &[random_tensor(&[4, 4], &mut rng).scale(2.0)],
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("pointwise_conv", |s| {
            let mut rng = rng_for(s);
            let inputs = [
                random_tensor(&[3, 2, 3, 2], &mut rng),
                random_tensor(&[4, 3], &mut rng),
                random_tensor(&[4], &mut rng),
            ];
            grad_check(
                |x| ops::pointwise_conv_dual(&x[0], &x[1], &x[2]),
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("spatial_conv3x3", |s| {
            let mut rng = rng_for(s);
            let stride = 1 + (s as usize % 2);
            let inputs = [
                random_tensor(&[2, 2, 5, 4], &mut rng),
                random_tensor(&[3, 2, 3, 3], &mut rng),
                random_tensor(&[3], &mut rng),
            ];
            grad_check(
                move |x| ops::spatial_conv3x3_dual(&x[0], &x[1], &x[2], stride),
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("relu", |s| {
            let mut rng = rng_for(s);
            let x = random_tensor(&[40], &mut rng);
            let keep: Vec<bool> = x.data().iter().map(|v| v.abs() > 0.1).collect();
            grad_check_where(
                |x| Ok(ops::relu_dual(&x[0])),
                &[x],
                EPSILON,
                OP_TOLERANCE,
                |_, e| keep[e],
            )
        }),
        case("avg_pool_spatial", |s| {
            let mut rng = rng_for(s);
            grad_check(
                |x| ops::avg_pool_spatial_dual(&x[0], 2),
                &[random_tensor(&[2, 2, 5, 4], &mut rng)],
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("temporal_pool", |s| {
            let mut rng = rng_for(s);
            grad_check(
                |x| ops::temporal_pool_dual(&x[0], 2),
                &[random_tensor(&[2, 5, 2, 2], &mut rng)],
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("global_avg_pool", |s| {
            let mut rng = rng_for(s);
            grad_check(
                |x| Ok(ops::global_avg_pool_dual(&x[0])),
                &[random_tensor(&[3, 2, 2, 3], &mut rng)],
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("dropout", |s| {
            let mut rng = rng_for(s);
            let x = random_tensor(&[30], &mut rng);
            grad_check(
                move |x| ops::dropout_dual(&x[0], 0.6, &mut ChaCha8Rng::seed_from_u64(s), true),
                &[x],
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("linear", |s| {
            let mut rng = rng_for(s);
            let inputs = [
                random_tensor(&[3], &mut rng),
                random_tensor(&[4, 3], &mut rng),
                random_tensor(&[4], &mut rng),
            ];
            grad_check(
                |x| ops::linear_dual(&x[0], &x[1], &x[2]),
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("softmax_cross_entropy", |s| {
            let mut rng = rng_for(s);
            let label = rng.gen_range(0..4);
            grad_check(
                move |x| ops::softmax_cross_entropy_dual(&x[0], label),
                &[random_tensor(&[4], &mut rng).scale(3.0)],
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("flip_axis", |s| {
            let mut rng = rng_for(s);
            grad_check(
                |x| ops::flip_axis_dual(&x[0], 1),
                &[random_tensor(&[2, 3, 2, 2], &mut rng)],
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("normalize_kernel", |s| {
            let mut rng = rng_for(s);
            let (t_out, t_in) = [(4, 4), (2, 4), (4, 8), (3, 3)][s as usize % 4];
            let mask = build_directional_mask(t_out, t_in)?;
            grad_check(
                move |x| normalize_kernel_dual(&x[0], &mask),
                &[random_tensor(&[2, t_out, t_in], &mut rng)],
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("cidc_apply", |s| {
            let mut rng = rng_for(s);
            let inputs = [
                random_tensor(&[3, 4, 2, 2], &mut rng),
                random_tensor(&[3, 2, 4], &mut rng),
            ];
            grad_check(
                |x| cidc_apply_dual(&x[0], &x[1]),
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("cidc_unit", |s| {
            let mut rng = rng_for(s);
            let direction = if s % 2 == 0 {
                Direction::Forward
            } else {
                Direction::Backward
            };
            let mask = build_directional_mask(3, 4)?;
            let inputs = [
                random_tensor(&[2, 4, 2, 2], &mut rng),
                random_tensor(&[2, 3, 4], &mut rng),
                random_tensor(&[3, 2], &mut rng),
                random_tensor(&[3], &mut rng),
            ];
            grad_check(
                move |x| {
                    graph_dual(x, |g, v| {
                        let vars = UnitVars {
                            k: v[1],
                            mix_weights: v[2],
                            mix_bias: v[3],
                        };
                        unit_on_graph(g, v[0], vars, direction, &mask)
                    })
                },
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("bidirectional_cidc", |s| {
            let mut rng = rng_for(s);
            let mask = strict_mask(3);
            let mut inputs = vec![random_tensor(&[2, 3, 2, 1], &mut rng)];
            for _ in 0..2 {
                inputs.push(random_tensor(&[2, 3, 3], &mut rng));
                inputs.push(random_tensor(&[2, 2], &mut rng));
                inputs.push(random_tensor(&[2], &mut rng));
            }
            grad_check(
                move |x| {
                    graph_dual(x, |g, v| {
                        let fwd = UnitVars {
                            k: v[1],
                            mix_weights: v[2],
                            mix_bias: v[3],
                        };
                        let bwd = UnitVars {
                            k: v[4],
                            mix_weights: v[5],
                            mix_bias: v[6],
                        };
                        let a = unit_on_graph(g, v[0], fwd, Direction::Forward, &mask)?;
                        let b = unit_on_graph(g, v[0], bwd, Direction::Backward, &mask)?;
                        g.concat(&[a, b], 1)
                    })
                },
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("attention_propagate", |s| {
            let mut rng = rng_for(s);
            let inputs = [
                random_tensor(&[3, 2, 3, 2], &mut rng).scale(2.0),
                random_tensor(&[2, 4, 5, 4], &mut rng),
            ];
            grad_check(
                |x| attention_propagate_dual(&x[0], &x[1]),
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("cross_scale_aggregate", |s| {
            let mut rng = rng_for(s);
            let inputs = [
                random_tensor(&[2, 2, 5, 5], &mut rng),
                random_tensor(&[3, 2, 3, 3], &mut rng),
                random_tensor(&[3, 2], &mut rng),
                random_tensor(&[3], &mut rng),
            ];
            grad_check(
                |x| {
                    graph_dual(x, |g, v| {
                        let pooled = g.avg_pool_spatial(v[0], 2)?;
                        let projected = g.pointwise_conv(pooled, v[2], v[3])?;
                        g.add(projected, v[1])
                    })
                },
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
        case("fuse", |s| {
            let mut rng = rng_for(s);
            let (mode, other) = match s % 3 {
                0 => (FusionMode::ConcatT, [2, 3, 2, 2]),
                1 => (FusionMode::ConcatC, [4, 2, 2, 2]),
                _ => (FusionMode::Sum, [2, 2, 2, 2]),
            };
            let inputs = [
                random_tensor(&[2, 2, 2, 2], &mut rng),
                random_tensor(&other, &mut rng),
            ];
            grad_check(
                move |x| fuse_dual(&x[0], &x[1], mode),
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
    ];
    cases.push(GradCase {
        name: "end_to_end",
        tolerance: MODEL_TOLERANCE,
        seeds: MODEL_SEEDS,
        run: Box::new(|s| {
            let direction =
                [DirectionMode::Bi, DirectionMode::Uni, DirectionMode::Non][s as usize % 3];
            check_model(s, direction, FusionMode::ConcatT)
        }),
    });
    cases
}

/// Run each case over its seeds, keeping the worst report.
pub fn run_cases(
    cases: &[GradCase],
    mut on_case: impl FnMut(&CaseResult),
) -> Result<Vec<CaseResult>> {
    let mut results = Vec::with_capacity(cases.len());
    for c in cases {
        let mut res = CaseResult {
            name: c.name,
            seeds: c.seeds,
            tolerance: c.tolerance,
            max_rel_error: 0.0,
            worst_seed: 0,
            worst: None,
            checked: 0,
            skipped: 0,
        };
        for seed in 0..c.seeds {
            let r = (c.run)(seed)?;
            res.checked += r.checked;
            res.skipped += r.skipped;
            if r.max_rel_error > res.max_rel_error || res.worst.is_none() {
                res.max_rel_error = res.max_rel_error.max(r.max_rel_error);
                res.worst_seed = seed;
                res.worst = r.worst;
            }
        }
        on_case(&res);
        results.push(res);
    }
    Ok(results)
}

pub fn results_csv(results: &[CaseResult]) -> String {
    let mut s = String::from("op,seeds,checked,skipped,max_rel_error,tolerance,passed,worst_seed,worst_input,worst_element\n");
    for r in results {
        let (input, element) = r
            .worst
            .as_ref()
            .map_or((String::new(), String::new()), |w| {
                (w.input.to_string(), w.element.to_string())
            });
        s.push_str(&format!(
            "{},{},{},{},{:e},{:e},{},{},{},{}\n",
            r.name,
            r.seeds,
            r.checked,
            r.skipped,
            r.max_rel_error,
            r.tolerance,
            r.passed(),
            r.worst_seed,
            input,
            element
        ));
    }
    s
}
