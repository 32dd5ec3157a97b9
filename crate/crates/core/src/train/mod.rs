//! Synthetic temporal-order task, optimizer, training loop and the
//! directional-modelling ablation.

pub mod data;
pub mod optim;

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::network::{
    loss_and_gradients, multiscale_cidc_forward, DirectionMode, FusionMode, Model, ModelConfig,
};
use crate::tensor::Tensor;
use data::{generate_splits, ClipRecord, ClipSpec, CLASSES};
use optim::{sgd_step, OptimState, SgdConfig};

pub const DEFAULT_SEED: u64 = 20_200_823;

/// Variant trained by [`train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cidc(DirectionMode),
    /// Backbone features pooled over time; cannot see temporal order.
    PoolingControl,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Cidc(d) => write!(f, "{d}"),
            Variant::PoolingControl => f.write_str("pool"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub sgd: SgdConfig,
    pub variant: Variant,
    pub fusion: FusionMode,
    pub dropout: f64,
    pub frames: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for TrainConfig {
    /// Desk scale: 2000/400 clips, batch 16, 30 epochs with decay at 20 and 26.
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            epochs: 30,
            batch: 16,
            train_size: 2000,
            val_size: 400,
            sgd: SgdConfig {
                decay_epochs: vec![20, 26],
                ..SgdConfig::default()
            },
            variant: Variant::Cidc(DirectionMode::Bi),
            fusion: FusionMode::ConcatT,
            dropout: 0.6,
            frames: data::DEFAULT_FRAMES,
            size: data::DEFAULT_SIZE,
            noise: data::DEFAULT_NOISE,
        }
    }
}

impl TrainConfig {
    pub fn clip_spec(&self) -> ClipSpec {
        ClipSpec {
            frames: self.frames,
            size: self.size,
            noise: self.noise,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let input = [1, self.frames, self.size, self.size];
        let direction = match self.variant {
            Variant::Cidc(d) => d,
            Variant::PoolingControl => DirectionMode::Uni,
        };
        let mut cfg = ModelConfig::toy(input, direction, self.fusion)?;
        if self.variant == Variant::PoolingControl {
            cfg = cfg.pooling_control();
        }
        cfg.dropout = self.dropout;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return arg_err("batch and epochs must be positive");
        }
        if self.train_size == 0 || self.val_size == 0 {
            return arg_err("dataset sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Accuracy breakdown on a labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Binary accuracy between classes 0 and 1 (left-to-right vs right-to-left).
    pub pair_01: f64,
    /// Binary accuracy between classes 2 and 3.
    pub pair_23: f64,
    /// Accuracy of the predicted motion axis ({0,1} vs {2,3}).
    pub axis: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub final_eval: Evaluation,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Evaluate `model` in inference mode.
pub fn evaluate(model: &Model, records: &[ClipRecord]) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut class_hits = [0usize; CLASSES];
    let mut class_total = [0usize; CLASSES];
    let mut pair = [[0usize; 2]; 2];
    let mut axis_hits = 0usize;
    for r in records {
        let logits = multiscale_cidc_forward(&r.clip, model, &mut rng, false)?;
        loss += crate::ops::softmax_cross_entropy(&logits, r.label)?;
        let l = logits.data();
        let pred = argmax(l);
        class_total[r.label] += 1;
        if pred == r.label {
            correct += 1;
            class_hits[r.label] += 1;
        }
        if pred / 2 == r.label / 2 {
            axis_hits += 1;
        }
        let base = r.label / 2 * 2;
        let partner = base + 1 - (r.label - base);
        pair[r.label / 2][0] += usize::from(l[r.label] > l[partner]);
        pair[r.label / 2][1] += 1;
    }
    let n = records.len().max(1) as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        per_class: (0..CLASSES)
            .map(|c| ratio(class_hits[c], class_total[c]))
            .collect(),
        pair_01: ratio(pair[0][0], pair[0][1]),
        pair_23: ratio(pair[1][0], pair[1][1]),
        axis: axis_hits as f64 / n,
    })
}

/// Mean loss, summed parameter gradients and correct count over a batch.
///
/// Clips are processed in index order so the reduction is reproducible.
fn batch_gradients(
    model: &Model,
    batch: &[&ClipRecord],
    seed: u64,
    epoch: usize,
    first_index: usize,
) -> Result<(f64, Vec<Tensor>, usize)> {
    let mut sum: Vec<Tensor> = model.params().iter().map(Tensor::zeros_like).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, r) in batch.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, (first_index + i) as u64));
        let (l, grads, logits) = loss_and_gradients(model, &r.clip, r.label, &mut rng, true)?;
        if !l.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at epoch {epoch}"
            )));
        }
        loss += l;
        correct += usize::from(argmax(logits.data()) == r.label);
        for (acc, g) in sum.iter_mut().zip(&grads) {
            acc.accumulate(g)?;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut sum {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    Ok((loss, sum, correct))
}

/// Train on pre-generated splits; `on_epoch` sees each epoch's statistics.
pub fn train_on(
    config: &TrainConfig,
    train_set: &[ClipRecord],
    val_set: &[ClipRecord],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(3);
    let mut model = Model::init(config.model_config()?, &mut init_rng)?;
    let mut state = OptimState::new(config.sgd.clone(), model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(4);

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        state.set_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&ClipRecord> = idx.iter().map(|&i| &train_set[i]).collect();
            let (l, grads, c) =
                batch_gradients(&model, &batch, config.seed, epoch, b * config.batch)?;
            sgd_step(model.params_mut(), &grads, &mut state)?;
            loss += l;
            correct += c;
        }
        let val = evaluate(&model, val_set)?;
        let stats = EpochStats {
            epoch,
            loss: loss / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc: val.accuracy,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    let final_eval = evaluate(&model, val_set)?;
    Ok(TrainOutcome {
        model,
        history,
        final_eval,
    })
}

/// Generate the synthetic splits for `config.seed` and train.
pub fn train(config: &TrainConfig, on_epoch: impl FnMut(&EpochStats)) -> Result<TrainOutcome> {
    let (train_set, val_set) = generate_splits(
        config.seed,
        config.train_size,
        config.val_size,
        config.clip_spec(),
    )?;
    train_on(config, &train_set, &val_set, on_epoch)
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,train_acc,val_acc\n");
    for e in history {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.loss, e.train_acc, e.val_acc);
    }
    s
}

pub fn write_history(mut out: impl Write, history: &[EpochStats]) -> Result<()> {
    out.write_all(history_csv(history).as_bytes())?;
    Ok(())
}

/// Variants compared by the ablation, in report order.
pub const ABLATION_VARIANTS: [Variant; 4] = [
    Variant::Cidc(DirectionMode::Non),
    Variant::Cidc(DirectionMode::Uni),
    Variant::Cidc(DirectionMode::Bi),
    Variant::PoolingControl,
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub eval: Evaluation,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

/// Mean and half-range of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub spread: f64,
}

impl AblationTable {
    pub fn metric(&self, variant: Variant, f: impl Fn(&Evaluation) -> f64) -> Option<Spread> {
        let vals: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| f(&r.eval))
            .collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Spread {
            mean,
            spread: (hi - lo) / 2.0,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,seed,accuracy,pair_01,pair_23,axis,class0,class1,class2,class3\n",
        );
        for r in &self.runs {
            let e = &r.eval;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                e.accuracy,
                e.pair_01,
                e.pair_23,
                e.axis,
                e.per_class
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            );
        }
        s
    }

    /// One line per variant: mean ± half-range across seeds.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:<6} {:>16} {:>16} {:>16} {:>16}\n",
            "model", "accuracy", "pair 0v1", "pair 2v3", "axis"
        );
        for v in ABLATION_VARIANTS {
            let cols: Vec<String> = [
                self.metric(v, |e| e.accuracy),
                self.metric(v, |e| e.pair_01),
                self.metric(v, |e| e.pair_23),
                self.metric(v, |e| e.axis),
            ]
            .iter()
            .map(|m| m.map_or("-".into(), |m| format!("{:.3} ± {:.3}", m.mean, m.spread)))
            .collect();
            let _ = writeln!(
                s,
                "{:<6} {:>16} {:>16} {:>16} {:>16}",
                v.to_string(),
                cols[0],
                cols[1],
                cols[2],
                cols[3]
            );
        }
        s
    }
}

/// Train every ablation variant for every seed; `on_run` sees each result.
pub fn ablate_directions(
    base: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun, &TrainOutcome),
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &seed in seeds {
        let (train_set, val_set) =
            generate_splits(seed, base.train_size, base.val_size, base.clip_spec())?;
        for variant in ABLATION_VARIANTS {
            let cfg = TrainConfig {
                seed,
                variant,
                ..base.clone()
            };
            let outcome = train_on(&cfg, &train_set, &val_set, |_| {})?;
            let run = AblationRun {
                variant,
                seed,
                eval: outcome.final_eval.clone(),
            };
            on_run(&run, &outcome);
            table.runs.push(run);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_run_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 1,
            train_size: 8,
            val_size: 4,
            batch: 4,
            frames: 4,
            size: 12,
            ..TrainConfig::default()
        };
        let a = train(&cfg, |_| {}).unwrap();
        let b = train(&cfg, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(history_csv(&a.history).lines().count(), 2);
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(1, 0, 1), mix_seed(1, 1, 0));
        assert_eq!(mix_seed(7, 3, 4), mix_seed(7, 3, 4));
    }
}
