//! Command-line entry point: gradient checks, training, ablation, attention
//! export and dataset generation.
//!
//! Exit statuses: 0 success, 1 validation or runtime failure, 2 argument error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::gradsuite::{self, CaseResult, GradCase};
use crate::network::attention::spatial_attention_map;
use crate::network::checkpoint::{load_checkpoint, save_checkpoint};
use crate::network::{forward_on_graph, DirectionMode, FusionMode, Model};
use crate::tensor::{bilinear_resize_2d, Tensor};
use crate::train::data::{
    generate_splits, load_dataset, save_dataset, square_centers, validation_clip, ClipRecord,
};
use crate::train::{
    ablate_directions, history_csv, train, train_on, TrainConfig, Variant, DEFAULT_SEED,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Failure of a command, mapped onto an exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Argument(_)) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "cidc",
    version,
    about = "Channel independent directional convolution toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check every analytic gradient against central differences.
    Gradcheck(Flags),
    /// Train one model; writes history.csv and model.json/model.bin.
    Train(Flags),
    /// Train non/uni/bi and the pooling control over several seeds.
    Ablate(Flags),
    /// Export the spatial attention of a trained model for one clip.
    Attention(Flags),
    /// Write the synthetic train/val splits in the binary dataset format.
    Dataset(Flags),
}

/// Flags shared by every subcommand. Unset flags fall back to the config
/// file, then to built-in defaults.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plain-text key=value file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// concat_t, concat_c or sum.
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    /// non, uni or bi.
    #[arg(long)]
    pub direction: Option<DirectionMode>,
    /// Train the order-invariant pooling control instead of a CIDC model.
    #[arg(long)]
    pub pooling: bool,
    /// Comma-separated gradient-check op names.
    #[arg(long)]
    pub ops: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub clip_index: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Number of ablation seeds, counted up from --seed.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Directory holding train.cidc and val.cidc.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

const CONFIG_KEYS: &[&str] = &[
    "seed",
    "out",
    "epochs",
    "batch",
    "lr",
    "fusion",
    "direction",
    "pooling",
    "ops",
    "checkpoint",
    "clip_index",
    "train_size",
    "val_size",
    "seeds",
    "dropout",
    "data",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| CliError::Usage(format!("config key {key}: {e}")))
}

/// Parse a key=value config file. Blank lines and `#` comments are skipped;
/// `-` and `_` are interchangeable in keys.
pub fn parse_config(text: &str) -> CliResult<Flags> {
    let mut seen = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        let key = k.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "config line {}: unknown key {key}",
                n + 1
            )));
        }
        seen.insert(key, v.trim().to_string());
    }
    let mut f = Flags::default();
    for (k, v) in &seen {
        match k.as_str() {
            "seed" => f.seed = Some(parse_value(k, v)?),
            "out" => f.out = Some(PathBuf::from(v)),
            "epochs" => f.epochs = Some(parse_value(k, v)?),
            "batch" => f.batch = Some(parse_value(k, v)?),
            "lr" => f.lr = Some(parse_value(k, v)?),
            "fusion" => f.fusion = Some(parse_value(k, v)?),
            "direction" => f.direction = Some(parse_value(k, v)?),
            "pooling" => f.pooling = parse_value(k, v)?,
            "ops" => f.ops = Some(v.clone()),
            "checkpoint" => f.checkpoint = Some(PathBuf::from(v)),
            "clip_index" => f.clip_index = Some(parse_value(k, v)?),
            "train_size" => f.train_size = Some(parse_value(k, v)?),
            "val_size" => f.val_size = Some(parse_value(k, v)?),
            "seeds" => f.seeds = Some(parse_value(k, v)?),
            "dropout" => f.dropout = Some(parse_value(k, v)?),
            "data" => f.data = Some(PathBuf::from(v)),
            _ => unreachable!("key list checked above"),
        }
    }
    Ok(f)
}

/// Command-line flags layered over config-file values.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub flags: Flags,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn resolve(cli: Flags) -> CliResult<Self> {
        let file = match &cli.config {
            Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", p.display()))
            })?)?,
            None => Flags::default(),
        };
        let flags = Flags {
            seed: cli.seed.or(file.seed),
            out: cli.out.or(file.out),
            config: cli.config,
            epochs: cli.epochs.or(file.epochs),
            batch: cli.batch.or(file.batch),
            lr: cli.lr.or(file.lr),
            fusion: cli.fusion.or(file.fusion),
            direction: cli.direction.or(file.direction),
            pooling: cli.pooling || file.pooling,
            ops: cli.ops.or(file.ops),
            checkpoint: cli.checkpoint.or(file.checkpoint),
            clip_index: cli.clip_index.or(file.clip_index),
            train_size: cli.train_size.or(file.train_size),
            val_size: cli.val_size.or(file.val_size),
            seeds: cli.seeds.or(file.seeds),
            dropout: cli.dropout.or(file.dropout),
            data: cli.data.or(file.data),
        };
        Ok(Self {
            seed: flags.seed.unwrap_or(DEFAULT_SEED),
            out: flags.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            flags,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let f = &self.flags;
        let mut c = TrainConfig {
            seed: self.seed,
            ..TrainConfig::default()
        };
        if let Some(v) = f.epochs {
            c.epochs = v;
        }
        if let Some(v) = f.batch {
            c.batch = v;
        }
        if let Some(v) = f.lr {
            c.sgd.lr = v;
        }
        if let Some(v) = f.fusion {
            c.fusion = v;
        }
        if let Some(v) = f.direction {
            c.variant = Variant::Cidc(v);
        }
        if f.pooling {
            c.variant = Variant::PoolingControl;
        }
        if let Some(v) = f.train_size {
            c.train_size = v;
        }
        if let Some(v) = f.val_size {
            c.val_size = v;
        }
        if let Some(v) = f.dropout {
            c.dropout = v;
        }
        c
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, console: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, console) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, console: &mut dyn Write) -> CliResult<i32> {
    match command {
        Command::Gradcheck(f) => cmd_gradcheck(&RunConfig::resolve(f)?, console),
        Command::Train(f) => cmd_train(&RunConfig::resolve(f)?, console),
        Command::Ablate(f) => cmd_ablate(&RunConfig::resolve(f)?, console),
        Command::Attention(f) => cmd_attention(&RunConfig::resolve(f)?, console).map(|_| EXIT_OK),
        Command::Dataset(f) => cmd_dataset(&RunConfig::resolve(f)?, console),
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig, console: &mut dyn Write) -> CliResult<i32> {
    let (code, _) = gradcheck_cases(gradsuite::standard_cases(), cfg, console)?;
    Ok(code)
}

/// Run `cases`, restricted by `--ops`, and write `gradcheck.csv`.
pub fn gradcheck_cases(
    cases: Vec<GradCase>,
    cfg: &RunConfig,
    console: &mut dyn Write,
) -> CliResult<(i32, Vec<CaseResult>)> {
    let cases = match &cfg.flags.ops {
        None => cases,
        Some(list) => {
            let wanted: Vec<&str> = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .collect();
            for w in &wanted {
                if !cases.iter().any(|c| c.name == *w) {
                    let known: Vec<&str> = cases.iter().map(|c| c.name).collect();
                    return Err(CliError::Usage(format!(
                        "unknown op {w}; known: {}",
                        known.join(", ")
                    )));
                }
            }
            cases
                .into_iter()
                .filter(|c| wanted.contains(&c.name))
                .collect()
        }
    };
    let results = gradsuite::run_cases(&cases, |r| {
        let _ = writeln!(
            console,
            "{:<24} {:>11.3e}  tol {:.0e}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    })?;
    let path = cfg.out_dir()?.join("gradcheck.csv");
    fs::write(&path, gradsuite::results_csv(&results))?;
    let failed: Vec<&CaseResult> = results.iter().filter(|r| !r.passed()).collect();
    for r in &failed {
        if let Some(w) = &r.worst {
            writeln!(
                console,
                "FAIL {}: seed {}, input {}, element {}: analytic {:e}, numeric {:e}",
                r.name, r.worst_seed, w.input, w.element, w.analytic, w.numeric
            )?;
        }
    }
    writeln!(console, "report: {}", path.display())?;
    let code = if failed.is_empty() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    };
    Ok((code, results))
}

fn load_splits(dir: &Path) -> CliResult<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    Ok((
        load_dataset(&dir.join("train.cidc"))?,
        load_dataset(&dir.join("val.cidc"))?,
    ))
}

pub fn cmd_train(cfg: &RunConfig, console: &mut dyn Write) -> CliResult<i32> {
    let tc = cfg.train_config();
    let out = cfg.out_dir()?.to_path_buf();
    let mut log = |e: &crate::train::EpochStats| {
        let _ = writeln!(
            console,
            "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}",
            e.epoch, e.loss, e.train_acc, e.val_acc
        );
    };
    let outcome = match &cfg.flags.data {
        Some(dir) => {
            let (tr, va) = load_splits(dir)?;
            train_on(&tc, &tr, &va, &mut log)?
        }
        None => train(&tc, &mut log)?,
    };
    fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    save_checkpoint(&outcome.model, &out.join("model.json"))?;
    writeln!(
        console,
        "final val accuracy: {:.4}",
        outcome.final_eval.accuracy
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_ablate(cfg: &RunConfig, console: &mut dyn Write) -> CliResult<i32> {
    let base = cfg.train_config();
    let n = cfg.flags.seeds.unwrap_or(3);
    if n == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.seed + i).collect();
    let out = cfg.out_dir()?.to_path_buf();
    let mut io_err = None;
    let table = ablate_directions(&base, &seeds, |run, outcome| {
        let _ = writeln!(
            console,
            "{:<5} seed {}  acc {:.3}  pair 0v1 {:.3}  pair 2v3 {:.3}",
            run.variant.to_string(),
            run.seed,
            run.eval.accuracy,
            run.eval.pair_01,
            run.eval.pair_23
        );
        let stem = format!("{}_seed{}", run.variant, run.seed);
        let res = fs::write(
            out.join(format!("{stem}_history.csv")),
            history_csv(&outcome.history),
        )
        .map_err(Error::from)
        .and_then(|_| save_checkpoint(&outcome.model, &out.join(format!("{stem}.json"))));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    let summary = table.summary();
    fs::write(out.join("ablation_summary.txt"), &summary)?;
    console.write_all(summary.as_bytes())?;
    Ok(EXIT_OK)
}

/// One row of the attention argmax report.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceArgmax {
    pub slice: usize,
    /// Grid cell of the maximum gate value.
    pub cell: (usize, usize),
    /// Input pixel under that cell.
    pub pixel: (f64, f64),
    /// Square centre averaged over the frames pooled into the slice.
    pub square: (f64, f64),
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct AttentionExport {
    pub gate: Tensor,
    pub slices: Vec<SliceArgmax>,
}

/// Gate map of the deepest backbone stage for one clip.
pub fn attention_for_clip(model: &Model, clip: &Tensor) -> crate::Result<AttentionExport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = forward_on_graph(model, clip, &mut rng, false)?;
    let deepest = *pass.stages.last().expect("at least one stage");
    let gate = spatial_attention_map(pass.graph.value(deepest))?;
    let [t, gw, gh] = [gate.shape()[0], gate.shape()[1], gate.shape()[2]];
    let stride_w: usize = model
        .config
        .stages
        .iter()
        .map(|s| s.spatial_stride)
        .product();
    let frames_per_slice: usize = model
        .config
        .stages
        .iter()
        .map(|s| s.temporal_stride)
        .product();
    let centers = square_centers(clip)?;
    let slices = (0..t)
        .map(|s| {
            let plane = &gate.data()[s * gw * gh..(s + 1) * gw * gh];
            let best = plane
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > plane[b] { i } else { b });
            let cell = (best / gh, best % gh);
            let pixel = ((cell.0 * stride_w) as f64, (cell.1 * stride_w) as f64);
            let frames = &centers[(s * frames_per_slice).min(centers.len() - 1)
                ..((s + 1) * frames_per_slice).min(centers.len())];
            let k = frames.len() as f64;
            let square = (
                frames.iter().map(|c| c.0).sum::<f64>() / k,
                frames.iter().map(|c| c.1).sum::<f64>() / k,
            );
            let distance = ((pixel.0 - square.0).powi(2) + (pixel.1 - square.1).powi(2)).sqrt();
            SliceArgmax {
                slice: s,
                cell,
                pixel,
                square,
                distance,
            }
        })
        .collect();
    Ok(AttentionExport { gate, slices })
}

/// Binary 8-bit PGM of a `W x H` plane with values in [0, 1]. W runs
/// horizontally and H vertically.
pub fn encode_pgm(plane: &[f64], w: usize, h: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        out.extend((0..w).map(|x| (plane[x * h + y].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

fn pick_clip(cfg: &RunConfig, model: &Model, index: usize) -> CliResult<ClipRecord> {
    let out_of_range =
        |n: usize| CliError::Usage(format!("clip index {index} out of range for {n} clips"));
    match &cfg.flags.data {
        Some(dir) => {
            let records = load_dataset(&dir.join("val.cidc"))?;
            let n = records.len();
            records
                .into_iter()
                .nth(index)
                .ok_or_else(|| out_of_range(n))
        }
        None => {
            let n = cfg.train_config().val_size;
            if index >= n {
                return Err(out_of_range(n));
            }
            let [_, t, size, _] = model.config.input;
            let spec = crate::train::data::ClipSpec {
                frames: t,
                size,
                ..Default::default()
            };
            Ok(validation_clip(cfg.seed, index, spec)?)
        }
    }
}

/// Write `attention_t{slice}.pgm`, `attention_gates.csv` and `attention.csv`.
pub fn cmd_attention(cfg: &RunConfig, console: &mut dyn Write) -> CliResult<AttentionExport> {
    let ckpt = cfg
        .flags
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let model = load_checkpoint(ckpt)?;
    let index = cfg.flags.clip_index.unwrap_or(0);
    let record = pick_clip(cfg, &model, index)?;
    let export = attention_for_clip(&model, &record.clip)?;
    let out = cfg.out_dir()?;

    let [t, gw, gh] = [
        export.gate.shape()[0],
        export.gate.shape()[1],
        export.gate.shape()[2],
    ];
    let [_, _, w, h] = model.config.input;
    let mut gates = String::from("slice,w,h,gate\n");
    for s in 0..t {
        let plane = export.gate.slice_axis(0, s, 1)?.reshape(&[gw, gh])?;
        let up = bilinear_resize_2d(&plane, w, h)?;
        fs::write(
            out.join(format!("attention_t{s}.pgm")),
            encode_pgm(up.data(), w, h),
        )?;
        for (i, v) in plane.data().iter().enumerate() {
            let _ = writeln!(gates, "{s},{},{},{v}", i / gh, i % gh);
        }
    }
    fs::write(out.join("attention_gates.csv"), gates)?;

    let mut report =
        String::from("slice,cell_w,cell_h,pixel_w,pixel_h,square_w,square_h,distance\n");
    for a in &export.slices {
        let _ = writeln!(
            report,
            "{},{},{},{},{},{},{},{}",
            a.slice, a.cell.0, a.cell.1, a.pixel.0, a.pixel.1, a.square.0, a.square.1, a.distance
        );
        writeln!(
            console,
            "slice {}: argmax pixel ({}, {}), square ({:.1}, {:.1}), distance {:.2}",
            a.slice, a.pixel.0, a.pixel.1, a.square.0, a.square.1, a.distance
        )?;
    }
    fs::write(out.join("attention.csv"), report)?;
    writeln!(console, "clip {index} (class {}), {t} slices", record.label)?;
    Ok(export)
}

pub fn cmd_dataset(cfg: &RunConfig, console: &mut dyn Write) -> CliResult<i32> {
    let tc = cfg.train_config();
    let (tr, va) = generate_splits(cfg.seed, tc.train_size, tc.val_size, tc.clip_spec())?;
    let out = cfg.out_dir()?;
    save_dataset(&out.join("train.cidc"), &tr)?;
    save_dataset(&out.join("val.cidc"), &va)?;
    writeln!(
        console,
        "wrote {} train and {} val clips to {}",
        tr.len(),
        va.len(),
        out.display()
    )?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let err = parse_config("seed = 3\nlearning_rate = 1").unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn config_parses_known_keys() {
        let f = parse_config("# comment\n\nseed=9\ntrain-size = 64\nfusion=sum\ndirection=uni\n")
            .unwrap();
        assert_eq!(f.seed, Some(9));
        assert_eq!(f.train_size, Some(64));
        assert_eq!(f.fusion, Some(FusionMode::Sum));
        assert_eq!(f.direction, Some(DirectionMode::Uni));
    }

    #[test]
    fn pgm_header_and_gray_levels() {
        // plane[x * h + y]: x = 0 holds 0.0, 0.5; x = 1 holds 1.0, 2.0
        let p = encode_pgm(&[0.0, 0.5, 1.0, 2.0], 2, 2);
        assert!(p.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&p[p.len() - 4..], &[0, 255, 128, 255]);
    }
}
