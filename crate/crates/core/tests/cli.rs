mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cidc::cidc::cidc_apply_dual;
use cidc::cli::{gradcheck_cases, Flags, RunConfig, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use cidc::gradsuite::{random_tensor, GradCase, EPSILON, OP_TOLERANCE};
use cidc::network::checkpoint::save_checkpoint;
use cidc::network::{DirectionMode, FusionMode, Model, ModelConfig};
use cidc::ops::gradcheck::grad_check;
use cidc::ops::DualResult;
use common::rng;

fn cidc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cidc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&cidc(&[])), EXIT_USAGE);
    assert_eq!(code(&cidc(&["frobnicate"])), EXIT_USAGE);
    assert_eq!(code(&cidc(&["train", "--no-such-flag"])), EXIT_USAGE);
    assert_eq!(
        code(&cidc(&["train", "--direction", "sideways"])),
        EXIT_USAGE
    );
    assert_eq!(code(&cidc(&["--help"])), EXIT_OK);
}

#[test]
fn gradcheck_subset_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = cidc(&[
        "gradcheck",
        "--ops",
        "masked_softmax_rows",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", stdout(&out));
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("op,seeds,"));
    assert!(lines[1].starts_with("masked_softmax_rows,"));
    assert!(stdout(&out).contains("PASS"));

    let bad = cidc(&[
        "gradcheck",
        "--ops",
        "no_such_op",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&bad), EXIT_USAGE);
}

#[test]
fn corrupted_gradient_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let broken = GradCase {
        name: "cidc_apply",
        tolerance: OP_TOLERANCE,
        seeds: 3,
        run: Box::new(|s| {
            let mut r = rng(s);
            let inputs = [
                random_tensor(&[3, 4, 2, 2], &mut r),
                random_tensor(&[3, 2, 4], &mut r),
            ];
            grad_check(
                |x| {
                    let d = cidc_apply_dual(&x[0], &x[1])?;
                    let output = d.output.clone();
                    Ok(DualResult::new(
                        output,
                        Box::new(move |u| {
                            Ok(d.backward(u)?.into_iter().map(|g| g.scale(-1.0)).collect())
                        }),
                    ))
                },
                &inputs,
                EPSILON,
                OP_TOLERANCE,
            )
        }),
    };
    let cfg = RunConfig::resolve(Flags {
        out: Some(dir.path().to_path_buf()),
        ..Flags::default()
    })
    .unwrap();
    let mut console = Vec::new();
    let (exit, results) = gradcheck_cases(vec![broken], &cfg, &mut console).unwrap();
    assert_eq!(exit, EXIT_FAILURE);
    assert!(!results[0].passed());
    let text = String::from_utf8(console).unwrap();
    assert!(text.contains("FAIL cidc_apply: seed"), "{text}");
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("cidc_apply,"));
    assert!(csv.contains(",false,"));
}

#[test]
fn train_smoke_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "--epochs",
        "1",
        "--train-size",
        "64",
        "--val-size",
        "16",
        "--seed",
        "5",
    ];
    for dir in [&a, &b] {
        let mut full = vec!["train", "--out", path(dir.path())];
        full.extend(args);
        let out = cidc(&full);
        assert_eq!(code(&out), EXIT_OK);
        assert!(stdout(&out).contains("final val accuracy"));
    }
    let ha = fs::read_to_string(a.path().join("history.csv")).unwrap();
    let hb = fs::read_to_string(b.path().join("history.csv")).unwrap();
    assert_eq!(ha.lines().count(), 2);
    assert!(ha.starts_with("epoch,loss,train_acc,val_acc\n0,"));
    assert_eq!(ha, hb);
    for file in ["model.json", "model.bin"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap()
        );
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(
        &conf,
        "# small run\nepochs = 2\ntrain-size = 32\nval_size = 8\nbatch = 8\nseed = 3\n",
    )
    .unwrap();
    let out_dir = dir.path().join("o");
    let out = cidc(&[
        "train",
        "--config",
        path(&conf),
        "--epochs",
        "1",
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(
        code(&out),
        EXIT_OK,
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let hist = fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 2);

    fs::write(&conf, "epochs = 1\nwarp_factor = 9\n").unwrap();
    assert_eq!(code(&cidc(&["train", "--config", path(&conf)])), EXIT_USAGE);
    assert_eq!(
        code(&cidc(&[
            "train",
            "--config",
            path(&dir.path().join("missing"))
        ])),
        EXIT_USAGE
    );
}

#[test]
fn dataset_files_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = cidc(&[
        "dataset",
        "--train-size",
        "16",
        "--val-size",
        "8",
        "--out",
        path(&data),
    ]);
    assert_eq!(code(&out), EXIT_OK);
    assert!(data.join("train.cidc").is_file() && data.join("val.cidc").is_file());
    let run = dir.path().join("run");
    let out = cidc(&[
        "train",
        "--data",
        path(&data),
        "--epochs",
        "1",
        "--batch",
        "8",
        "--out",
        path(&run),
    ]);
    assert_eq!(code(&out), EXIT_OK);
    assert_eq!(
        fs::read_to_string(run.join("history.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let missing = cidc(&[
        "train",
        "--data",
        path(&dir.path().join("nowhere")),
        "--out",
        path(&run),
    ]);
    assert_eq!(code(&missing), EXIT_FAILURE);
}

#[test]
fn attention_export() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&cidc(&["attention", "--out", path(dir.path())])),
        EXIT_USAGE
    );
    let gone = dir.path().join("absent.json");
    assert_ne!(
        code(&cidc(&["attention", "--checkpoint", path(&gone)])),
        EXIT_OK
    );

    let model = Model::init(
        ModelConfig::desk(DirectionMode::Bi, FusionMode::ConcatT),
        &mut rng(1),
    )
    .unwrap();
    let ckpt = dir.path().join("model.json");
    save_checkpoint(&model, &ckpt).unwrap();
    let out_dir = dir.path().join("att");
    let out = cidc(&[
        "attention",
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(
        code(&out),
        EXIT_OK,
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // deepest stage has 4 time slices
    for s in 0..4 {
        let pgm = fs::read(out_dir.join(format!("attention_t{s}.pgm"))).unwrap();
        let header = b"P5\n36 36\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let pixels = &pgm[header.len()..];
        assert_eq!(pixels.len(), 36 * 36);
        // an untrained gate stays close to sigmoid(0) = 0.5
        let mean = pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / pixels.len() as f64;
        assert!((mean - 128.0).abs() < 25.0, "slice {s}: {mean}");
    }
    assert!(!out_dir.join("attention_t4.pgm").exists());
    let report = fs::read_to_string(out_dir.join("attention.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    let gates = fs::read_to_string(out_dir.join("attention_gates.csv")).unwrap();
    assert_eq!(gates.lines().count(), 1 + 4 * 5 * 5);

    let far = cidc(&[
        "attention",
        "--checkpoint",
        path(&ckpt),
        "--clip-index",
        "100000",
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&far), EXIT_USAGE);
}
