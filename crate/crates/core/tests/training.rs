mod common;

use cidc::network::DirectionMode;
use cidc::train::data::{
    gen_synthetic_clip, generate_splits, read_dataset, square_centers, write_dataset, ClipSpec,
    FORMAT_VERSION, MAGIC, SQUARE,
};
use cidc::train::optim::{sgd_step, OptimState, SgdConfig};
use cidc::train::{evaluate, history_csv, train, TrainConfig, Variant};
use cidc::{Error, Tensor};
use common::rng;

/// Expected frame mean: 16 bright pixels, the rest carry U(0, 0.05) noise.
const FRAME_MEAN: f64 = (16.0 + 0.025 * 1280.0) / 1296.0;
const FRAME_MEAN_TOL: f64 = 2e-3;
/// Mean first-epoch loss of an untrained 4-way classifier sits near ln 4.
const INITIAL_LOSS_TOL: f64 = 0.1;

fn sorted_frames(clip: &Tensor) -> Vec<Vec<u64>> {
    let plane = clip.shape()[2] * clip.shape()[3];
    let mut frames: Vec<Vec<u64>> = clip
        .data()
        .chunks(plane)
        .map(|f| f.iter().map(|v| v.to_bits()).collect())
        .collect();
    frames.sort();
    frames
}

#[test]
fn clip_geometry_and_intensity() {
    let mut r = rng(1);
    for class in 0..4 {
        let rec = gen_synthetic_clip(class, &mut r, 8, 36).unwrap();
        assert_eq!(rec.clip.shape(), &[1, 8, 36, 36]);
        assert_eq!(rec.label, class);
        for frame in rec.clip.data().chunks(36 * 36) {
            let mean = frame.iter().sum::<f64>() / frame.len() as f64;
            assert!(
                (mean - FRAME_MEAN).abs() < FRAME_MEAN_TOL,
                "class {class}: {mean}"
            );
            assert_eq!(frame.iter().filter(|&&v| v == 1.0).count(), SQUARE * SQUARE);
        }
    }
}

#[test]
fn motion_direction_per_class() {
    let mut r = rng(2);
    for class in 0..4 {
        let rec = gen_synthetic_clip(class, &mut r, 8, 36).unwrap();
        let c = square_centers(&rec.clip).unwrap();
        let (along, across): (Vec<f64>, Vec<f64>) = if class < 2 {
            c.iter().map(|&(w, h)| (w, h)).unzip()
        } else {
            c.iter().map(|&(w, h)| (h, w)).unzip()
        };
        assert!(across.iter().all(|&v| v == across[0]));
        let rising = along.windows(2).all(|p| p[1] > p[0]);
        let falling = along.windows(2).all(|p| p[1] < p[0]);
        assert!(
            if class % 2 == 0 { rising } else { falling },
            "class {class}: {along:?}"
        );
        assert_eq!(along.first().unwrap().min(*along.last().unwrap()), 1.5);
        assert_eq!(along.first().unwrap().max(*along.last().unwrap()), 33.5);
    }
}

#[test]
fn reversal_pairs_share_frame_multisets() {
    for seed in 0..10 {
        for (a, b) in [(0, 1), (2, 3)] {
            let fwd = gen_synthetic_clip(a, &mut rng(seed), 8, 36).unwrap();
            let rev = gen_synthetic_clip(b, &mut rng(seed), 8, 36).unwrap();
            assert_ne!(fwd.clip, rev.clip);
            assert_eq!(sorted_frames(&fwd.clip), sorted_frames(&rev.clip));
            assert_eq!(fwd.clip.flip_axis(1).unwrap(), rev.clip);
        }
    }
}

#[test]
fn splits_are_balanced_and_disjoint() {
    let spec = ClipSpec::default();
    let (tr, va) = generate_splits(7, 40, 20, spec).unwrap();
    assert_eq!((tr.len(), va.len()), (40, 20));
    for split in [&tr, &va] {
        let mut counts = [0; 4];
        split.iter().for_each(|r| counts[r.label] += 1);
        assert_eq!(counts, [split.len() / 4; 4]);
    }
    assert!(tr.iter().all(|a| va.iter().all(|b| a.clip != b.clip)));
    let (tr2, va2) = generate_splits(7, 40, 20, spec).unwrap();
    assert_eq!((tr, va), (tr2, va2));
}

#[test]
fn dataset_file_round_trip() {
    let spec = ClipSpec {
        frames: 4,
        size: 8,
        noise: 0.05,
    };
    let (records, _) = generate_splits(3, 8, 4, spec).unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &records).unwrap();
    assert_eq!(&buf[..4], MAGIC);
    assert_eq!(buf[4], FORMAT_VERSION);
    assert_eq!(buf.len(), 5 + records.len() * (17 + 4 * 8 * 8 * 4));
    let back = read_dataset(&buf[..]).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        let f32_round: Vec<f64> = a.clip.data().iter().map(|&v| f64::from(v as f32)).collect();
        assert_eq!(b.clip.data(), &f32_round[..]);
    }

    let mut wrong_version = buf.clone();
    wrong_version[4] = FORMAT_VERSION + 1;
    assert!(matches!(
        read_dataset(&wrong_version[..]).unwrap_err(),
        Error::Format(_)
    ));
    assert!(matches!(
        read_dataset(&buf[..buf.len() - 3]).unwrap_err(),
        Error::Format(_)
    ));
    let empty = read_dataset(&buf[..5]).unwrap();
    assert!(empty.is_empty());
}

#[test]
fn sgd_plain_and_momentum_examples() {
    let cfg = SgdConfig {
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        ..SgdConfig::default()
    };
    let mut p = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
    let g = vec![Tensor::from_vec(&[1], vec![2.0]).unwrap()];
    let mut state = OptimState::new(cfg, &p);
    sgd_step(&mut p, &g, &mut state).unwrap();
    assert!((p[0].data()[0] - 0.8).abs() < 1e-15);

    // v1 = g, v2 = 0.9 g + g; p = 1 - 0.1 (g + 1.9 g)
    let cfg = SgdConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        ..SgdConfig::default()
    };
    let mut p = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
    let mut state = OptimState::new(cfg, &p);
    sgd_step(&mut p, &g, &mut state).unwrap();
    sgd_step(&mut p, &g, &mut state).unwrap();
    assert!((p[0].data()[0] - (1.0 - 0.1 * 2.0 * 2.9)).abs() < 1e-14);

    let bad = vec![Tensor::from_vec(&[1], vec![f64::NAN]).unwrap()];
    let before = p.clone();
    assert!(matches!(
        sgd_step(&mut p, &bad, &mut state).unwrap_err(),
        Error::Divergence(_)
    ));
    assert_eq!(p, before);
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 1,
        batch: 16,
        train_size: 64,
        val_size: 16,
        variant: Variant::Cidc(DirectionMode::Bi),
        ..TrainConfig::default()
    }
}

#[test]
fn first_epoch_loss_near_chance() {
    let out = train(&small_config(11), |_| {}).unwrap();
    assert_eq!(out.history.len(), 1);
    let loss = out.history[0].loss;
    assert!((loss - 4f64.ln()).abs() < INITIAL_LOSS_TOL, "{loss}");
}

#[test]
fn training_is_reproducible() {
    let mut cfg = small_config(12);
    cfg.train_size = 32;
    cfg.batch = 8;
    let a = train(&cfg, |_| {}).unwrap();
    let b = train(&cfg, |_| {}).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(a.model.params(), b.model.params());
    cfg.seed += 1;
    let c = train(&cfg, |_| {}).unwrap();
    assert_ne!(a.model.params(), c.model.params());
}

#[test]
fn evaluation_breakdown_is_consistent() {
    let cfg = small_config(13);
    let (_, val) = generate_splits(13, 4, 16, cfg.clip_spec()).unwrap();
    let model = cidc::network::Model::init(cfg.model_config().unwrap(), &mut rng(0)).unwrap();
    let e = evaluate(&model, &val).unwrap();
    let mean_class = e.per_class.iter().sum::<f64>() / 4.0;
    assert!((mean_class - e.accuracy).abs() < 1e-12);
    for v in [e.accuracy, e.pair_01, e.pair_23, e.axis] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(e.axis >= e.accuracy);
}

#[test]
fn invalid_training_config_is_rejected() {
    let mut cfg = small_config(14);
    cfg.batch = 0;
    assert!(matches!(
        train(&cfg, |_| {}).err(),
        Some(Error::Argument(_))
    ));
    let mut cfg = small_config(14);
    cfg.train_size = 10;
    assert!(matches!(
        train(&cfg, |_| {}).err(),
        Some(Error::Argument(_))
    ));
}
