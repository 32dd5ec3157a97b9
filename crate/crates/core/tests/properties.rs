mod common;

use cidc::cidc::{
    build_directional_mask, cidc_unit_forward, normalize_kernel, CidcParams, Direction, MaskMatrix,
    MaskMode,
};
use cidc::network::attention_propagate;
use cidc::ops::masked_softmax_rows;
use cidc::{bilinear_resize_2d, Tensor};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

const ROW_SUM_TOL: f64 = 1e-12;
const RANGE_SLACK: f64 = 1e-12;

fn tensor(shape: Vec<usize>, scale: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-scale..scale, n).prop_map(move |v| Tensor::from_vec(&shape, v).unwrap())
}

fn shape(rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, rank)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn flip_is_an_involution(t in shape(3).prop_flat_map(|s| tensor(s, 10.0)), axis in 0usize..3) {
        let twice = t.flip_axis(axis).unwrap().flip_axis(axis).unwrap();
        prop_assert_eq!(twice, t);
    }

    #[test]
    fn resize_stays_within_input_range(
        src in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| tensor(vec![h, w], 5.0)),
        oh in 1usize..9,
        ow in 1usize..9,
    ) {
        let out = bilinear_resize_2d(&src, oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[oh, ow]);
        for &v in out.data() {
            prop_assert!(v >= src.min() - 1e-12 && v <= src.max() + 1e-12);
        }
        let same = bilinear_resize_2d(&src, src.shape()[0], src.shape()[1]).unwrap();
        prop_assert_eq!(same, src);
    }

    #[test]
    fn concat_then_slice_round_trips(
        (a, b, axis) in (shape(4), 1usize..4, 0usize..4).prop_flat_map(|(s, extra, axis)| {
            let mut s2 = s.clone();
            s2[axis] = extra;
            (tensor(s, 1.0), tensor(s2, 1.0), Just(axis))
        })
    ) {
        let c = Tensor::concat(&[&a, &b], axis).unwrap();
        let n = a.shape()[axis];
        prop_assert_eq!(c.slice_axis(axis, 0, n).unwrap(), a);
        prop_assert_eq!(c.slice_axis(axis, n, c.shape()[axis] - n).unwrap(), b);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one(
        (rows, cols, bits, logits) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (
            Just(r),
            Just(c),
            prop::collection::vec(any::<bool>(), r * c),
            tensor(vec![r, c], 30.0),
        ))
    ) {
        let mut bits = bits;
        for row in 0..rows {
            bits[row * cols] = false;
        }
        let mask = MaskMatrix::from_bits(rows, cols, bits).unwrap();
        let s = masked_softmax_rows(&logits, &mask).unwrap();
        for row in 0..rows {
            let vals = &s.data()[row * cols..(row + 1) * cols];
            prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < ROW_SUM_TOL);
            for (j, &v) in vals.iter().enumerate() {
                if mask.is_masked(row, j) {
                    prop_assert_eq!(v, 0.0);
                } else {
                    prop_assert!(v >= 0.0);
                }
            }
        }
    }

    #[test]
    fn normalized_kernel_spans_unit_range(
        (t_out, t_in, k) in (1usize..9, 1usize..9).prop_flat_map(|(a, b)| (Just(a), Just(b), tensor(vec![2, a, b], 8.0)))
    ) {
        let mask = build_directional_mask(t_out, t_in).unwrap();
        let w = normalize_kernel(&k, &mask).unwrap();
        for ch in 0..2 {
            let plane = &w.data()[ch * t_out * t_in..(ch + 1) * t_out * t_in];
            let admissible: Vec<f64> = (0..t_out * t_in)
                .filter(|&i| !mask.is_masked(i / t_in, i % t_in))
                .map(|i| plane[i])
                .collect();
            for &v in &admissible {
                prop_assert!((-1.0 - RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v));
            }
            let lo = admissible.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = admissible.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > 1e-9 {
                prop_assert!((lo + 1.0).abs() < RANGE_SLACK && (hi - 1.0).abs() < RANGE_SLACK);
            }
        }
    }

    #[test]
    fn directional_unit_ignores_hidden_steps(
        t in 2usize..9,
        seed in any::<u64>(),
        step in 0usize..8,
        backward in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let dir = if backward { Direction::Backward } else { Direction::Forward };
        let mut p = CidcParams::init(2, 3, t, t, dir, MaskMode::Directional, &mut r).unwrap();
        p.k = common::uniform(&[2, t, t], -3.0, 3.0, &mut r);
        let f = common::rand_t(&[2, t, 2, 2], &mut r);
        let step = step % t;
        // perturb inputs that output `step` must not see
        let mut g = f.clone();
        let plane = 4;
        for c in 0..2 {
            for s in 0..t {
                let hidden = if backward { s < step } else { s > step };
                if hidden {
                    for v in &mut g.data_mut()[(c * t + s) * plane..(c * t + s + 1) * plane] {
                        *v += r.gen_range(-5.0..5.0);
                    }
                }
            }
        }
        let a = cidc_unit_forward(&f, &p).unwrap();
        let b = cidc_unit_forward(&g, &p).unwrap();
        prop_assert_eq!(a.slice_axis(1, step, 1).unwrap(), b.slice_axis(1, step, 1).unwrap());
    }

    #[test]
    fn attention_bounds_output_magnitude(
        (late, early) in (1usize..4, 1usize..6).prop_flat_map(|(t, s)| (
            tensor(vec![3, t, s, s], 20.0),
            tensor(vec![2, 2 * t, s + 2, s + 2], 5.0),
        ))
    ) {
        let out = attention_propagate(&late, &early).unwrap();
        for (o, e) in out.data().iter().zip(early.data()) {
            prop_assert!(o.abs() >= e.abs() && o.abs() <= 2.0 * e.abs());
            prop_assert!(o.signum() == e.signum() || *e == 0.0);
        }
    }
}
