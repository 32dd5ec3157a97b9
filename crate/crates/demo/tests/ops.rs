use cidc_demo::ops::{mask_bits, normalized_kernel, AttentionView, FRAMES, SIZE};

#[test]
fn square_mask_is_strict_upper_triangle() {
    let bits = mask_bits(3, 3).unwrap();
    assert_eq!(bits, vec![0, 1, 1, 0, 0, 1, 0, 0, 0]);
    assert!(mask_bits(0, 3).is_err());
}

#[test]
fn kernel_rows_respect_mask_and_range() {
    let w = normalized_kernel(4, 8, 7, 3.0, false).unwrap();
    let bits = mask_bits(4, 8).unwrap();
    assert_eq!(w.len(), 32);
    for (v, m) in w.iter().zip(&bits) {
        if *m == 1 {
            assert_eq!(*v, 0.0);
        } else {
            assert!((-1.0..=1.0).contains(v));
        }
    }
    let open = normalized_kernel(4, 8, 7, 3.0, true).unwrap();
    assert!(open.iter().filter(|&&v| v == 0.0).count() < bits.iter().filter(|&&m| m == 1).count());
}

#[test]
fn attention_view_covers_every_frame() {
    let view = AttentionView::new(2, 3).unwrap();
    assert_eq!((view.frames, view.size, view.slices), (FRAMES, SIZE, 4));
    for t in 0..FRAMES {
        assert_eq!(view.frame(t).len(), SIZE * SIZE);
        let gate = view.gate_for_frame(t);
        assert_eq!(gate.len(), SIZE * SIZE);
        assert!(gate.iter().all(|g| (0.0..=1.0).contains(g)));
        let (w, h) = view.peak_for_frame(t);
        assert!(w < SIZE as f64 && h < SIZE as f64);
    }
    assert!(AttentionView::new(4, 0).is_err());
}
