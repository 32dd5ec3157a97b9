//! WebAssembly bindings behind `www/index.html`.
//!
//! Each exported function has a plain Rust twin in [`ops`] so the logic can be
//! tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use wasm_bindgen::prelude::*;

pub mod ops;

fn js_err(e: cidc::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major `t_out x t_in` mask, 1 where a step is hidden.
#[wasm_bindgen]
pub fn mask_bits(t_out: usize, t_in: usize) -> Result<Vec<u8>, JsError> {
    ops::mask_bits(t_out, t_in).map_err(js_err)
}

/// One channel of a normalized kernel drawn from `seed`; logits are
/// `U(-1, 1) * sharpness`. Masked entries are 0.
#[wasm_bindgen]
pub fn normalized_kernel(
    t_out: usize,
    t_in: usize,
    seed: u64,
    sharpness: f64,
    open: bool,
) -> Result<Vec<f64>, JsError> {
    ops::normalized_kernel(t_out, t_in, seed, sharpness, open).map_err(js_err)
}

/// Synthetic clip plus the gate of a freshly initialised network.
#[wasm_bindgen]
pub struct AttentionView {
    inner: ops::AttentionView,
}

#[wasm_bindgen]
impl AttentionView {
    #[wasm_bindgen(constructor)]
    pub fn new(class_id: usize, seed: u64) -> Result<AttentionView, JsError> {
        ops::AttentionView::new(class_id, seed)
            .map(|inner| AttentionView { inner })
            .map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.inner.size
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.inner.frames
    }

    #[wasm_bindgen(getter)]
    pub fn slices(&self) -> usize {
        self.inner.slices
    }

    /// Input frame `t`, `size x size`, W-major.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        self.inner.frame(t).to_vec()
    }

    /// Gate of the slice covering frame `t`, resized to the frame.
    pub fn gate_for_frame(&self, t: usize) -> Vec<f64> {
        self.inner.gate_for_frame(t).to_vec()
    }

    /// `[w, h]` of the gate maximum, in input pixels.
    pub fn peak_for_frame(&self, t: usize) -> Vec<f64> {
        let (w, h) = self.inner.peak_for_frame(t);
        vec![w, h]
    }
}
