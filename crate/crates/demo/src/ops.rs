//! Target-independent logic of the demo.

use cidc::cidc::{build_directional_mask, normalize_kernel, MaskMode};
use cidc::cli::attention_for_clip;
use cidc::network::{DirectionMode, FusionMode, Model, ModelConfig};
use cidc::train::data::gen_synthetic_clip;
use cidc::{bilinear_resize_2d, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FRAMES: usize = 8;
pub const SIZE: usize = 36;

pub fn mask_bits(t_out: usize, t_in: usize) -> Result<Vec<u8>> {
    let m = build_directional_mask(t_out, t_in)?;
    Ok((0..t_out)
        .flat_map(|i| (0..t_in).map(move |j| (i, j)))
        .map(|(i, j)| u8::from(m.is_masked(i, j)))
        .collect())
}

pub fn normalized_kernel(
    t_out: usize,
    t_in: usize,
    seed: u64,
    sharpness: f64,
    open: bool,
) -> Result<Vec<f64>> {
    let mode = if open {
        MaskMode::Open
    } else {
        MaskMode::Directional
    };
    let mask = mode.build(t_out, t_in)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = (0..t_out * t_in)
        .map(|_| rng.gen_range(-1.0..1.0) * sharpness)
        .collect();
    let k = Tensor::from_vec(&[1, t_out, t_in], logits)?;
    Ok(normalize_kernel(&k, &mask)?.into_data())
}

pub struct AttentionView {
    pub size: usize,
    pub frames: usize,
    pub slices: usize,
    clip: Tensor,
    gates: Vec<Tensor>,
    peaks: Vec<(f64, f64)>,
}

impl AttentionView {
    pub fn new(class_id: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clip = gen_synthetic_clip(class_id, &mut rng, FRAMES, SIZE)?.clip;
        let model = Model::init(
            ModelConfig::desk(DirectionMode::Bi, FusionMode::ConcatT),
            &mut rng,
        )?;
        let export = attention_for_clip(&model, &clip)?;
        let [slices, gw, gh] = [
            export.gate.shape()[0],
            export.gate.shape()[1],
            export.gate.shape()[2],
        ];
        let gates = (0..slices)
            .map(|s| {
                let plane = export.gate.slice_axis(0, s, 1)?.reshape(&[gw, gh])?;
                bilinear_resize_2d(&plane, SIZE, SIZE)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            size: SIZE,
            frames: FRAMES,
            slices,
            clip,
            gates,
            peaks: export.slices.iter().map(|s| s.pixel).collect(),
        })
    }

    fn slice_of(&self, t: usize) -> usize {
        (t.min(self.frames - 1) * self.slices / self.frames).min(self.slices - 1)
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let plane = self.size * self.size;
        let t = t.min(self.frames - 1);
        &self.clip.data()[t * plane..(t + 1) * plane]
    }

    pub fn gate_for_frame(&self, t: usize) -> &[f64] {
        self.gates[self.slice_of(t)].data()
    }

    pub fn peak_for_frame(&self, t: usize) -> (f64, f64) {
        self.peaks[self.slice_of(t)]
    }
}
