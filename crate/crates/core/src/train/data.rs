//! Synthetic temporal-order clips and the binary dataset format.
//!
//! A 4x4 bright square crosses the frame. Classes come in reversal pairs:
//! 0 (left to right) / 1 (right to left) move along the W axis,
//! 2 (top to bottom) / 3 (bottom to top) along the H axis. A reversed class is
//! generated as the exact time reversal of a forward trajectory, noise
//! included, so each pair shares frame multisets.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

pub const CLASSES: usize = 4;
pub const SQUARE: usize = 4;
pub const DEFAULT_FRAMES: usize = 8;
pub const DEFAULT_SIZE: usize = 36;
pub const DEFAULT_NOISE: f64 = 0.05;

pub const MAGIC: &[u8; 4] = b"CIDC";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    /// `1 x T x W x H`, intensities in `[0, 1]`.
    pub clip: Tensor,
    pub label: usize,
}

/// Clip geometry and noise level for the generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    pub frames: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            frames: DEFAULT_FRAMES,
            size: DEFAULT_SIZE,
            noise: DEFAULT_NOISE,
        }
    }
}

/// Top-left corner of the square in frame `i` of a forward trajectory.
fn forward_position(i: usize, frames: usize, size: usize) -> usize {
    let travel = (size - SQUARE) as f64;
    (i as f64 * travel / (frames - 1) as f64).round() as usize
}

/// One clip of class `class_id` with the default noise level.
pub fn gen_synthetic_clip(
    class_id: usize,
    rng: &mut impl Rng,
    t: usize,
    size: usize,
) -> Result<ClipRecord> {
    gen_clip(
        class_id,
        rng,
        ClipSpec {
            frames: t,
            size,
            noise: DEFAULT_NOISE,
        },
    )
}

pub fn gen_clip(class_id: usize, rng: &mut impl Rng, spec: ClipSpec) -> Result<ClipRecord> {
    let ClipSpec {
        frames: t,
        size,
        noise,
    } = spec;
    if class_id >= CLASSES {
        return arg_err(format!("class {class_id} >= {CLASSES}"));
    }
    if t < 2 {
        return arg_err(format!("need at least 2 frames, got {t}"));
    }
    if size < SQUARE {
        return arg_err(format!("frame size {size} smaller than the square"));
    }
    let along_w = class_id < 2;
    let across = rng.gen_range(0..=size - SQUARE);
    let plane = size * size;
    let mut data = vec![0.0; t * plane];
    for (i, frame) in data.chunks_mut(plane).enumerate() {
        let along = forward_position(i, t, size);
        let (x0, y0) = if along_w {
            (along, across)
        } else {
            (across, along)
        };
        for x in x0..x0 + SQUARE {
            frame[x * size + y0..x * size + y0 + SQUARE].fill(1.0);
        }
        for v in frame.iter_mut() {
            let n = if noise > 0.0 {
                rng.gen_range(0.0..noise)
            } else {
                0.0
            };
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }
    let mut clip = Tensor::from_vec(&[1, t, size, size], data)?;
    if class_id % 2 == 1 {
        clip = clip.flip_axis(1)?;
    }
    Ok(ClipRecord {
        clip,
        label: class_id,
    })
}

/// `n` clips with labels cycling `0, 1, 2, 3, ...`; `n` must be a multiple of 4.
pub fn generate_split(n: usize, spec: ClipSpec, rng: &mut impl Rng) -> Result<Vec<ClipRecord>> {
    if !n.is_multiple_of(CLASSES) {
        return arg_err(format!("split size {n} is not a multiple of {CLASSES}"));
    }
    (0..n).map(|i| gen_clip(i % CLASSES, rng, spec)).collect()
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Training and validation splits from disjoint streams of `seed`.
pub fn generate_splits(
    seed: u64,
    train: usize,
    val: usize,
    spec: ClipSpec,
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    Ok((
        generate_split(train, spec, &mut split_rng(seed, TRAIN_STREAM))?,
        generate_split(val, spec, &mut split_rng(seed, VAL_STREAM))?,
    ))
}

/// Clip `index` of the validation split for `seed`, without keeping the
/// clips before it.
pub fn validation_clip(seed: u64, index: usize, spec: ClipSpec) -> Result<ClipRecord> {
    let mut rng = split_rng(seed, VAL_STREAM);
    for i in 0..index {
        gen_clip(i % CLASSES, &mut rng, spec)?;
    }
    gen_clip(index % CLASSES, &mut rng, spec)
}

/// Centre `(w, h)` of the bright square in each frame, in pixel coordinates.
pub fn square_centers(clip: &Tensor) -> Result<Vec<(f64, f64)>> {
    let [_, t, w, h] = clip.dims4()?;
    (0..t)
        .map(|f| {
            let frame = &clip.data()[f * w * h..(f + 1) * w * h];
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for (i, &v) in frame.iter().enumerate() {
                if v >= 0.5 {
                    sx += (i / h) as f64;
                    sy += (i % h) as f64;
                    n += 1.0;
                }
            }
            if n == 0.0 {
                return Err(Error::Argument(format!("frame {f} has no bright square")));
            }
            Ok((sx / n, sy / n))
        })
        .collect()
}

pub fn write_dataset(mut out: impl Write, records: &[ClipRecord]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[FORMAT_VERSION])?;
    for r in records {
        let dims = r.clip.dims4()?;
        for d in dims {
            let d =
                u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let label = u8::try_from(r.label)
            .map_err(|_| Error::Format(format!("label {} exceeds u8", r.label)))?;
        out.write_all(&[label])?;
        let mut buf = Vec::with_capacity(r.clip.len() * 4);
        for &v in r.clip.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(mut input: impl Read) -> Result<Vec<ClipRecord>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CIDC magic".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            bytes[4]
        )));
    }
    let mut pos = 5;
    let mut records = Vec::new();
    let truncated = || Error::Format("truncated dataset record".into());
    while pos < bytes.len() {
        let header = bytes.get(pos..pos + 17).ok_or_else(truncated)?;
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as usize;
        }
        let label = header[16] as usize;
        pos += 17;
        let n: usize = dims.iter().product();
        let body = bytes.get(pos..pos + n * 4).ok_or_else(truncated)?;
        let data = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        pos += n * 4;
        records.push(ClipRecord {
            clip: Tensor::from_vec(&dims, data)?,
            label,
        });
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<ClipRecord>> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_clips_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gen_synthetic_clip(0, &mut rng, 1, 36).unwrap_err(),
            Error::Argument(_)
        ));
        assert!(gen_synthetic_clip(4, &mut rng, 8, 36).is_err());
    }

    #[test]
    fn reversal_pair_matches_by_construction() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let fwd = gen_synthetic_clip(0, &mut a, 8, 36).unwrap();
        let rev = gen_synthetic_clip(1, &mut b, 8, 36).unwrap();
        assert_eq!(fwd.clip.flip_axis(1).unwrap(), rev.clip);
    }

    #[test]
    fn values_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for c in 0..4 {
            let r = gen_synthetic_clip(c, &mut rng, 8, 36).unwrap();
            assert!(r.clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ClipSpec {
            frames: 4,
            size: 8,
            noise: 0.05,
        };
        let s = generate_split(12, spec, &mut rng).unwrap();
        let counts = s.iter().fold([0; 4], |mut acc, r| {
            acc[r.label] += 1;
            acc
        });
        assert_eq!(counts, [3; 4]);
        assert!(generate_split(10, spec, &mut rng).is_err());
    }

    #[test]
    fn validation_clip_matches_split() {
        let spec = ClipSpec {
            frames: 4,
            size: 8,
            noise: 0.05,
        };
        let (_, val) = generate_splits(9, 4, 8, spec).unwrap();
        for (i, r) in val.iter().enumerate() {
            assert_eq!(&validation_clip(9, i, spec).unwrap(), r);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            read_dataset(&b"NOPE\x01"[..]).unwrap_err(),
            Error::Format(_)
        ));
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(FORMAT_VERSION);
        buf.extend_from_slice(&[1, 0, 0, 0]);
        assert!(read_dataset(&buf[..]).is_err());
    }
}
