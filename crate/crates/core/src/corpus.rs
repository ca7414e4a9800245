//! Synthetic labelled motion data.
//!
//! Textures are box-blurred LCG noise so the same frames can be rebuilt
//! outside Rust (the flow tests compare against a reference implementation
//! fed the identical pixels). Clips are either a static texture with sensor
//! noise or a rigid translation of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classifier::{LabeledDataset, LabeledRow, MovementClass};
use crate::features::MotionFeatures;
use crate::frame::{FrameBatch, GrayFrame};

/// Margin around the visible frame so translations never sample outside.
const CANVAS_MARGIN: usize = 8;

/// A smooth random texture of `width`x`height` pixels.
pub fn texture(width: usize, height: usize, seed: u32) -> Vec<u8> {
    let mut state = seed;
    let mut noise = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
        noise.push((state >> 24) as f64);
    }
    let blurred = box_blur(&box_blur(&noise, width, height, 2), width, height, 2);
    blurred
        .iter()
        .map(|&n| {
            let v = 128.0 + (n - 127.5) * 4.0;
            (v + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect()
}

fn box_blur(img: &[f64], width: usize, height: usize, r: isize) -> Vec<f64> {
    let taps = (2 * r + 1) as f64;
    let at = |i: isize, len: usize| i.clamp(0, len as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for d in -r..=r {
                acc += img[y * width + at(x as isize + d, width)];
            }
            tmp[y * width + x] = acc / taps;
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for d in -r..=r {
                acc += tmp[at(y as isize + d, height) * width + x];
            }
            out[y * width + x] = acc / taps;
        }
    }
    out
}

/// Two frames of the same texture where the content of the second has
/// moved by `(dx, dy)` pixels: `second(x, y) = first(x − dx, y − dy)`.
///
/// Shifts are limited to the canvas margin of 8 pixels.
pub fn translated_pair(
    width: usize,
    height: usize,
    seed: u32,
    dx: i32,
    dy: i32,
) -> (GrayFrame, GrayFrame) {
    let m = CANVAS_MARGIN as i32;
    assert!(dx.abs() <= m && dy.abs() <= m, "shift exceeds canvas margin");
    let cw = width + 2 * CANVAS_MARGIN;
    let ch = height + 2 * CANVAS_MARGIN;
    let canvas = texture(cw, ch, seed);
    let crop = |ox: i32, oy: i32| -> Vec<u8> {
        let mut px = Vec::with_capacity(width * height);
        for y in 0..height {
            let row = (y as i32 + oy) as usize * cw;
            let start = row + ox as usize;
            px.extend_from_slice(&canvas[start..start + width]);
        }
        px
    };
    let first = GrayFrame::new(width, height, crop(m, m), 0).expect("crop size");
    let second = GrayFrame::new(width, height, crop(m - dx, m - dy), 500).expect("crop size");
    (first, second)
}

/// The texture twice, the second copy perturbed by rounded Gaussian noise.
pub fn noisy_static_pair(
    width: usize,
    height: usize,
    seed: u32,
    sigma: f64,
    rng: &mut impl Rng,
) -> (GrayFrame, GrayFrame) {
    let (first, _) = translated_pair(width, height, seed, 0, 0);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let px = first
        .pixels()
        .iter()
        .map(|&p| (p as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    let second = GrayFrame::new(width, height, px, 500).expect("same size");
    (first, second)
}

/// A clip with its ground-truth movement label.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub batch: FrameBatch,
    pub label: MovementClass,
}

/// Shape of the generated clips.
#[derive(Debug, Clone, Copy)]
pub struct ClipSpec {
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 72,
            noise_sigma: 1.0,
        }
    }
}

/// Generates one clip of the requested class.
///
/// Low clips are static with sensor noise, medium clips translate by 1–2 px
/// and high clips by 4–6 px, in a random direction.
pub fn synthetic_clip(
    spec: &ClipSpec,
    label: MovementClass,
    batch_index: u64,
    rng: &mut impl Rng,
) -> LabeledClip {
    let seed: u32 = rng.random();
    let (a, b) = match label {
        MovementClass::Low => noisy_static_pair(spec.width, spec.height, seed, spec.noise_sigma, rng),
        MovementClass::Medium | MovementClass::High => {
            let magnitude = if label == MovementClass::Medium {
                rng.random_range(1..=2)
            } else {
                rng.random_range(4..=6)
            };
            let (dx, dy) = match rng.random_range(0..4) {
                0 => (magnitude, 0),
                1 => (-magnitude, 0),
                2 => (0, magnitude),
                _ => (0, -magnitude),
            };
            translated_pair(spec.width, spec.height, seed, dx, dy)
        }
    };
    LabeledClip {
        batch: FrameBatch::new(a, b, batch_index).expect("ordered pair"),
        label,
    }
}

/// `per_class` clips of each movement class, interleaved by class.
pub fn synthetic_clips(spec: &ClipSpec, per_class: usize, seed: u64) -> Vec<LabeledClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(per_class * 3);
    for _ in 0..per_class {
        for class in MovementClass::ALL {
            let index = clips.len() as u64;
            clips.push(synthetic_clip(spec, class, index, &mut rng));
        }
    }
    clips
}

/// Feature rows drawn from three disjoint boxes:
/// low `D̄ < 5, M̄ < 0.5`; medium `D̄ ∈ [8, 25], M̄ ∈ [1, 2.5]`;
/// high `D̄ ∈ (30, 60], M̄ ∈ (3, 8]`.
pub fn separable_dataset(rows: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let label = MovementClass::ALL[i % 3];
        let (frame_diff, flow_mag) = match label {
            MovementClass::Low => (rng.random_range(0.0..5.0), rng.random_range(0.0..0.5)),
            MovementClass::Medium => (rng.random_range(8.0..=25.0), rng.random_range(1.0..=2.5)),
            MovementClass::High => (
                60.0 - rng.random_range(0.0..30.0),
                8.0 - rng.random_range(0.0..5.0),
            ),
        };
        out.push(LabeledRow {
            features: MotionFeatures {
                frame_diff,
                flow_mag,
            },
            label,
        });
    }
    LabeledDataset::new(out)
}
