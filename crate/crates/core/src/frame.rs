//! Grayscale frames and the two-frame batches the pipeline works on.

use thiserror::Error;

/// Smallest frame side accepted for motion feature extraction.
pub const MIN_FEATURE_SIDE: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("dimension mismatch: expected {expected} values, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("frames differ in size: {a_width}x{a_height} vs {b_width}x{b_height}")]
    SizeMismatch {
        a_width: usize,
        a_height: usize,
        b_width: usize,
        b_height: usize,
    },
    #[error("frame has zero area")]
    Empty,
    #[error("frame {width}x{height} is below the {min}x{min} minimum")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("batch frames are not in capture order ({first} ms, then {second} ms)")]
    Unordered { first: u64, second: u64 },
}

/// A single-channel 8-bit frame with its capture timestamp.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    timestamp_ms: u64,
}

impl std::fmt::Debug for GrayFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrayFrame")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("timestamp_ms", &self.timestamp_ms)
            .finish_non_exhaustive()
    }
}

impl GrayFrame {
    /// Wraps row-major pixel data.
    ///
    /// Any non-empty size is accepted here; the 16x16 floor applies to
    /// feature extraction, see [`GrayFrame::check_feature_size`].
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        timestamp_ms: u64,
    ) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::Empty);
        }
        let expected = width * height;
        if pixels.len() != expected {
            return Err(FrameError::DataLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp_ms,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8, timestamp_ms: u64) -> Self {
        Self::new(width, height, vec![value; width * height], timestamp_ms)
            .expect("filled frame has consistent size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }

    pub fn with_timestamp(mut self, timestamp_ms: u64) -> Self {
        self.timestamp_ms = timestamp_ms;
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn same_size(&self, other: &GrayFrame) -> Result<(), FrameError> {
        if self.width != other.width || self.height != other.height {
            return Err(FrameError::SizeMismatch {
                a_width: self.width,
                a_height: self.height,
                b_width: other.width,
                b_height: other.height,
            });
        }
        Ok(())
    }

    pub fn check_feature_size(&self) -> Result<(), FrameError> {
        if self.width < MIN_FEATURE_SIDE || self.height < MIN_FEATURE_SIDE {
            return Err(FrameError::TooSmall {
                width: self.width,
                height: self.height,
                min: MIN_FEATURE_SIDE,
            });
        }
        Ok(())
    }

    /// Pixels widened to `f32` for arithmetic.
    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32).collect()
    }

    /// Bilinear downscale so the longer side is at most `max_side`.
    /// Frames already within bounds are returned unchanged.
    pub fn downscale_to_fit(&self, max_side: usize) -> GrayFrame {
        let longest = self.width.max(self.height);
        if max_side == 0 || longest <= max_side {
            return self.clone();
        }
        let ratio = max_side as f64 / longest as f64;
        let new_w = ((self.width as f64 * ratio).round() as usize).max(1);
        let new_h = ((self.height as f64 * ratio).round() as usize).max(1);
        let src = self.to_f32();
        let resized = resize_bilinear(&src, self.width, self.height, new_w, new_h);
        let pixels = resized
            .into_iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayFrame {
            width: new_w,
            height: new_h,
            pixels,
            timestamp_ms: self.timestamp_ms,
        }
    }
}

/// An 8-bit interleaved RGB frame as delivered by a decoder.
#[derive(Debug, Clone)]
pub struct RgbFrame<'a> {
    pub width: usize,
    pub height: usize,
    pub data: &'a [u8],
}

/// BT.601 luma conversion: `Y = 0.299 R + 0.587 G + 0.114 B`, rounded.
pub fn to_grayscale(rgb: &RgbFrame<'_>, timestamp_ms: u64) -> Result<GrayFrame, FrameError> {
    if rgb.width == 0 || rgb.height == 0 {
        return Err(FrameError::Empty);
    }
    let expected = rgb.width * rgb.height * 3;
    if rgb.data.len() != expected {
        return Err(FrameError::DataLength {
            expected,
            actual: rgb.data.len(),
        });
    }
    let pixels = rgb
        .data
        .chunks_exact(3)
        .map(|px| {
            let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayFrame::new(rgb.width, rgb.height, pixels, timestamp_ms)
}

/// The unit of pipeline work: two consecutive frames of one session.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    frames: [GrayFrame; 2],
    batch_index: u64,
}

impl FrameBatch {
    pub fn new(first: GrayFrame, second: GrayFrame, batch_index: u64) -> Result<Self, FrameError> {
        first.same_size(&second)?;
        if first.timestamp_ms >= second.timestamp_ms {
            return Err(FrameError::Unordered {
                first: first.timestamp_ms,
                second: second.timestamp_ms,
            });
        }
        Ok(Self {
            frames: [first, second],
            batch_index,
        })
    }

    pub fn first(&self) -> &GrayFrame {
        &self.frames[0]
    }

    pub fn second(&self) -> &GrayFrame {
        &self.frames[1]
    }

    pub fn batch_index(&self) -> u64 {
        self.batch_index
    }
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub(crate) fn resize_bilinear(
    src: &[f32],
    width: usize,
    height: usize,
    new_w: usize,
    new_h: usize,
) -> Vec<f32> {
    let sx = width as f32 / new_w as f32;
    let sy = height as f32 / new_h as f32;
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let wy = fy - y0 as f32;
        for x in 0..new_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * width + x0] * (1.0 - wx) + src[y0 * width + x1] * wx;
            let bottom = src[y1 * width + x0] * (1.0 - wx) + src[y1 * width + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}
