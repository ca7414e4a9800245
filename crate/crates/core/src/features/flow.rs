//! Dense two-frame optical flow by polynomial expansion (Farneback).
//!
//! Each pyramid level fits a quadratic `xᵀAx + bᵀx + c` to a Gaussian
//! weighted neighbourhood of every pixel in both frames. A displacement `d`
//! turns the first polynomial into the second with `b₂ = b₁ − 2Ad`, so the
//! per-pixel equations `A d = Δb` are aggregated over a box window and
//! solved in the least-squares sense. Coarse levels seed the finer ones and
//! every level refines its estimate `iterations` times, sampling the second
//! frame's expansion at the currently displaced position.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{resize_bilinear, FrameError, GrayFrame};

/// Added to the 2x2 determinant so textureless regions resolve to zero flow.
const DET_REGULARIZER: f32 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("invalid flow parameter: {0}")]
    InvalidParams(String),
    #[error("pyramid level {level} would be {width}x{height}, below poly_n = {poly_n}")]
    FrameTooSmall {
        level: usize,
        width: usize,
        height: usize,
        poly_n: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    /// Number of pyramid levels, including full resolution.
    pub pyramid_levels: usize,
    /// Per-level downscale factor in (0, 1).
    pub pyramid_scale: f64,
    /// Side of the box window the displacement equations are averaged over.
    pub window_size: usize,
    /// Refinement passes per level.
    pub iterations: usize,
    /// Polynomial expansion radius in pixels.
    pub poly_n: usize,
    /// Standard deviation of the expansion's Gaussian weighting.
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |msg: &str| Err(FlowError::InvalidParams(msg.to_string()));
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be positive");
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return bad("pyramid_scale must lie in (0, 1)");
        }
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return bad("window_size must be a positive odd integer");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.poly_n == 0 || self.poly_n % 2 == 0 {
            return bad("poly_n must be a positive odd integer");
        }
        if !(self.poly_sigma > 0.0 && self.poly_sigma.is_finite()) {
            return bad("poly_sigma must be positive");
        }
        Ok(())
    }

    fn level_sizes(&self, width: usize, height: usize) -> Result<Vec<(usize, usize)>, FlowError> {
        let mut sizes = Vec::with_capacity(self.pyramid_levels);
        let mut scale = 1.0f64;
        for level in 0..self.pyramid_levels {
            let w = (width as f64 * scale).round() as usize;
            let h = (height as f64 * scale).round() as usize;
            if w < self.poly_n || h < self.poly_n {
                return Err(FlowError::FrameTooSmall {
                    level,
                    width: w,
                    height: h,
                    poly_n: self.poly_n,
                });
            }
            sizes.push((w, h));
            scale *= self.pyramid_scale;
        }
        Ok(sizes)
    }
}

/// Per-pixel horizontal (`u`) and vertical (`v`) displacement in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn from_components(
        width: usize,
        height: usize,
        u: Vec<f32>,
        v: Vec<f32>,
    ) -> Result<Self, FrameError> {
        let expected = width * height;
        for len in [u.len(), v.len()] {
            if len != expected {
                return Err(FrameError::DataLength {
                    expected,
                    actual: len,
                });
            }
        }
        Ok(Self { width, height, u, v })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    fn resized(&self, new_w: usize, new_h: usize) -> FlowField {
        let sx = new_w as f32 / self.width as f32;
        let sy = new_h as f32 / self.height as f32;
        let mut u = resize_bilinear(&self.u, self.width, self.height, new_w, new_h);
        let mut v = resize_bilinear(&self.v, self.width, self.height, new_w, new_h);
        u.iter_mut().for_each(|c| *c *= sx);
        v.iter_mut().for_each(|c| *c *= sy);
        FlowField {
            width: new_w,
            height: new_h,
            u,
            v,
        }
    }
}

/// Estimates dense flow that carries `prev` onto `next`.
pub fn compute_flow(
    prev: &GrayFrame,
    next: &GrayFrame,
    params: &FlowParams,
) -> Result<FlowField, FlowError> {
    params.validate()?;
    prev.same_size(next)?;
    let (width, height) = (prev.width(), prev.height());
    if width < params.window_size || height < params.window_size {
        return Err(FrameError::TooSmall {
            width,
            height,
            min: params.window_size,
        }
        .into());
    }
    let sizes = params.level_sizes(width, height)?;
    let expansion = PolyExpansion::new(params.poly_n, params.poly_sigma);
    let src_prev = prev.to_f32();
    let src_next = next.to_f32();

    let mut flow: Option<FlowField> = None;
    for (level, &(lw, lh)) in sizes.iter().enumerate().rev() {
        let img_prev = pyramid_level(&src_prev, width, height, lw, lh, level, params.pyramid_scale);
        let img_next = pyramid_level(&src_next, width, height, lw, lh, level, params.pyramid_scale);
        let poly_prev = expansion.apply(&img_prev, lw, lh);
        let poly_next = expansion.apply(&img_next, lw, lh);

        let mut current = match flow.take() {
            Some(coarse) => coarse.resized(lw, lh),
            None => FlowField::zeros(lw, lh),
        };
        for _ in 0..params.iterations {
            let mut eqs = displacement_equations(&poly_prev, &poly_next, &current);
            eqs.box_blur(params.window_size);
            eqs.solve_into(&mut current);
        }
        flow = Some(current);
    }
    Ok(flow.expect("at least one pyramid level"))
}

/// Gaussian-smoothed, resampled copy of the source for one pyramid level.
fn pyramid_level(
    src: &[f32],
    width: usize,
    height: usize,
    lw: usize,
    lh: usize,
    level: usize,
    pyramid_scale: f64,
) -> Vec<f32> {
    if level == 0 {
        return src.to_vec();
    }
    let scale = pyramid_scale.powi(level as i32);
    let sigma = (1.0 / scale - 1.0) * 0.5;
    let radius = ((sigma * 5.0).round() as usize / 2).max(1);
    let kernel = gaussian_kernel(radius, sigma);
    let blurred = separable_filter(src, width, height, &kernel);
    resize_bilinear(&blurred, width, height, lw, lh)
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f32> {
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| (w / sum) as f32).collect()
}

fn separable_filter(src: &[f32], width: usize, height: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xi = clamp_index(x as isize + k as isize - r, width);
                acc += w * row[xi];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..height {
        for (k, w) in kernel.iter().enumerate() {
            let yi = clamp_index(y as isize + k as isize - r, height);
            let src_row = &tmp[yi * width..(yi + 1) * width];
            let dst_row = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += w * s;
            }
        }
    }
    out
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Quadratic fit coefficients per pixel: `b = (bx, by)` and the symmetric
/// `A = [[axx, axy], [axy, ayy]]` (off-diagonal already halved).
struct PolyField {
    width: usize,
    height: usize,
    /// `[bx, by, axx, ayy, axy]` per pixel.
    coeffs: Vec<[f32; 5]>,
}

impl PolyField {
    fn sample(&self, x: f32, y: f32) -> Option<[f32; 5]> {
        let max_x = (self.width - 1) as f32;
        let max_y = (self.height - 1) as f32;
        if !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let c00 = &self.coeffs[y0 * self.width + x0];
        let c10 = &self.coeffs[y0 * self.width + x1];
        let c01 = &self.coeffs[y1 * self.width + x0];
        let c11 = &self.coeffs[y1 * self.width + x1];
        let mut out = [0.0f32; 5];
        for k in 0..5 {
            let top = c00[k] * (1.0 - fx) + c10[k] * fx;
            let bottom = c01[k] * (1.0 - fx) + c11[k] * fx;
            out[k] = top * (1.0 - fy) + bottom * fy;
        }
        Some(out)
    }
}

/// Weighted least-squares quadratic fit, precomputed for one radius/sigma.
struct PolyExpansion {
    radius: usize,
    /// Gaussian weights `g(t)` and the products `t·g(t)`, `t²·g(t)`.
    g: Vec<f64>,
    xg: Vec<f64>,
    xxg: Vec<f64>,
    /// Inverse Gram matrix over basis `[1, x, y, x², y², xy]`.
    gram_inv: [[f64; 6]; 6],
}

impl PolyExpansion {
    fn new(radius: usize, sigma: f64) -> Self {
        let r = radius as i64;
        let raw: Vec<f64> = (-r..=r)
            .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        let g: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let offsets: Vec<f64> = (-r..=r).map(|t| t as f64).collect();
        let xg: Vec<f64> = g.iter().zip(&offsets).map(|(w, t)| w * t).collect();
        let xxg: Vec<f64> = g.iter().zip(&offsets).map(|(w, t)| w * t * t).collect();

        let mut gram = [[0.0f64; 6]; 6];
        for (j, &ty) in offsets.iter().enumerate() {
            for (i, &tx) in offsets.iter().enumerate() {
                let w = g[i] * g[j];
                let basis = [1.0, tx, ty, tx * tx, ty * ty, tx * ty];
                for a in 0..6 {
                    for b in 0..6 {
                        gram[a][b] += w * basis[a] * basis[b];
                    }
                }
            }
        }
        let gram_inv = invert6(gram).expect("Gaussian-weighted quadratic Gram matrix is invertible");
        Self {
            radius,
            g,
            xg,
            xxg,
            gram_inv,
        }
    }

    fn apply(&self, img: &[f32], width: usize, height: usize) -> PolyField {
        let r = self.radius as isize;
        let n = img.len();
        // Horizontal moments: Σg·f, Σt·g·f, Σt²·g·f.
        let mut h0 = vec![0.0f64; n];
        let mut h1 = vec![0.0f64; n];
        let mut h2 = vec![0.0f64; n];
        for y in 0..height {
            let row = &img[y * width..(y + 1) * width];
            for x in 0..width {
                let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                for k in 0..self.g.len() {
                    let f = row[clamp_index(x as isize + k as isize - r, width)] as f64;
                    s0 += self.g[k] * f;
                    s1 += self.xg[k] * f;
                    s2 += self.xxg[k] * f;
                }
                let i = y * width + x;
                h0[i] = s0;
                h1[i] = s1;
                h2[i] = s2;
            }
        }

        let mut coeffs = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                let mut m = [0.0f64; 6];
                for k in 0..self.g.len() {
                    let yi = clamp_index(y as isize + k as isize - r, height);
                    let i = yi * width + x;
                    m[0] += self.g[k] * h0[i];
                    m[1] += self.g[k] * h1[i];
                    m[2] += self.xg[k] * h0[i];
                    m[3] += self.g[k] * h2[i];
                    m[4] += self.xxg[k] * h0[i];
                    m[5] += self.xg[k] * h1[i];
                }
                let mut c = [0.0f64; 6];
                for (a, row) in self.gram_inv.iter().enumerate() {
                    c[a] = row.iter().zip(&m).map(|(g, v)| g * v).sum();
                }
                coeffs.push([
                    c[1] as f32,
                    c[2] as f32,
                    c[3] as f32,
                    c[4] as f32,
                    (c[5] * 0.5) as f32,
                ]);
            }
        }
        PolyField {
            width,
            height,
            coeffs,
        }
    }
}

fn invert6(mut m: [[f64; 6]; 6]) -> Option<[[f64; 6]; 6]> {
    let mut inv = [[0.0f64; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for k in 0..6 {
            m[col][k] /= p;
            inv[col][k] /= p;
        }
        for row in 0..6 {
            if row != col {
                let factor = m[row][col];
                if factor != 0.0 {
                    for k in 0..6 {
                        m[row][k] -= factor * m[col][k];
                        inv[row][k] -= factor * inv[col][k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Normal-equation terms `[G11, G12, G22, h1, h2]` per pixel.
struct Equations {
    width: usize,
    height: usize,
    terms: Vec<[f32; 5]>,
}

fn displacement_equations(prev: &PolyField, next: &PolyField, flow: &FlowField) -> Equations {
    let (width, height) = (prev.width, prev.height);
    let mut terms = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let (dx, dy) = (flow.u[i], flow.v[i]);
            let p = &prev.coeffs[i];
            let Some(q) = next.sample(x as f32 + dx, y as f32 + dy) else {
                terms.push([0.0; 5]);
                continue;
            };
            let a11 = (p[2] + q[2]) * 0.5;
            let a22 = (p[3] + q[3]) * 0.5;
            let a12 = (p[4] + q[4]) * 0.5;
            let db1 = -0.5 * (q[0] - p[0]) + a11 * dx + a12 * dy;
            let db2 = -0.5 * (q[1] - p[1]) + a12 * dx + a22 * dy;
            terms.push([
                a11 * a11 + a12 * a12,
                a12 * (a11 + a22),
                a12 * a12 + a22 * a22,
                a11 * db1 + a12 * db2,
                a12 * db1 + a22 * db2,
            ]);
        }
    }
    Equations {
        width,
        height,
        terms,
    }
}

impl Equations {
    /// Mean over a `size`x`size` window, edges replicated.
    fn box_blur(&mut self, size: usize) {
        let r = (size / 2) as isize;
        let (w, h) = (self.width, self.height);
        let norm = 1.0 / size as f32;
        let mut tmp = vec![[0.0f32; 5]; self.terms.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 5];
                for d in -r..=r {
                    let t = &self.terms[y * w + clamp_index(x as isize + d, w)];
                    for k in 0..5 {
                        acc[k] += t[k];
                    }
                }
                tmp[y * w + x] = acc.map(|v| v * norm);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 5];
                for d in -r..=r {
                    let t = &tmp[clamp_index(y as isize + d, h) * w + x];
                    for k in 0..5 {
                        acc[k] += t[k];
                    }
                }
                self.terms[y * w + x] = acc.map(|v| v * norm);
            }
        }
    }

    fn solve_into(&self, flow: &mut FlowField) {
        for (i, t) in self.terms.iter().enumerate() {
            let [g11, g12, g22, h1, h2] = *t;
            let idet = 1.0 / (g11 * g22 - g12 * g12 + DET_REGULARIZER);
            flow.u[i] = (g22 * h1 - g12 * h2) * idet;
            flow.v[i] = (g11 * h2 - g12 * h1) * idet;
        }
    }
}
