//! Sliding-window tiling, token geometry, and overlap-averaged logit fusion.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_h: usize,
    pub image_w: usize,
    /// Side of the square window, in pixels.
    pub crop: usize,
    pub stride: usize,
    /// Side of one ViT patch, in pixels.
    pub patch: usize,
}

impl GridSpec {
    pub fn new(image_h: usize, image_w: usize, crop: usize, stride: usize, patch: usize) -> Self {
        Self {
            image_h,
            image_w,
            crop,
            stride,
            patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::InvalidGrid("image extents must be positive".into()));
        }
        if self.patch == 0 || self.crop == 0 {
            return Err(Error::InvalidGrid("crop and patch must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidGrid("stride must be positive".into()));
        }
        if self.stride > self.crop {
            return Err(Error::InvalidGrid(format!(
                "stride {} exceeds crop {}",
                self.stride, self.crop
            )));
        }
        if !self.crop.is_multiple_of(self.patch) {
            return Err(Error::InvalidGrid(format!(
                "crop {} is not a multiple of patch {}",
                self.crop, self.patch
            )));
        }
        Ok(())
    }

    pub fn transposed(&self) -> Self {
        Self {
            image_h: self.image_w,
            image_w: self.image_h,
            ..*self
        }
    }
}

/// Pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PixelBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

pub type Pixel = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowGrid {
    spec: GridSpec,
    h_grids: usize,
    w_grids: usize,
    windows: Vec<Pixel>,
}

fn axis_count(dim: usize, crop: usize, stride: usize) -> usize {
    dim.saturating_sub(crop).div_ceil(stride) + 1
}

fn axis_origin(i: usize, dim: usize, crop: usize, stride: usize) -> usize {
    if dim >= crop {
        (i * stride).min(dim - crop)
    } else {
        0
    }
}

/// Tiles the image with overlapping square windows.
///
/// Per axis the window count is `ceil(max(dim - crop, 0) / stride) + 1` and the
/// `i`-th origin is `min(i * stride, dim - crop)`, so the last window is pulled
/// back flush with the image border. A crop larger than the image collapses
/// that axis to a single window at 0; such windows extend past the border and
/// are clipped wherever pixels are touched.
pub fn build_window_grid(spec: GridSpec) -> Result<WindowGrid> {
    spec.validate()?;
    let h_grids = axis_count(spec.image_h, spec.crop, spec.stride);
    let w_grids = axis_count(spec.image_w, spec.crop, spec.stride);
    let mut windows = Vec::with_capacity(h_grids * w_grids);
    for gy in 0..h_grids {
        let y0 = axis_origin(gy, spec.image_h, spec.crop, spec.stride);
        for gx in 0..w_grids {
            windows.push((y0, axis_origin(gx, spec.image_w, spec.crop, spec.stride)));
        }
    }
    Ok(WindowGrid {
        spec,
        h_grids,
        w_grids,
        windows,
    })
}

impl WindowGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Number of windows `L`.
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn h_grids(&self) -> usize {
        self.h_grids
    }

    pub fn w_grids(&self) -> usize {
        self.w_grids
    }

    /// Window origins `(y0, x0)` in row-major order.
    pub fn origins(&self) -> &[Pixel] {
        &self.windows
    }

    pub fn origin(&self, window_idx: usize) -> Result<Pixel> {
        self.windows
            .get(window_idx)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                what: "window",
                index: window_idx,
                len: self.windows.len(),
            })
    }

    /// Tokens per window side.
    pub fn n_side(&self) -> usize {
        self.spec.crop / self.spec.patch
    }

    /// Tokens per window.
    pub fn tokens_per_window(&self) -> usize {
        self.n_side() * self.n_side()
    }

    /// The window's crop box, clipped to the image.
    pub fn window_box(&self, window_idx: usize) -> Result<PixelBox> {
        let (y0, x0) = self.origin(window_idx)?;
        Ok(PixelBox {
            y0,
            y1: (y0 + self.spec.crop).min(self.spec.image_h),
            x0,
            x1: (x0 + self.spec.crop).min(self.spec.image_w),
        })
    }

    /// Pixels covered by token `token_idx` (row-major in the window's token grid).
    pub fn token_pixel_box(&self, window_idx: usize, token_idx: usize) -> Result<PixelBox> {
        let (y0, x0) = self.origin(window_idx)?;
        let n_side = self.n_side();
        if token_idx >= n_side * n_side {
            return Err(Error::IndexOutOfRange {
                what: "token",
                index: token_idx,
                len: n_side * n_side,
            });
        }
        let p = self.spec.patch;
        let (r, c) = (token_idx / n_side, token_idx % n_side);
        Ok(PixelBox {
            y0: y0 + r * p,
            y1: y0 + (r + 1) * p,
            x0: x0 + c * p,
            x1: x0 + (c + 1) * p,
        })
    }

    /// Index of the token in `window_idx` whose box contains image pixel
    /// `(y, x)`, if any.
    pub fn token_at(&self, window_idx: usize, y: usize, x: usize) -> Option<usize> {
        let (y0, x0) = *self.windows.get(window_idx)?;
        let (crop, p) = (self.spec.crop, self.spec.patch);
        if y < y0 || x < x0 || y >= y0 + crop || x >= x0 + crop {
            return None;
        }
        Some(((y - y0) / p) * self.n_side() + (x - x0) / p)
    }
}

/// Bilinearly resizes per-token logits `[N, C]` to a `[C, crop, crop]` map,
/// with half-pixel (align-corners off) sampling.
pub fn upsample_window_logits(tok_logits: &TensorF32, grid: &WindowGrid) -> Result<TensorF32> {
    let (n, c) = tok_logits.dims2()?;
    let side = grid.n_side();
    if n != side * side {
        return Err(Error::Shape(format!(
            "{n} token logits for a {side}x{side} token grid"
        )));
    }
    let out_side = grid.spec.crop;
    let taps = bilinear_taps(side, out_side);
    let src = tok_logits.data();
    let mut out = vec![0.0f32; c * out_side * out_side];
    for (oy, &(y0, y1, wy)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in taps.iter().enumerate() {
            let i00 = (y0 * side + x0) * c;
            let i01 = (y0 * side + x1) * c;
            let i10 = (y1 * side + x0) * c;
            let i11 = (y1 * side + x1) * c;
            for k in 0..c {
                let top = src[i00 + k] * (1.0 - wx) + src[i01 + k] * wx;
                let bottom = src[i10 + k] * (1.0 - wx) + src[i11 + k] * wx;
                out[(k * out_side + oy) * out_side + ox] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    TensorF32::new(vec![c, out_side, out_side], out)
}

/// Source index pair and blend weight per output coordinate.
fn bilinear_taps(in_size: usize, out_size: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            let w = if i1 == i0 {
                0.0
            } else {
                (src - i0 as f64) as f32
            };
            (i0, i1, w)
        })
        .collect()
}

/// Running sum and hit count of window logits over the full image.
#[derive(Debug, Clone)]
pub struct LogitAccumulator {
    sum: TensorF32,
    count: TensorF32,
}

impl LogitAccumulator {
    pub fn new(classes: usize, image_h: usize, image_w: usize) -> Result<Self> {
        Ok(Self {
            sum: TensorF32::zeros(vec![classes, image_h, image_w])?,
            count: TensorF32::zeros(vec![1, image_h, image_w])?,
        })
    }

    pub fn for_grid(classes: usize, grid: &WindowGrid) -> Result<Self> {
        Self::new(classes, grid.spec.image_h, grid.spec.image_w)
    }

    pub fn count(&self) -> &TensorF32 {
        &self.count
    }

    /// Adds `[C, s, s]` window logits with top-left corner at `origin`.
    /// Parts of the window past the image border are dropped.
    pub fn fuse(&mut self, window_logits: &TensorF32, origin: Pixel) -> Result<()> {
        let (c, h, w) = (
            self.sum.shape()[0],
            self.sum.shape()[1],
            self.sum.shape()[2],
        );
        let &[wc, wh, ww] = window_logits.shape() else {
            return Err(Error::Shape(format!(
                "window logits must be [C, h, w], got {:?}",
                window_logits.shape()
            )));
        };
        if wc != c {
            return Err(Error::Shape(format!(
                "window has {wc} classes, accumulator {c}"
            )));
        }
        let (oy, ox) = origin;
        if oy >= h || ox >= w {
            return Err(Error::IndexOutOfRange {
                what: "window origin",
                index: if oy >= h { oy } else { ox },
                len: if oy >= h { h } else { w },
            });
        }
        let rows = wh.min(h - oy);
        let cols = ww.min(w - ox);
        let src = window_logits.data();
        let sum = self.sum.data_mut();
        for k in 0..c {
            for y in 0..rows {
                let s = &src[(k * wh + y) * ww..(k * wh + y) * ww + cols];
                let d0 = (k * h + oy + y) * w + ox;
                for (dst, &v) in sum[d0..d0 + cols].iter_mut().zip(s) {
                    *dst += v;
                }
            }
        }
        let count = self.count.data_mut();
        for y in 0..rows {
            for v in &mut count[(oy + y) * w + ox..(oy + y) * w + ox + cols] {
                *v += 1.0;
            }
        }
        Ok(())
    }

    /// Per-pixel mean over the windows covering each pixel. Pixels no window
    /// touched are an error.
    pub fn finalize(&self) -> Result<TensorF32> {
        let plane = self.count.numel();
        if let Some(p) = self.count.data().iter().position(|&n| n < 1.0) {
            let w = self.sum.shape()[2];
            return Err(Error::Shape(format!(
                "pixel ({}, {}) not covered by any window",
                p / w,
                p % w
            )));
        }
        let mut out = self.sum.clone();
        for chunk in out.data_mut().chunks_exact_mut(plane.max(1)) {
            for (v, &n) in chunk.iter_mut().zip(self.count.data()) {
                *v /= n;
            }
        }
        Ok(out)
    }
}

/// Adjacent pixel pairs straddling interior window edges.
pub fn boundary_pairs(grid: &WindowGrid) -> Vec<(Pixel, Pixel)> {
    boundary_pairs_with_band(grid, 1)
}

/// Like [`boundary_pairs`], but also takes the pairs up to `band - 1` pixels
/// either side of each edge. `band = 1` is the edge itself.
pub fn boundary_pairs_with_band(grid: &WindowGrid, band: usize) -> Vec<(Pixel, Pixel)> {
    let GridSpec {
        image_h: h,
        image_w: w,
        crop,
        ..
    } = grid.spec;
    let mut x_edges = BTreeSet::new();
    let mut y_edges = BTreeSet::new();
    for &(y0, x0) in &grid.windows {
        for x in [x0, x0 + crop] {
            if x > 0 && x < w {
                x_edges.insert(x);
            }
        }
        for y in [y0, y0 + crop] {
            if y > 0 && y < h {
                y_edges.insert(y);
            }
        }
    }
    let band = band.max(1) as isize;
    let mut pairs = BTreeSet::new();
    for &x in &x_edges {
        for k in -(band - 1)..band {
            let right = x as isize + k;
            if right < 1 || right >= w as isize {
                continue;
            }
            let right = right as usize;
            for y in 0..h {
                pairs.insert(((y, right - 1), (y, right)));
            }
        }
    }
    for &y in &y_edges {
        for k in -(band - 1)..band {
            let below = y as isize + k;
            if below < 1 || below >= h as isize {
                continue;
            }
            let below = below as usize;
            for x in 0..w {
                pairs.insert(((below - 1, x), (below, x)));
            }
        }
    }
    pairs.into_iter().collect()
}
