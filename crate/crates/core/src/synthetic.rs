//! Planted-layout feature bundles with a known answer.
//!
//! Class `c` owns one or more rectangles of the image. Every token whose
//! centre falls in a class-`c` rectangle gets VFM features and value tokens
//! equal to the basis vector `e_c`, rotated away from it by a random angle of
//! at most `spread` radians. Text embedding `c` is exactly `e_c` and the
//! projection is the identity, so with `spread = 0` segmentation must
//! reproduce the layout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{ProjectionHead, TokenBank};
use crate::error::{Error, Result};
use crate::grid::{build_window_grid, GridSpec};
use crate::segmenter::{ClassEntry, FeatureBundle, FeatureMode, LabelMap, SubclassEntry};
use crate::tensor::TensorF32;

pub const GT_FILE: &str = "gt.pgm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedRect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub grid: GridSpec,
    pub classes: usize,
    /// Maximum angle, in radians, between a token and its class axis.
    pub spread: f64,
    pub seed: u64,
    /// Feature width; at least `classes`.
    pub dim: usize,
    pub layout: Vec<PlantedRect>,
}

impl SyntheticSpec {
    /// Spec with [`default_layout`].
    pub fn new(grid: GridSpec, classes: usize, spread: f64, seed: u64) -> Self {
        Self {
            grid,
            classes,
            spread,
            seed,
            dim: classes,
            layout: default_layout(grid.image_h, grid.image_w, classes, grid.patch),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.classes < 2 {
            return Err(Error::InvalidConfig(
                "synthetic layouts need at least 2 classes".into(),
            ));
        }
        if self.dim < self.classes {
            return Err(Error::InvalidConfig(format!(
                "feature dim {} smaller than class count {}",
                self.dim, self.classes
            )));
        }
        if !(self.spread >= 0.0) {
            return Err(Error::InvalidConfig("spread must be non-negative".into()));
        }
        self.label_map().map(|_| ())
    }

    /// Ground truth at image resolution. Fails unless the rectangles tile the
    /// image exactly.
    pub fn label_map(&self) -> Result<LabelMap> {
        let (h, w) = (self.grid.image_h, self.grid.image_w);
        let mut labels = vec![u16::MAX; h * w];
        for r in &self.layout {
            if r.class >= self.classes || r.y1 > h || r.x1 > w || r.y0 >= r.y1 || r.x0 >= r.x1 {
                return Err(Error::InvalidConfig(format!("bad planted rectangle {r:?}")));
            }
            for y in r.y0..r.y1 {
                for l in &mut labels[y * w + r.x0..y * w + r.x1] {
                    if *l != u16::MAX {
                        return Err(Error::InvalidConfig(format!(
                            "planted rectangles overlap at row {y}"
                        )));
                    }
                    *l = r.class as u16;
                }
            }
        }
        if let Some(p) = labels.iter().position(|&l| l == u16::MAX) {
            return Err(Error::InvalidConfig(format!(
                "planted rectangles leave pixel ({}, {}) uncovered",
                p / w,
                p % w
            )));
        }
        LabelMap::new(h, w, labels)
    }
}

/// Splits the image into a `rows x cols` block grid with `rows * cols =
/// classes`, `rows` the largest divisor not above `sqrt(classes)`. Cut lines
/// are snapped to multiples of `patch` when possible.
pub fn default_layout(
    image_h: usize,
    image_w: usize,
    classes: usize,
    patch: usize,
) -> Vec<PlantedRect> {
    let classes = classes.max(1);
    let rows = (1..=classes)
        .take_while(|r| r * r <= classes)
        .filter(|r| classes.is_multiple_of(*r))
        .last()
        .unwrap_or(1);
    let cols = classes / rows;
    let ys = cuts(image_h, rows, patch);
    let xs = cuts(image_w, cols, patch);
    let mut out = Vec::with_capacity(classes);
    for r in 0..rows {
        for c in 0..cols {
            out.push(PlantedRect {
                y0: ys[r],
                x0: xs[c],
                y1: ys[r + 1],
                x1: xs[c + 1],
                class: r * cols + c,
            });
        }
    }
    out
}

fn cuts(len: usize, parts: usize, patch: usize) -> Vec<usize> {
    let mut out = vec![0];
    for k in 1..parts {
        let raw = (len * k) as f64 / parts as f64;
        let snapped = ((raw / patch as f64).round() as usize) * patch;
        let prev = *out.last().unwrap();
        let cut = if snapped > prev && snapped < len {
            snapped
        } else {
            raw.round() as usize
        };
        out.push(cut.clamp(prev + 1, len - 1));
    }
    out.push(len);
    out
}

fn perturbed_axis(rng: &mut ChaCha8Rng, axis: usize, dim: usize, spread: f64) -> Vec<f32> {
    let theta = if spread > 0.0 {
        rng.random_range(0.0..=spread)
    } else {
        0.0
    };
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    dir[axis] = 0.0;
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out: Vec<f64> = vec![0.0; dim];
    out[axis] = theta.cos();
    if norm > 0.0 {
        for (o, d) in out.iter_mut().zip(&dir) {
            *o += theta.sin() * d / norm;
        }
    }
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.iter().map(|v| (v / n) as f32).collect()
}

/// Builds the bundle and its ground truth.
pub fn generate(spec: &SyntheticSpec) -> Result<(FeatureBundle, LabelMap)> {
    spec.validate()?;
    let gt = spec.label_map()?;
    let grid = build_window_grid(spec.grid)?;
    let (h, w) = (spec.grid.image_h, spec.grid.image_w);
    let half = spec.grid.patch / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = grid.tokens_per_window();
    let mut vfm = Vec::with_capacity(grid.len());
    let mut values = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let mut f = Vec::with_capacity(n * spec.dim);
        let mut v = Vec::with_capacity(n * spec.dim);
        for t in 0..n {
            let b = grid.token_pixel_box(k, t)?;
            let (cy, cx) = ((b.y0 + half).min(h - 1), (b.x0 + half).min(w - 1));
            let class = usize::from(gt.get(cy, cx));
            f.extend(perturbed_axis(&mut rng, class, spec.dim, spec.spread));
            v.extend(perturbed_axis(&mut rng, class, spec.dim, spec.spread));
        }
        vfm.push(TensorF32::new(vec![n, spec.dim], f)?);
        values.push(TensorF32::new(vec![n, spec.dim], v)?);
    }
    let bank = TokenBank::from_windows(&vfm, &values)?;
    let mut text = vec![0.0f32; spec.classes * spec.dim];
    for c in 0..spec.classes {
        text[c * spec.dim + c] = 1.0;
    }
    let text = TensorF32::new(vec![spec.classes, spec.dim], text)?;
    let classes = (0..spec.classes)
        .map(|c| ClassEntry {
            name: format!("class_{c}"),
            background: false,
        })
        .collect();
    let subclasses = (0..spec.classes)
        .map(|c| SubclassEntry {
            name: format!("class_{c}"),
            class_index: c,
        })
        .collect();
    let bundle = FeatureBundle::from_parts(
        "synthetic",
        FeatureMode::VfmFeatures,
        spec.grid,
        bank,
        ProjectionHead::identity(spec.dim),
        text,
        classes,
        subclasses,
    )?;
    Ok((bundle, gt))
}

/// Writes the bundle plus `gt.pgm` into `dir`.
pub fn write_synthetic(
    spec: &SyntheticSpec,
    dir: impl AsRef<Path>,
) -> Result<(FeatureBundle, LabelMap)> {
    let dir = dir.as_ref();
    let (bundle, gt) = generate(spec)?;
    bundle.save(dir)?;
    gt.write(dir.join(GT_FILE))?;
    Ok((bundle, gt))
}
