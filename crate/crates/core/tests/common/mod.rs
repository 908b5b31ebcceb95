//! Brute-force oracles and random fixtures shared by the integration tests.
//!
//! Nothing here calls into the library's numeric kernels; each oracle is
//! written straight from the defining formula over plain nested `Vec`s.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

/// Unit vectors drawn around a few random cluster centres, so that
/// thresholded similarity sets are non-trivial.
pub fn clustered_unit_vectors(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    clusters: usize,
) -> Vec<Vec<f32>> {
    let centres: Vec<Vec<f32>> = (0..clusters.max(1))
        .map(|_| unit_vector(rng, dim))
        .collect();
    (0..count)
        .map(|_| {
            let c = &centres[rng.random_range(0..centres.len())];
            let noise: f64 = rng.random_range(0.0..0.8);
            let v: Vec<f64> = c
                .iter()
                .map(|&x| f64::from(x) + noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect()
}

fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

/// Single-window baseline: similarity of the VFM features with themselves,
/// global-mean shift and scale, negative masking, softmax, value aggregation
/// and affine projection. Similarities are f32 dot products of the f32
/// features; everything downstream is f64.
pub fn baseline_oracle(
    features: &[Vec<f32>],
    values: &[Vec<f32>],
    weight: &[Vec<f32>],
    bias: &[f32],
    beta: f32,
    gamma: f32,
) -> Vec<Vec<f64>> {
    let n = features.len();
    let s: Vec<Vec<f32>> = (0..n)
        .map(|i| (0..n).map(|j| dot32(&features[i], &features[j])).collect())
        .collect();
    let mut total = 0.0f64;
    for row in &s {
        for &v in row {
            total += f64::from(v);
        }
    }
    let mean = total / (n * n) as f64;
    let (beta, gamma) = (f64::from(beta), f64::from(gamma));
    let a: Vec<Vec<f64>> = s
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| gamma * (f64::from(v) - beta * mean))
                .collect()
        })
        .collect();
    let attn: Vec<Vec<f64>> = a.iter().map(|row| masked_softmax_oracle(row)).collect();

    let dc = values[0].len();
    let de = bias.len();
    let mut out = vec![vec![0.0f64; de]; n];
    for i in 0..n {
        let mut mixed = vec![0.0f64; dc];
        for j in 0..n {
            for c in 0..dc {
                mixed[c] += attn[i][j] * f64::from(values[j][c]);
            }
        }
        for e in 0..de {
            let mut acc = f64::from(bias[e]);
            for c in 0..dc {
                acc += mixed[c] * f64::from(weight[c][e]);
            }
            out[i][e] = acc;
        }
    }
    out
}

/// Softmax over entries `>= 0`, masked entries 0, all-negative rows one-hot
/// on the first maximum.
pub fn masked_softmax_oracle(row: &[f64]) -> Vec<f64> {
    let kept: Vec<usize> = (0..row.len()).filter(|&j| row[j] >= 0.0).collect();
    let mut out = vec![0.0; row.len()];
    if kept.is_empty() {
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        out[best] = 1.0;
        return out;
    }
    let m = kept
        .iter()
        .map(|&j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = kept.iter().map(|&j| (row[j] - m).exp()).sum();
    for &j in &kept {
        out[j] = (row[j] - m).exp() / z;
    }
    out
}

pub struct ProxyOracle {
    pub proxies: Vec<Vec<f32>>,
    pub sets: Vec<BTreeSet<usize>>,
    /// Threshold passes that came back empty and used the argmax fallback.
    pub fallbacks: usize,
}

/// Materializes the full query-key dot matrix at every round and thresholds it.
pub fn proxy_oracle(
    queries: &[Vec<f32>],
    keys: &[Vec<f32>],
    rho: f32,
    steps: usize,
    renormalize: bool,
) -> ProxyOracle {
    let mut fallbacks = 0;
    let mut threshold = |q: &[f32]| -> BTreeSet<usize> {
        let dots: Vec<f32> = keys.iter().map(|k| dot32(q, k)).collect();
        let set: BTreeSet<usize> = (0..keys.len()).filter(|&j| dots[j] > rho).collect();
        if !set.is_empty() {
            return set;
        }
        fallbacks += 1;
        let mut best = 0;
        for j in 1..dots.len() {
            if dots[j] > dots[best] {
                best = j;
            }
        }
        BTreeSet::from([best])
    };
    let mut proxies = Vec::new();
    let mut sets = Vec::new();
    for q0 in queries {
        let mut q = q0.clone();
        let mut set = threshold(&q);
        for _ in 0..steps {
            let d = q.len();
            let mut sum = vec![0.0f64; d];
            for &j in &set {
                for c in 0..d {
                    sum[c] += f64::from(keys[j][c]);
                }
            }
            q = sum.iter().map(|s| (s / set.len() as f64) as f32).collect();
            if renormalize {
                let norm = q
                    .iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt();
                if norm > 0.0 {
                    q = q.iter().map(|&v| (f64::from(v) / norm) as f32).collect();
                }
            }
            set = threshold(&q);
        }
        proxies.push(q);
        sets.push(set);
    }
    ProxyOracle {
        proxies,
        sets,
        fallbacks,
    }
}

/// Per-class IoU counted pixel by pixel. Ground-truth `ignore` pixels are
/// skipped; a predicted `ignore` is a miss.
pub fn miou_oracle(
    pred: &[u16],
    gt: &[u16],
    classes: usize,
    ignore: u16,
) -> (Vec<Option<f64>>, f64) {
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes as u16 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let union = tp + fp + fn_;
        per_class.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        100.0 * present.iter().sum::<f64>() / present.len() as f64
    };
    (per_class, mean)
}

/// Clipped window boxes `(y0, y1, x0, x1)` computed from first principles.
pub fn window_boxes_oracle(
    h: usize,
    w: usize,
    crop: usize,
    stride: usize,
) -> Vec<(usize, usize, usize, usize)> {
    let axis = |dim: usize| -> Vec<usize> {
        if dim <= crop {
            return vec![0];
        }
        let mut v = Vec::new();
        let mut o = 0;
        loop {
            if o + crop >= dim {
                v.push(dim - crop);
                break;
            }
            v.push(o);
            o += stride;
        }
        v.dedup();
        v
    };
    let mut out = Vec::new();
    for &y in &axis(h) {
        for &x in &axis(w) {
            out.push((y, (y + crop).min(h), x, (x + crop).min(w)));
        }
    }
    out
}

/// Boundary pairs: 4-adjacent pixel pairs that some window splits (contains
/// exactly one of).
pub fn boundary_pairs_oracle(
    h: usize,
    w: usize,
    crop: usize,
    stride: usize,
) -> BTreeSet<((usize, usize), (usize, usize))> {
    let boxes = window_boxes_oracle(h, w, crop, stride);
    let inside = |b: &(usize, usize, usize, usize), y: usize, x: usize| {
        y >= b.0 && y < b.1 && x >= b.2 && x < b.3
    };
    let mut out = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let mut nbrs = Vec::new();
            if x + 1 < w {
                nbrs.push((y, x + 1));
            }
            if y + 1 < h {
                nbrs.push((y + 1, x));
            }
            for (qy, qx) in nbrs {
                if boxes.iter().any(|b| inside(b, y, x) != inside(b, qy, qx)) {
                    out.insert(((y, x), (qy, qx)));
                }
            }
        }
    }
    out
}

pub fn ber_oracle(
    pred: &[u16],
    gt: &[u16],
    h: usize,
    w: usize,
    crop: usize,
    stride: usize,
    ignore: u16,
) -> (u64, u64) {
    let mut same = 0;
    let mut disagree = 0;
    for ((py, px), (qy, qx)) in boundary_pairs_oracle(h, w, crop, stride) {
        let (gp, gq) = (gt[py * w + px], gt[qy * w + qx]);
        if gp == ignore || gq == ignore {
            continue;
        }
        if gp == gq {
            same += 1;
            if pred[py * w + px] != pred[qy * w + qx] {
                disagree += 1;
            }
        }
    }
    (same, disagree)
}
