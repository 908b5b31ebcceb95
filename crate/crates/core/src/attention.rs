//! Global-local aligned attention.
//!
//! Every window's queries attend over the keys and values of *all* windows
//! (key-value extension). Each query is first replaced by a proxy anchor: the
//! mean of the global keys whose cosine similarity with it exceeds `rho`,
//! refined for `steps` rounds. The proxy-key similarity map is then shifted and
//! scaled, either by the fixed global-mean rule or by the dynamic per-row rule
//! whose shift grows with the window count and whose scale shrinks with the
//! size of the query's positive set. Negative scores are masked out before the
//! softmax and the attention weights aggregate CLIP value tokens, followed by
//! the final projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::WindowGrid;
use crate::tensor::{dot, matmul, matmul_transposed, normalize_in_place, TensorF32};

/// Tolerance on the unit norm of VFM feature rows.
pub const UNIT_NORM_TOL: f32 = 1e-5;

/// Per-window VFM features and CLIP value tokens, stacked window-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBank {
    vfm: TensorF32,
    values: TensorF32,
}

impl TokenBank {
    /// `vfm` is `[L, N, D_v]` with unit-norm (or zero) rows, `values` is `[L, N, D_c]`.
    pub fn new(vfm: TensorF32, values: TensorF32) -> Result<Self> {
        let (&[l, n, _], &[l2, n2, _]) = (vfm.shape(), values.shape()) else {
            return Err(Error::Shape(format!(
                "token bank wants [L, N, D] tensors, got {:?} and {:?}",
                vfm.shape(),
                values.shape()
            )));
        };
        if (l, n) != (l2, n2) {
            return Err(Error::Shape(format!(
                "vfm has {l}x{n} tokens, values {l2}x{n2}"
            )));
        }
        if l == 0 || n == 0 {
            return Err(Error::Shape(
                "token bank needs at least one window and token".into(),
            ));
        }
        let d = vfm.shape()[2];
        if d > 0 {
            for (i, row) in vfm.data().chunks_exact(d).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                if norm != 0.0 && (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Shape(format!(
                        "vfm token {} of window {} has norm {norm}, expected 1",
                        i % n,
                        i / n
                    )));
                }
            }
        }
        Ok(Self { vfm, values })
    }

    /// Stacks per-window `[N, D_v]` and `[N, D_c]` matrices.
    pub fn from_windows(vfm: &[TensorF32], values: &[TensorF32]) -> Result<Self> {
        Self::new(stack(vfm)?, stack(values)?)
    }

    pub fn windows(&self) -> usize {
        self.vfm.shape()[0]
    }

    pub fn tokens_per_window(&self) -> usize {
        self.vfm.shape()[1]
    }

    pub fn vfm_dim(&self) -> usize {
        self.vfm.shape()[2]
    }

    pub fn value_dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn vfm(&self) -> &TensorF32 {
        &self.vfm
    }

    pub fn values(&self) -> &TensorF32 {
        &self.values
    }

    /// VFM features of one window, `[N, D_v]`.
    pub fn window_vfm(&self, window_idx: usize) -> Result<TensorF32> {
        window_slice(&self.vfm, window_idx)
    }

    pub fn window_values(&self, window_idx: usize) -> Result<TensorF32> {
        window_slice(&self.values, window_idx)
    }
}

fn stack(parts: &[TensorF32]) -> Result<TensorF32> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("no windows to stack".into()))?;
    let (n, d) = first.dims2()?;
    let mut data = Vec::with_capacity(parts.len() * n * d);
    for (w, p) in parts.iter().enumerate() {
        if p.dims2()? != (n, d) {
            return Err(Error::Shape(format!(
                "window {w} has shape {:?}, window 0 has [{n}, {d}]",
                p.shape()
            ))
            .in_window(w));
        }
        data.extend_from_slice(p.data());
    }
    TensorF32::new(vec![parts.len(), n, d], data)
}

fn window_slice(t: &TensorF32, window_idx: usize) -> Result<TensorF32> {
    let &[l, n, d] = t.shape() else {
        unreachable!()
    };
    if window_idx >= l {
        return Err(Error::IndexOutOfRange {
            what: "window",
            index: window_idx,
            len: l,
        });
    }
    TensorF32::new(
        vec![n, d],
        t.data()[window_idx * n * d..(window_idx + 1) * n * d].to_vec(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    /// Cosine threshold for the positive set (strict `>`).
    pub rho: f32,
    /// Refinement rounds; 0 keeps the raw queries.
    pub steps: usize,
    /// L2-normalize the proxy after each averaging round.
    pub renormalize: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            rho: 0.6,
            steps: 2,
            renormalize: true,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!(
                "rho {} outside [-1, 1)",
                self.rho
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub mode: NormMode,
    /// Fixed-mode shift on the global mean.
    pub beta: f32,
    /// Fixed-mode scale.
    pub gamma: f32,
    /// Window-count coefficient of the dynamic shift.
    pub lambda1: f32,
    /// Positive-set coefficient of the dynamic scale.
    pub lambda2: f32,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            mode: NormMode::Dynamic,
            beta: 1.2,
            gamma: 3.0,
            lambda1: 0.3,
            lambda2: 30.0,
        }
    }
}

impl NormConfig {
    pub fn fixed(beta: f32, gamma: f32) -> Self {
        Self {
            mode: NormMode::Fixed,
            beta,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma {} must be > 0",
                self.gamma
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda1 {} and lambda2 {} must be >= 0",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Proxy anchors for one window's queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyState {
    /// `[N, D_v]`
    pub proxies: TensorF32,
    /// Indices into the flattened global tokens, ascending.
    pub positive_sets: Vec<Vec<usize>>,
}

impl ProxyState {
    pub fn positive_counts(&self) -> Vec<usize> {
        self.positive_sets.iter().map(Vec::len).collect()
    }
}

/// Affine map applied to attended value tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    weight: TensorF32,
    bias: TensorF32,
}

impl ProjectionHead {
    /// `weight: [D_c, D_e]`, `bias: [D_e]`.
    pub fn new(weight: TensorF32, bias: TensorF32) -> Result<Self> {
        let (_, de) = weight.dims2()?;
        if bias.shape() != [de] {
            return Err(Error::Shape(format!(
                "projection bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self {
            weight: TensorF32::new(vec![dim, dim], w).unwrap(),
            bias: TensorF32::zeros(vec![dim]).unwrap(),
        }
    }

    pub fn weight(&self) -> &TensorF32 {
        &self.weight
    }

    pub fn bias(&self) -> &TensorF32 {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `q · kᵀ`
pub fn self_similarity(q: &TensorF32, k: &TensorF32) -> Result<TensorF32> {
    matmul_transposed(q, k)
}

/// Flattens the bank into global keys `[L·N, D_v]` and values `[L·N, D_c]`,
/// window-major.
pub fn extend_key_value(bank: &TokenBank) -> (TensorF32, TensorF32) {
    let rows = bank.windows() * bank.tokens_per_window();
    let k = TensorF32::new(vec![rows, bank.vfm_dim()], bank.vfm.data().to_vec()).unwrap();
    let v = TensorF32::new(vec![rows, bank.value_dim()], bank.values.data().to_vec()).unwrap();
    (k, v)
}

/// Replaces every VFM token by the mean of itself, its in-window 8-neighbours
/// and the tokens of other windows covering the same image position, then
/// L2-normalizes. Returns `[L, N, D_v]`.
pub fn smooth_queries(bank: &TokenBank, grid: &WindowGrid) -> Result<TensorF32> {
    check_geometry(bank, grid)?;
    let (l, n, d) = (bank.windows(), bank.tokens_per_window(), bank.vfm_dim());
    let mut data = Vec::with_capacity(l * n * d);
    for w in 0..l {
        data.extend(smooth_window_queries(bank, grid, w)?.into_data());
    }
    TensorF32::new(vec![l, n, d], data)
}

/// Smoothed queries of a single window, `[N, D_v]`.
pub fn smooth_window_queries(
    bank: &TokenBank,
    grid: &WindowGrid,
    window_idx: usize,
) -> Result<TensorF32> {
    check_geometry(bank, grid)?;
    let (n, d) = (bank.tokens_per_window(), bank.vfm_dim());
    let side = grid.n_side();
    let half = grid.spec().patch / 2;
    let vfm = bank.vfm.data();
    let token = |w: usize, t: usize| &vfm[(w * n + t) * d..(w * n + t + 1) * d];
    let mut out = Vec::with_capacity(n * d);
    let mut acc = vec![0.0f64; d];
    for t in 0..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut members = 0usize;
        let mut add = |row: &[f32]| {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += f64::from(v);
            }
            members += 1;
        };
        let (r, c) = ((t / side) as isize, (t % side) as isize);
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= side as isize || cc >= side as isize {
                    continue;
                }
                add(token(window_idx, rr as usize * side + cc as usize));
            }
        }
        let b = grid.token_pixel_box(window_idx, t)?;
        let (cy, cx) = (b.y0 + half, b.x0 + half);
        for other in (0..grid.len()).filter(|&o| o != window_idx) {
            if let Some(ot) = grid.token_at(other, cy, cx) {
                add(token(other, ot));
            }
        }
        let mut row: Vec<f32> = acc.iter().map(|&a| (a / members as f64) as f32).collect();
        normalize_in_place(&mut row);
        out.extend(row);
    }
    TensorF32::new(vec![n, d], out)
}

fn check_geometry(bank: &TokenBank, grid: &WindowGrid) -> Result<()> {
    if bank.windows() != grid.len() || bank.tokens_per_window() != grid.tokens_per_window() {
        return Err(Error::Shape(format!(
            "bank holds {} windows x {} tokens, grid has {} windows x {} tokens",
            bank.windows(),
            bank.tokens_per_window(),
            grid.len(),
            grid.tokens_per_window()
        )));
    }
    Ok(())
}

/// Iteratively pulls each query towards the mean of its high-similarity
/// global keys.
///
/// Each round thresholds `q · k_j > rho` over all global keys and replaces `q`
/// by the mean of the selected keys. An empty positive set falls back to the
/// single most similar key (lowest index on ties). The reported positive set
/// is the threshold pass over the final proxy, so with `steps = 0` it is the
/// pass over the raw query.
pub fn build_proxies(
    queries: &TensorF32,
    k_global: &TensorF32,
    cfg: &ProxyConfig,
) -> Result<ProxyState> {
    let (n, d) = queries.dims2()?;
    let (m, dk) = k_global.dims2()?;
    if d != dk {
        return Err(Error::Shape(format!(
            "queries have dim {d}, global keys {dk}"
        )));
    }
    if m == 0 {
        return Err(Error::Shape("no global keys".into()));
    }
    let keys = k_global.data();
    let mut proxies = Vec::with_capacity(n * d);
    let mut positive_sets = Vec::with_capacity(n);
    let mut sum = vec![0.0f64; d];
    for i in 0..n {
        let mut q = queries.row(i).to_vec();
        let mut positives = positive_set(&q, keys, d, cfg.rho);
        for _ in 0..cfg.steps {
            sum.iter_mut().for_each(|s| *s = 0.0);
            for &j in &positives {
                for (s, &v) in sum.iter_mut().zip(&keys[j * d..(j + 1) * d]) {
                    *s += f64::from(v);
                }
            }
            let count = positives.len() as f64;
            for (qv, &s) in q.iter_mut().zip(&sum) {
                *qv = (s / count) as f32;
            }
            if cfg.renormalize {
                normalize_in_place(&mut q);
            }
            positives = positive_set(&q, keys, d, cfg.rho);
        }
        proxies.extend_from_slice(&q);
        positive_sets.push(positives);
    }
    Ok(ProxyState {
        proxies: TensorF32::new(vec![n, d], proxies)?,
        positive_sets,
    })
}

fn positive_set(q: &[f32], keys: &[f32], d: usize, rho: f32) -> Vec<usize> {
    let mut set = Vec::new();
    let mut best = (0usize, f32::NEG_INFINITY);
    for (j, k) in keys.chunks_exact(d).enumerate() {
        let s = dot(q, k);
        if s > rho {
            set.push(j);
        }
        if s > best.1 {
            best = (j, s);
        }
    }
    if set.is_empty() {
        set.push(best.0);
    }
    set
}

/// `gamma · (S − beta · mean(S))` with the mean over every entry.
pub fn fixed_normalize(s: &TensorF32, beta: f32, gamma: f32) -> Result<TensorF32> {
    s.dims2()?;
    let count = s.numel().max(1) as f64;
    let mean = s.data().iter().map(|&v| f64::from(v)).sum::<f64>() / count;
    let shift = f64::from(beta) * mean;
    let gamma = f64::from(gamma);
    let data = s
        .data()
        .iter()
        .map(|&v| (gamma * (f64::from(v) - shift)) as f32)
        .collect();
    TensorF32::new(s.shape().to_vec(), data)
}

/// Dynamic shift `1 + lambda1 · ln(1 + L)`.
pub fn dynamic_u(windows: usize, lambda1: f32) -> f64 {
    1.0 + f64::from(lambda1) * (1.0 + windows as f64).ln()
}

/// Dynamic scale `1 + lambda2 / |P|`.
pub fn dynamic_w(positive_count: usize, lambda2: f32) -> f64 {
    debug_assert!(positive_count >= 1);
    1.0 + f64::from(lambda2) / positive_count as f64
}

/// Row `i` becomes `w_i · (S[i] − u · mean(S[i]))`.
pub fn dynamic_normalize(
    s_proxy: &TensorF32,
    state: &ProxyState,
    windows: usize,
    cfg: &NormConfig,
) -> Result<TensorF32> {
    if cfg.mode != NormMode::Dynamic {
        return Err(Error::InvalidConfig(
            "dynamic normalization in fixed mode".into(),
        ));
    }
    let (n, m) = s_proxy.dims2()?;
    if state.positive_sets.len() != n {
        return Err(Error::Shape(format!(
            "{n} similarity rows but {} positive sets",
            state.positive_sets.len()
        )));
    }
    if let Some(i) = state.positive_sets.iter().position(Vec::is_empty) {
        return Err(Error::Shape(format!("query {i} has an empty positive set")));
    }
    let u = dynamic_u(windows, cfg.lambda1);
    let mut out = Vec::with_capacity(n * m);
    for (i, positives) in state.positive_sets.iter().enumerate() {
        let row = s_proxy.row(i);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / m.max(1) as f64;
        let w = dynamic_w(positives.len(), cfg.lambda2);
        let shift = u * mean;
        out.extend(row.iter().map(|&v| (w * (f64::from(v) - shift)) as f32));
    }
    TensorF32::new(vec![n, m], out)
}

/// Softmax over the non-negative entries of each row; negative entries get
/// exactly zero weight. A row with no non-negative entry puts all weight on
/// its maximum (first one on ties).
pub fn mask_and_softmax(a: &TensorF32) -> Result<TensorF32> {
    let (n, m) = a.dims2()?;
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let row = a.row(i);
        let dst = &mut out[i * m..(i + 1) * m];
        let max = row
            .iter()
            .copied()
            .filter(|&v| v >= 0.0)
            .fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            if let Some(j) = argmax(row) {
                dst[j] = 1.0;
            }
            continue;
        }
        let max = f64::from(max);
        let mut total = 0.0f64;
        let mut weights = vec![0.0f64; m];
        for (wgt, &v) in weights.iter_mut().zip(row) {
            if v >= 0.0 {
                *wgt = (f64::from(v) - max).exp();
                total += *wgt;
            }
        }
        for (o, wgt) in dst.iter_mut().zip(weights) {
            *o = (wgt / total) as f32;
        }
    }
    TensorF32::new(vec![n, m], out)
}

pub(crate) fn argmax(row: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (j, &v) in row.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// `(attn · V) · W + b`
pub fn attend_and_project(
    attn: &TensorF32,
    v_global: &TensorF32,
    head: &ProjectionHead,
) -> Result<TensorF32> {
    let attended = matmul(attn, v_global)?;
    let mut out = matmul(&attended, &head.weight)?;
    let de = head.output_dim();
    if de > 0 {
        for row in out.data_mut().chunks_exact_mut(de) {
            for (o, &b) in row.iter_mut().zip(head.bias.data()) {
                *o += b;
            }
        }
    }
    Ok(out)
}

/// Knobs for [`window_attention`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub proxy: ProxyConfig,
    pub norm: NormConfig,
    pub smoothing: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        self.proxy.validate()?;
        self.norm.validate()
    }
}

/// Visual tokens `[N, D_e]` for one window.
pub fn window_attention(
    bank: &TokenBank,
    grid: &WindowGrid,
    head: &ProjectionHead,
    window_idx: usize,
    cfg: &AttentionConfig,
) -> Result<TensorF32> {
    cfg.validate()?;
    check_geometry(bank, grid)?;
    let (k_global, v_global) = extend_key_value(bank);
    window_attention_with_globals(bank, grid, head, window_idx, cfg, &k_global, &v_global)
}

pub(crate) fn window_attention_with_globals(
    bank: &TokenBank,
    grid: &WindowGrid,
    head: &ProjectionHead,
    window_idx: usize,
    cfg: &AttentionConfig,
    k_global: &TensorF32,
    v_global: &TensorF32,
) -> Result<TensorF32> {
    let queries = if cfg.smoothing {
        smooth_window_queries(bank, grid, window_idx)?
    } else {
        bank.window_vfm(window_idx)?
    };
    let state = build_proxies(&queries, k_global, &cfg.proxy)?;
    let s_proxy = self_similarity(&state.proxies, k_global)?;
    let scores = match cfg.norm.mode {
        NormMode::Fixed => fixed_normalize(&s_proxy, cfg.norm.beta, cfg.norm.gamma)?,
        NormMode::Dynamic => dynamic_normalize(&s_proxy, &state, bank.windows(), &cfg.norm)?,
    };
    let attn = mask_and_softmax(&scores)?;
    attend_and_project(&attn, v_global, head)
}
