//! Feature bundles on disk and the end-to-end segmentation pass.
//!
//! Bundle directory layout:
//!
//! ```text
//! manifest.json        geometry, file names, class table
//! text.glat            [C_sub, D_e] unit-norm text embeddings
//! proj_w.glat          [D_c, D_e]
//! proj_b.glat          [D_e]
//! win_{k}_vfm.glat     [N, D_v] per window
//! win_{k}_val.glat     [N, D_c] per window
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    argmax, extend_key_value, window_attention_with_globals, AttentionConfig, NormConfig,
    ProjectionHead, ProxyConfig, TokenBank,
};
use crate::error::{Error, Result};
use crate::grid::{
    build_window_grid, upsample_window_logits, GridSpec, LogitAccumulator, WindowGrid,
};
use crate::tensor::{
    l2_normalize_rows, matmul_transposed, read_tensor, write_tensor, TensorF32, MAGIC,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_IGNORE_LABEL: u16 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    VfmFeatures,
    ClipInternal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub index: usize,
    pub origin: [usize; 2],
    pub vfm: String,
    pub values: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    #[serde(default)]
    pub background: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubclassEntry {
    pub name: String,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub settings: String,
    pub mode: FeatureMode,
    pub grid: GridSpec,
    pub windows: Vec<WindowEntry>,
    pub text: String,
    pub proj_weight: String,
    pub proj_bias: String,
    pub classes: Vec<ClassEntry>,
    pub subclasses: Vec<SubclassEntry>,
}

/// Maps text prompts (sub-classes) onto output classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    class_of_sub: Vec<usize>,
    classes: usize,
    background: Option<usize>,
}

impl ClassMap {
    pub fn new(
        class_of_sub: Vec<usize>,
        classes: usize,
        background: Option<usize>,
    ) -> Result<Self> {
        if let Some(&bad) = class_of_sub.iter().find(|&&c| c >= classes) {
            return Err(Error::Bundle(format!(
                "sub-class maps to class {bad}, only {classes} classes"
            )));
        }
        if let Some(c) = (0..classes).find(|c| !class_of_sub.contains(c)) {
            return Err(Error::Bundle(format!("class {c} has no sub-class")));
        }
        if background.is_some_and(|b| b >= classes) {
            return Err(Error::Bundle("background class out of range".into()));
        }
        Ok(Self {
            class_of_sub,
            classes,
            background,
        })
    }

    /// One prompt per class, no background.
    pub fn identity(classes: usize) -> Self {
        Self {
            class_of_sub: (0..classes).collect(),
            classes,
            background: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn subclasses(&self) -> usize {
        self.class_of_sub.len()
    }

    pub fn background(&self) -> Option<usize> {
        self.background
    }
}

#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub manifest: Manifest,
    pub grid: WindowGrid,
    pub bank: TokenBank,
    pub head: ProjectionHead,
    /// `[C_sub, D_e]`
    pub text: TensorF32,
    pub class_map: ClassMap,
}

impl FeatureBundle {
    /// Assembles a bundle with the standard file names and checks it.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        settings: impl Into<String>,
        mode: FeatureMode,
        grid_spec: GridSpec,
        bank: TokenBank,
        head: ProjectionHead,
        text: TensorF32,
        classes: Vec<ClassEntry>,
        subclasses: Vec<SubclassEntry>,
    ) -> Result<Self> {
        let grid = build_window_grid(grid_spec)?;
        let windows = grid
            .origins()
            .iter()
            .enumerate()
            .map(|(k, &(y, x))| WindowEntry {
                index: k,
                origin: [y, x],
                vfm: format!("win_{k}_vfm.glat"),
                values: format!("win_{k}_val.glat"),
            })
            .collect();
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            settings: settings.into(),
            mode,
            grid: grid_spec,
            windows,
            text: "text.glat".into(),
            proj_weight: "proj_w.glat".into(),
            proj_bias: "proj_b.glat".into(),
            classes,
            subclasses,
        };
        let class_map = class_map_from(&manifest)?;
        let bundle = Self {
            manifest,
            grid,
            bank,
            head,
            text,
            class_map,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::BundleNotFound(dir.to_path_buf()));
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&raw)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Bundle(format!(
                "manifest version {} unsupported",
                manifest.format_version
            )));
        }
        let grid = build_window_grid(manifest.grid)?;
        let entries = ordered_windows(&manifest, &grid)?;

        let mut vfm = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for e in &entries {
            let load =
                |name: &str| read_tensor(dir.join(name)).map_err(|err| err.in_window(e.index));
            vfm.push(load(&e.vfm)?);
            values.push(load(&e.values)?);
        }
        for (k, (f, v)) in vfm.iter().zip(&values).enumerate() {
            check_window_tensors(f, v, &grid).map_err(|err| err.in_window(k))?;
        }
        let bank = TokenBank::from_windows(&vfm, &values)?;
        let head = ProjectionHead::new(
            read_tensor(dir.join(&manifest.proj_weight))?,
            read_tensor(dir.join(&manifest.proj_bias))?,
        )?;
        let text = read_tensor(dir.join(&manifest.text))?;
        let class_map = class_map_from(&manifest)?;
        let bundle = Self {
            manifest,
            grid,
            bank,
            head,
            text,
            class_map,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Writes the manifest and every tensor under `dir`, creating it.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        for e in &self.manifest.windows {
            write_tensor(&self.bank.window_vfm(e.index)?, dir.join(&e.vfm))?;
            write_tensor(&self.bank.window_values(e.index)?, dir.join(&e.values))?;
        }
        write_tensor(self.head.weight(), dir.join(&self.manifest.proj_weight))?;
        write_tensor(self.head.bias(), dir.join(&self.manifest.proj_bias))?;
        write_tensor(&self.text, dir.join(&self.manifest.text))
    }

    pub fn validate(&self) -> Result<()> {
        let grid = &self.grid;
        if self.manifest.windows.len() != grid.len() {
            return Err(Error::Bundle(format!(
                "manifest lists {} windows, grid has {}",
                self.manifest.windows.len(),
                grid.len()
            )));
        }
        if self.bank.windows() != grid.len()
            || self.bank.tokens_per_window() != grid.tokens_per_window()
        {
            return Err(Error::Bundle(format!(
                "features hold {} windows x {} tokens, grid expects {} x {}",
                self.bank.windows(),
                self.bank.tokens_per_window(),
                grid.len(),
                grid.tokens_per_window()
            )));
        }
        if self.head.input_dim() != self.bank.value_dim() {
            return Err(Error::Bundle(format!(
                "projection expects value dim {}, values have {}",
                self.head.input_dim(),
                self.bank.value_dim()
            )));
        }
        let (c_sub, de) = self.text.dims2()?;
        if de != self.head.output_dim() {
            return Err(Error::Bundle(format!(
                "text embeddings have dim {de}, projection outputs {}",
                self.head.output_dim()
            )));
        }
        if c_sub != self.class_map.subclasses() {
            return Err(Error::Bundle(format!(
                "{c_sub} text embeddings for {} sub-classes",
                self.class_map.subclasses()
            )));
        }
        for i in 0..c_sub {
            let norm = self.text.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Bundle(format!(
                    "text embedding {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.class_map.classes()
    }
}

fn ordered_windows(manifest: &Manifest, grid: &WindowGrid) -> Result<Vec<WindowEntry>> {
    if manifest.windows.len() != grid.len() {
        return Err(Error::Bundle(format!(
            "manifest lists {} windows, grid has {}",
            manifest.windows.len(),
            grid.len()
        )));
    }
    let mut slots: Vec<Option<WindowEntry>> = vec![None; grid.len()];
    for e in &manifest.windows {
        let slot = slots.get_mut(e.index).ok_or(Error::IndexOutOfRange {
            what: "manifest window",
            index: e.index,
            len: grid.len(),
        })?;
        if slot.is_some() {
            return Err(Error::Bundle(format!("window {} listed twice", e.index)));
        }
        let expected = grid.origin(e.index)?;
        if (e.origin[0], e.origin[1]) != expected {
            return Err(Error::Bundle(format!(
                "window {} origin {:?} does not match grid origin {:?}",
                e.index, e.origin, expected
            )));
        }
        *slot = Some(e.clone());
    }
    Ok(slots.into_iter().flatten().collect())
}

fn check_window_tensors(vfm: &TensorF32, values: &TensorF32, grid: &WindowGrid) -> Result<()> {
    let (n, _) = vfm.dims2()?;
    let (nv, _) = values.dims2()?;
    let want = grid.tokens_per_window();
    if n != want || nv != want {
        return Err(Error::Bundle(format!(
            "window tensors hold {n} / {nv} tokens, grid expects {want}"
        )));
    }
    Ok(())
}

fn class_map_from(manifest: &Manifest) -> Result<ClassMap> {
    let backgrounds: Vec<usize> = manifest
        .classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.background)
        .map(|(i, _)| i)
        .collect();
    if backgrounds.len() > 1 {
        return Err(Error::Bundle(format!(
            "{} classes flagged as background, at most one allowed",
            backgrounds.len()
        )));
    }
    ClassMap::new(
        manifest.subclasses.iter().map(|s| s.class_index).collect(),
        manifest.classes.len(),
        backgrounds.first().copied(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub proxy: ProxyConfig,
    pub norm: NormConfig,
    pub smoothing: bool,
    /// Minimum foreground probability; below it a pixel goes to the
    /// background class. Ignored when the bundle has no background class.
    pub background_threshold: Option<f32>,
    pub logit_scale: f32,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            proxy: ProxyConfig::default(),
            norm: NormConfig::default(),
            smoothing: false,
            background_threshold: None,
            logit_scale: 100.0,
        }
    }
}

impl SegmenterConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            proxy: self.proxy,
            norm: self.norm,
            smoothing: self.smoothing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if let Some(t) = self.background_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!(
                    "background threshold {t} outside [0, 1]"
                )));
            }
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "logit scale {} must be > 0",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

/// Per-pixel class indices at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
    ignore_label: u16,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        Self::with_ignore(height, width, labels, DEFAULT_IGNORE_LABEL)
    }

    pub fn with_ignore(
        height: usize,
        width: usize,
        labels: Vec<u16>,
        ignore_label: u16,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Label(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            ignore_label,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn ignore_label(&self) -> u16 {
        self.ignore_label
    }

    pub fn set_ignore_label(&mut self, ignore: u16) {
        self.ignore_label = ignore;
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for &l in &self.labels {
            let b = u8::try_from(l)
                .map_err(|_| Error::Label(format!("label {l} does not fit an 8-bit PGM")))?;
            out.push(b);
        }
        Ok(out)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Label("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Label(format!(
                "expected P5 PGM, found {:?}",
                fields[0]
            )));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Label(format!("bad PGM header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Label(format!("unsupported PGM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != width * height {
            return Err(Error::Label(format!(
                "PGM raster has {} bytes, expected {}",
                raster.len(),
                width * height
            )));
        }
        Self::new(
            height,
            width,
            raster.iter().map(|&b| u16::from(b)).collect(),
        )
    }

    /// Labels as an `[H, W]` f32 tensor.
    pub fn to_tensor(&self) -> TensorF32 {
        TensorF32::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| f32::from(l)).collect(),
        )
        .unwrap()
    }

    pub fn from_tensor(t: &TensorF32) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let mut labels = Vec::with_capacity(h * w);
        for &v in t.data() {
            if !(v >= 0.0 && v <= f32::from(u16::MAX) && v.fract() == 0.0) {
                return Err(Error::Label(format!("{v} is not a u16 label")));
            }
            labels.push(v as u16);
        }
        Self::new(h, w, labels)
    }

    /// Reads a `.glat` tensor or binary PGM, whichever the file holds.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(&MAGIC) {
            Self::from_tensor(&TensorF32::from_bytes(&bytes)?)
        } else {
            Self::from_pgm(&bytes)
        }
    }

    /// Writes PGM unless the path ends in `.glat` or some label exceeds 255;
    /// [`LabelMap::read`] tells the two apart by content.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_glat(path) || self.labels.iter().any(|&l| l > 255) {
            write_tensor(&self.to_tensor(), path)
        } else {
            fs::write(path, self.to_pgm()?).map_err(|e| Error::io(path, e))
        }
    }
}

fn is_glat(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "glat")
}

/// `scale · cos(F_visual_i, F_text_c)`, `[N, C_sub]`.
pub fn classify_tokens(f_visual: &TensorF32, f_text: &TensorF32, scale: f32) -> Result<TensorF32> {
    let visual = l2_normalize_rows(f_visual)?;
    let mut logits = matmul_transposed(&visual, f_text)?;
    for v in logits.data_mut() {
        *v *= scale;
    }
    Ok(logits)
}

/// Max over each class's sub-class logits, `[N, C_sub] -> [N, C]`.
pub fn collapse_subclasses(sub_logits: &TensorF32, map: &ClassMap) -> Result<TensorF32> {
    let (n, c_sub) = sub_logits.dims2()?;
    if c_sub != map.subclasses() {
        return Err(Error::Shape(format!(
            "{c_sub} sub-class logits for {} sub-classes",
            map.subclasses()
        )));
    }
    let c = map.classes();
    let mut out = vec![f32::NEG_INFINITY; n * c];
    for i in 0..n {
        for (s, &v) in sub_logits.row(i).iter().enumerate() {
            let o = &mut out[i * c + map.class_of_sub[s]];
            *o = o.max(v);
        }
    }
    TensorF32::new(vec![n, c], out)
}

/// Picks a class from one pixel's class probabilities.
///
/// With a threshold and a background class: the best non-background class
/// wins unless its probability is below the threshold, in which case the
/// background class does. Otherwise plain argmax. Ties go to the lowest index.
pub fn apply_background(probs: &[f32], threshold: Option<f32>, background: Option<usize>) -> usize {
    match (threshold, background) {
        (Some(t), Some(bg)) => {
            let mut best: Option<(usize, f32)> = None;
            for (c, &p) in probs.iter().enumerate() {
                if c != bg && best.is_none_or(|(_, b)| p > b) {
                    best = Some((c, p));
                }
            }
            match best {
                Some((c, p)) if p >= t => c,
                _ => bg,
            }
        }
        _ => argmax(probs).unwrap_or(0),
    }
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub labels: LabelMap,
    /// Fused class logits `[C, H, W]`.
    pub logits: TensorF32,
}

/// Class logits `[C, crop, crop]` for one window.
pub fn window_class_logits(
    bundle: &FeatureBundle,
    cfg: &SegmenterConfig,
    window_idx: usize,
    k_global: &TensorF32,
    v_global: &TensorF32,
) -> Result<TensorF32> {
    let visual = window_attention_with_globals(
        &bundle.bank,
        &bundle.grid,
        &bundle.head,
        window_idx,
        &cfg.attention(),
        k_global,
        v_global,
    )?;
    let sub = classify_tokens(&visual, &bundle.text, cfg.logit_scale)?;
    let class_logits = collapse_subclasses(&sub, &bundle.class_map)?;
    upsample_window_logits(&class_logits, &bundle.grid)
}

/// Runs every window, fuses the logits, and labels each pixel.
pub fn segment(bundle: &FeatureBundle, cfg: &SegmenterConfig) -> Result<Segmentation> {
    cfg.validate()?;
    bundle.validate()?;
    let (k_global, v_global) = extend_key_value(&bundle.bank);
    let windows: Vec<TensorF32> = (0..bundle.grid.len())
        .into_par_iter()
        .map(|w| {
            window_class_logits(bundle, cfg, w, &k_global, &v_global).map_err(|e| e.in_window(w))
        })
        .collect::<Result<_>>()?;

    let mut acc = LogitAccumulator::for_grid(bundle.classes(), &bundle.grid)?;
    for (w, logits) in windows.iter().enumerate() {
        acc.fuse(logits, bundle.grid.origin(w)?)
            .map_err(|e| e.in_window(w))?;
    }
    let logits = acc.finalize()?;
    let labels = label_pixels(&logits, cfg, bundle.class_map.background())?;
    Ok(Segmentation { labels, logits })
}

/// Per-pixel softmax over `[C, H, W]` logits followed by the background rule.
pub fn label_pixels(
    logits: &TensorF32,
    cfg: &SegmenterConfig,
    background: Option<usize>,
) -> Result<LabelMap> {
    let &[c, h, w] = logits.shape() else {
        return Err(Error::Shape(format!(
            "expected [C, H, W] logits, got {:?}",
            logits.shape()
        )));
    };
    let plane = h * w;
    let data = logits.data();
    let mut labels = Vec::with_capacity(plane);
    let mut probs = vec![0.0f32; c];
    for p in 0..plane {
        pixel_probabilities((0..c).map(|k| data[k * plane + p]), &mut probs);
        let label = apply_background(&probs, cfg.background_threshold, background);
        labels.push(label as u16);
    }
    let ignore = if c < usize::from(DEFAULT_IGNORE_LABEL) {
        DEFAULT_IGNORE_LABEL
    } else {
        u16::MAX
    };
    LabelMap::with_ignore(h, w, labels, ignore)
}

/// Softmax of one pixel's class logits into `out`.
pub fn pixel_probabilities(logits: impl Iterator<Item = f32> + Clone, out: &mut [f32]) {
    let max = logits.clone().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f64;
    for (o, v) in out.iter_mut().zip(logits) {
        let e = (f64::from(v) - f64::from(max)).exp();
        *o = e as f32;
        total += e;
    }
    for o in out.iter_mut() {
        *o = (f64::from(*o) / total) as f32;
    }
}

/// Rough upper bound on the working set of one `segment` call, in bytes.
pub fn estimated_peak_bytes(bundle: &FeatureBundle) -> usize {
    let l = bundle.grid.len();
    let n = bundle.grid.tokens_per_window();
    let spec = bundle.grid.spec();
    let tokens = l * n;
    let f = std::mem::size_of::<f32>();
    let features = tokens * (bundle.bank.vfm_dim() + bundle.bank.value_dim()) * 2;
    let attention = l * n * tokens * 3;
    let crop_maps = l * bundle.classes() * spec.crop * spec.crop;
    let image = (bundle.classes() + 1) * spec.image_h * spec.image_w;
    f * (features + attention + crop_maps + image)
}
