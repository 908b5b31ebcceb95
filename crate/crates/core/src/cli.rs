//! Command-line front end: `grid`, `segment`, `eval`, `gen-synthetic`.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{NormConfig, NormMode, ProxyConfig};
use crate::error::Error;
use crate::grid::{build_window_grid, GridSpec};
use crate::metrics::{ber, miou, EvalReport};
use crate::segmenter::{estimated_peak_bytes, segment, FeatureBundle, LabelMap, SegmenterConfig};
use crate::synthetic::{default_layout, write_synthetic, PlantedRect, SyntheticSpec, GT_FILE};
use crate::tensor::write_tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_COMPUTE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "glaclip",
    version,
    about = "Global-local aligned sliding-window segmentation over precomputed features"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the sliding-window tiling of an image.
    Grid(GridArgs),
    /// Segment a feature bundle into a label map.
    Segment(SegmentArgs),
    /// Score a predicted label map against ground truth.
    Eval(EvalArgs),
    /// Write a planted-layout feature bundle and its ground truth.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub crop: usize,
    #[arg(long)]
    pub stride: usize,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Fixed,
    Dynamic,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Feature bundle directory (contains manifest.json).
    #[arg(long)]
    pub bundle: PathBuf,
    /// Label map output (.pgm, or .glat for more than 255 classes).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the fused [C, H, W] logits here.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Score normalization.
    #[arg(long, value_enum, default_value_t = NormArg::Dynamic)]
    pub norm: NormArg,
    /// Cosine threshold for a key to join a proxy's positive set.
    #[arg(long, default_value_t = 0.6)]
    pub rho: f32,
    /// Proxy refinement rounds (0 = raw queries).
    #[arg(long, default_value_t = 2)]
    pub steps: usize,
    /// Use raw (unnormalized) proxy means.
    #[arg(long)]
    pub no_renormalize: bool,
    /// Dynamic mode: shift grows as 1 + lambda1 * ln(1 + windows).
    #[arg(long, default_value_t = 0.3)]
    pub lambda1: f32,
    /// Dynamic mode: scale is 1 + lambda2 / positive-set size.
    #[arg(long, default_value_t = 30.0)]
    pub lambda2: f32,
    /// Fixed mode: shift on the global mean.
    #[arg(long, default_value_t = 1.2)]
    pub beta: f32,
    /// Fixed mode: scale.
    #[arg(long, default_value_t = 3.0)]
    pub gamma: f32,
    /// Label a pixel background when no other class reaches this probability.
    #[arg(long)]
    pub bg_threshold: Option<f32>,
    /// Multiplier on token-text cosine before the softmax.
    #[arg(long, default_value_t = 100.0)]
    pub logit_scale: f32,
    /// Smooth queries over spatial and cross-window neighbours.
    #[arg(long)]
    pub smoothing: bool,
}

impl SegmentArgs {
    pub fn config(&self) -> SegmenterConfig {
        SegmenterConfig {
            proxy: ProxyConfig {
                rho: self.rho,
                steps: self.steps,
                renormalize: !self.no_renormalize,
            },
            norm: NormConfig {
                mode: match self.norm {
                    NormArg::Fixed => NormMode::Fixed,
                    NormArg::Dynamic => NormMode::Dynamic,
                },
                beta: self.beta,
                gamma: self.gamma,
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            smoothing: self.smoothing,
            background_threshold: self.bg_threshold,
            logit_scale: self.logit_scale,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub classes: usize,
    /// Window geometry for the boundary error rate: H W CROP STRIDE.
    #[arg(long, num_args = 4, value_names = ["H", "W", "CROP", "STRIDE"])]
    pub grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 255)]
    pub ignore_label: u16,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 448)]
    pub height: usize,
    #[arg(long, default_value_t = 448)]
    pub width: usize,
    #[arg(long, default_value_t = 224)]
    pub crop: usize,
    #[arg(long, default_value_t = 112)]
    pub stride: usize,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Maximum angular noise per token, radians.
    #[arg(long, default_value_t = 0.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feature width (defaults to the class count).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Planted rectangles as `y0,x0,y1,x1,class;...` (default: block grid).
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn stage(stage: &str, err: Error) -> Self {
        Self {
            code: if err.is_input_error() {
                EXIT_USAGE
            } else {
                EXIT_COMPUTE
            },
            message: format!("{stage}: {err}"),
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::usage(format!("write: {e}"))
}

pub fn run(cli: Cli, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli.command, out))
        }
        None => dispatch(cli.command, out),
    }
}

fn dispatch(command: Command, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    match command {
        Command::Grid(a) => cmd_grid(&a, out),
        Command::Segment(a) => cmd_segment(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a, out),
    }
}

pub fn cmd_grid(a: &GridArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let spec = GridSpec::new(a.height, a.width, a.crop, a.stride, a.patch);
    let grid = build_window_grid(spec).map_err(|e| CliError::usage(format!("grid: {e}")))?;
    writeln!(out, "L={}", grid.len()).map_err(io_err)?;
    writeln!(
        out,
        "h_grids={} w_grids={} n_side={}",
        grid.h_grids(),
        grid.w_grids(),
        grid.n_side()
    )
    .map_err(io_err)?;
    for (y, x) in grid.origins() {
        writeln!(out, "{y} {x}").map_err(io_err)?;
    }
    Ok(())
}

pub fn cmd_segment(a: &SegmentArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let cfg = a.config();
    cfg.validate()
        .map_err(|e| CliError::usage(format!("config: {e}")))?;
    let t0 = Instant::now();
    let bundle = FeatureBundle::load(&a.bundle).map_err(|e| CliError::stage("load", e))?;
    let t1 = Instant::now();
    let seg = segment(&bundle, &cfg).map_err(|e| CliError::stage("segment", e))?;
    let t2 = Instant::now();
    seg.labels
        .write(&a.out)
        .map_err(|e| CliError::stage("write", e))?;
    if let Some(p) = &a.logits {
        write_tensor(&seg.logits, p).map_err(|e| CliError::stage("write", e))?;
    }
    let grid = &bundle.grid;
    writeln!(
        out,
        "bundle {} : L={} windows, N={} tokens, C={} classes",
        a.bundle.display(),
        grid.len(),
        grid.tokens_per_window(),
        bundle.classes()
    )
    .map_err(io_err)?;
    writeln!(
        out,
        "norm={:?} rho={} steps={} lambda1={} lambda2={} beta={} gamma={} smoothing={}",
        cfg.norm.mode,
        cfg.proxy.rho,
        cfg.proxy.steps,
        cfg.norm.lambda1,
        cfg.norm.lambda2,
        cfg.norm.beta,
        cfg.norm.gamma,
        cfg.smoothing
    )
    .map_err(io_err)?;
    writeln!(
        out,
        "time load={:.1}ms segment={:.1}ms",
        (t1 - t0).as_secs_f64() * 1e3,
        (t2 - t1).as_secs_f64() * 1e3
    )
    .map_err(io_err)?;
    writeln!(
        out,
        "peak_memory_estimate={:.2}MiB",
        estimated_peak_bytes(&bundle) as f64 / (1024.0 * 1024.0)
    )
    .map_err(io_err)?;
    writeln!(
        out,
        "wrote {} ({}x{})",
        a.out.display(),
        seg.labels.height(),
        seg.labels.width()
    )
    .map_err(io_err)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let read = |p: &PathBuf| {
        let mut m = LabelMap::read(p).map_err(|e| CliError::stage("read", e))?;
        m.set_ignore_label(a.ignore_label);
        Ok::<_, CliError>(m)
    };
    let pred = read(&a.pred)?;
    let gt = read(&a.gt)?;
    let miou = miou(&pred, &gt, a.classes).map_err(|e| CliError::stage("miou", e))?;
    let ber = match &a.grid {
        Some(g) => {
            let spec = GridSpec::new(g[0], g[1], g[2], g[3], 1);
            let grid =
                build_window_grid(spec).map_err(|e| CliError::usage(format!("grid: {e}")))?;
            Some(ber(&pred, &gt, &grid).map_err(|e| CliError::stage("ber", e))?)
        }
        None => None,
    };
    let report = EvalReport { miou, ber };
    if a.json {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::stage("report", e.into()))?;
        writeln!(out, "{json}").map_err(io_err)
    } else {
        write!(out, "{report}").map_err(io_err)
    }
}

pub fn parse_layout(s: &str) -> Result<Vec<PlantedRect>, CliError> {
    s.split(';')
        .filter(|part| !part.trim().is_empty())
        .map(|part| {
            let v: Vec<usize> = part
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::usage(format!("bad layout rectangle {part:?}")))?;
            match v.as_slice() {
                &[y0, x0, y1, x1, class] => Ok(PlantedRect {
                    y0,
                    x0,
                    y1,
                    x1,
                    class,
                }),
                _ => Err(CliError::usage(format!(
                    "layout rectangle {part:?} needs 5 fields y0,x0,y1,x1,class"
                ))),
            }
        })
        .collect()
}

pub fn cmd_gen_synthetic(a: &GenArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let grid = GridSpec::new(a.height, a.width, a.crop, a.stride, a.patch);
    let layout = match &a.layout {
        Some(s) => parse_layout(s)?,
        None => default_layout(a.height, a.width, a.classes, a.patch),
    };
    let spec = SyntheticSpec {
        grid,
        classes: a.classes,
        spread: a.spread,
        seed: a.seed,
        dim: a.dim.unwrap_or(a.classes),
        layout,
    };
    spec.validate()
        .map_err(|e| CliError::usage(format!("spec: {e}")))?;
    let (bundle, _) = write_synthetic(&spec, &a.out).map_err(|e| CliError::stage("generate", e))?;
    writeln!(
        out,
        "wrote {} : L={} windows, C={} classes, ground truth {}",
        a.out.display(),
        bundle.grid.len(),
        bundle.classes(),
        a.out.join(GT_FILE).display()
    )
    .map_err(io_err)
}
