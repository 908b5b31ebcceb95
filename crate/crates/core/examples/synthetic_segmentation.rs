//! End to end on a planted layout: generate a bundle, segment it, score it.
//!
//!     cargo run --release --example synthetic_segmentation -- [spread]

use glaclip::grid::GridSpec;
use glaclip::metrics::{ber, miou, EvalReport};
use glaclip::segmenter::{segment, SegmenterConfig};
use glaclip::synthetic::{generate, SyntheticSpec};

fn main() -> glaclip::Result<()> {
    let spread: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0);
    let spec = SyntheticSpec::new(GridSpec::new(448, 448, 224, 112, 16), 4, spread, 0);
    let (bundle, gt) = generate(&spec)?;
    println!(
        "{} windows x {} tokens, spread {spread}",
        bundle.grid.len(),
        bundle.grid.tokens_per_window()
    );

    for (name, cfg) in [
        ("dynamic", SegmenterConfig::default()),
        (
            "dynamic + smoothing",
            SegmenterConfig {
                smoothing: true,
                ..SegmenterConfig::default()
            },
        ),
    ] {
        let t = std::time::Instant::now();
        let seg = segment(&bundle, &cfg)?;
        let report = EvalReport {
            miou: miou(&seg.labels, &gt, 4)?,
            ber: Some(ber(&seg.labels, &gt, &bundle.grid)?),
        };
        println!("-- {name} ({:.0} ms)", t.elapsed().as_secs_f64() * 1e3);
        print!("{report}");
    }
    Ok(())
}
