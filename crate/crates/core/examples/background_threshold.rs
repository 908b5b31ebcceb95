//! A background class takes over pixels whose best foreground probability is
//! too low. Sweeps the threshold over one noisy segmentation.
//!
//!     cargo run --release --example background_threshold

use glaclip::grid::GridSpec;
use glaclip::segmenter::{label_pixels, segment, ClassEntry, FeatureBundle, SegmenterConfig};
use glaclip::synthetic::{generate, SyntheticSpec};

fn main() -> glaclip::Result<()> {
    let (b, _) = generate(&SyntheticSpec::new(
        GridSpec::new(192, 192, 96, 48, 16),
        4,
        1.0,
        2,
    ))?;
    let classes = ["background", "sky", "road", "tree"]
        .iter()
        .enumerate()
        .map(|(i, n)| ClassEntry {
            name: n.to_string(),
            background: i == 0,
        })
        .collect();
    let bundle = FeatureBundle::from_parts(
        "demo",
        b.manifest.mode,
        b.manifest.grid,
        b.bank,
        b.head,
        b.text,
        classes,
        b.manifest.subclasses,
    )?;

    let cfg = SegmenterConfig {
        logit_scale: 10.0,
        ..SegmenterConfig::default()
    };
    let logits = segment(&bundle, &cfg)?.logits;
    for t in [0.0, 0.3, 0.4, 0.5, 0.7] {
        let cfg = SegmenterConfig {
            background_threshold: Some(t),
            ..cfg
        };
        let labels = label_pixels(&logits, &cfg, bundle.class_map.background())?;
        let bg = labels.labels().iter().filter(|&&l| l == 0).count();
        println!(
            "threshold {t:.1}: {:5.1}% background",
            100.0 * bg as f64 / labels.labels().len() as f64
        );
    }
    Ok(())
}
