//! Saving a bundle to disk, inspecting its manifest, and loading it back.
//! This is the layout an external feature exporter has to produce.
//!
//!     cargo run --example feature_bundle -- /tmp/bundle

use glaclip::grid::GridSpec;
use glaclip::segmenter::FeatureBundle;
use glaclip::synthetic::{write_synthetic, SyntheticSpec};

fn main() -> glaclip::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("glaclip-bundle"));
    let spec = SyntheticSpec::new(GridSpec::new(64, 96, 64, 32, 16), 3, 0.2, 5);
    write_synthetic(&spec, &dir)?;

    let manifest =
        std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| glaclip::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    println!(
        "{}",
        manifest.lines().take(24).collect::<Vec<_>>().join("\n")
    );
    println!("...");

    let bundle = FeatureBundle::load(&dir)?;
    println!(
        "loaded {}: {} windows, vfm dim {}, value dim {}, {} classes",
        dir.display(),
        bundle.grid.len(),
        bundle.bank.vfm_dim(),
        bundle.bank.value_dim(),
        bundle.classes()
    );
    Ok(())
}
