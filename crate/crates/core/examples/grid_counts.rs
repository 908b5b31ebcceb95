//! Window layouts for a few crop/stride settings, plus the boundary pairs
//! that the boundary error rate inspects.
//!
//!     cargo run --example grid_counts

use glaclip::grid::{boundary_pairs, build_window_grid, GridSpec};

fn main() -> glaclip::Result<()> {
    for stride in [112, 224, 98] {
        let grid = build_window_grid(GridSpec::new(336, 497, 224, stride, 16))?;
        println!(
            "336x497 crop 224 stride {stride:>3}: L={:>2} ({} x {}), {} tokens per window",
            grid.len(),
            grid.h_grids(),
            grid.w_grids(),
            grid.tokens_per_window()
        );
        let origins: Vec<String> = grid
            .origins()
            .iter()
            .map(|(y, x)| format!("({y},{x})"))
            .collect();
        println!("  origins {}", origins.join(" "));
    }

    // The last window on each axis is clamped back inside the image.
    let small = build_window_grid(GridSpec::new(4, 4, 2, 2, 1))?;
    println!("4x4 crop 2 stride 2 boundary pairs:");
    for ((py, px), (qy, qx)) in boundary_pairs(&small) {
        println!("  ({py},{px})-({qy},{qx})");
    }
    Ok(())
}
