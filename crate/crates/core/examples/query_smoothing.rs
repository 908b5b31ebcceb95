//! Query smoothing averages each token with its in-window neighbours and the
//! tokens of overlapping windows that cover the same spot, which cancels
//! per-token noise inside uniform regions.
//!
//!     cargo run --example query_smoothing

use glaclip::attention::smooth_queries;
use glaclip::grid::GridSpec;
use glaclip::synthetic::{generate, SyntheticSpec};

fn main() -> glaclip::Result<()> {
    let mut spec = SyntheticSpec::new(GridSpec::new(96, 96, 64, 32, 16), 2, 1.2, 4);
    spec.dim = 16;
    let (bundle, gt) = generate(&spec)?;
    let smooth = smooth_queries(&bundle.bank, &bundle.grid)?;
    let (grid, d, n) = (&bundle.grid, spec.dim, bundle.grid.tokens_per_window());
    let half = spec.grid.patch / 2;

    // Cosine between each token and its own class axis, before and after.
    let (mut before, mut after) = (0.0, 0.0);
    for w in 0..grid.len() {
        for t in 0..n {
            let b = grid.token_pixel_box(w, t)?;
            let class = usize::from(gt.get(b.y0 + half, b.x0 + half));
            let row = (w * n + t) * d;
            before += f64::from(bundle.bank.vfm().data()[row + class]);
            after += f64::from(smooth.data()[row + class]);
        }
    }
    let total = (grid.len() * n) as f64;
    println!(
        "{} tokens, noise up to 1.2 rad: mean cosine to class axis {:.3} raw, {:.3} smoothed",
        grid.len() * n,
        before / total,
        after / total
    );
    Ok(())
}
