//! Proxy anchors: each query is pulled towards the mean of the global keys
//! it is strongly similar to. Shows the positive sets per round threshold.
//!
//!     cargo run --example proxy_anchors

use glaclip::attention::{build_proxies, ProxyConfig};
use glaclip::TensorF32;

fn main() -> glaclip::Result<()> {
    let s = std::f32::consts::FRAC_1_SQRT_2;
    // Two windows of three tokens each, flattened window-major.
    let keys = TensorF32::from_rows(&[
        vec![1.0, 0.0],
        vec![s, s],
        vec![0.0, 1.0],
        vec![0.96, 0.28],
        vec![-1.0, 0.0],
        vec![0.6, 0.8],
    ])?;
    let queries = TensorF32::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]])?;

    for (rho, steps) in [(0.6, 0), (0.6, 2), (0.9, 2)] {
        let state = build_proxies(
            &queries,
            &keys,
            &ProxyConfig {
                rho,
                steps,
                renormalize: true,
            },
        )?;
        println!("rho={rho} steps={steps}");
        for i in 0..3 {
            let p = state.proxies.row(i);
            println!(
                "  query {i}: proxy [{:+.3}, {:+.3}]  positives {:?}",
                p[0], p[1], state.positive_sets[i]
            );
        }
    }
    // Query 2 points away from every key: its set falls back to the single
    // most similar key.
    Ok(())
}
