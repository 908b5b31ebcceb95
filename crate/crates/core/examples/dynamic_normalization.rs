//! Fixed versus dynamic score normalization on one window of random tokens.
//!
//!     cargo run --example dynamic_normalization

use glaclip::attention::{
    build_proxies, dynamic_normalize, dynamic_u, dynamic_w, extend_key_value, fixed_normalize,
    mask_and_softmax, self_similarity, NormConfig, ProxyConfig, TokenBank,
};
use glaclip::grid::GridSpec;
use glaclip::synthetic::{generate, SyntheticSpec};
use glaclip::TensorF32;

fn kept(attn: &TensorF32) -> f64 {
    let nonzero = attn.data().iter().filter(|&&v| v > 0.0).count();
    nonzero as f64 / attn.shape()[0] as f64
}

fn main() -> glaclip::Result<()> {
    println!("shift u(L) with lambda1 = 0.3:");
    for l in [1, 2, 4, 8, 12, 32] {
        println!("  L={l:>2}  u={:.5}", dynamic_u(l, 0.3));
    }
    println!("scale w(|P|) with lambda2 = 30:");
    for p in [1, 2, 5, 30, 100] {
        println!("  |P|={p:>3}  w={:.3}", dynamic_w(p, 30.0));
    }

    let spec = SyntheticSpec::new(GridSpec::new(128, 128, 64, 32, 16), 4, 0.9, 1);
    let (bundle, _) = generate(&spec)?;
    let bank: &TokenBank = &bundle.bank;
    let (k, _) = extend_key_value(bank);
    let state = build_proxies(&bank.window_vfm(0)?, &k, &ProxyConfig::default())?;
    let s = self_similarity(&state.proxies, &k)?;

    let fixed = mask_and_softmax(&fixed_normalize(&s, 1.2, 3.0)?)?;
    let dynamic = mask_and_softmax(&dynamic_normalize(
        &s,
        &state,
        bank.windows(),
        &NormConfig::default(),
    )?)?;
    println!(
        "window 0 of {}: {} global keys, mean unmasked keys per query fixed={:.1} dynamic={:.1}",
        bank.windows(),
        k.shape()[0],
        kept(&fixed),
        kept(&dynamic)
    );
    Ok(())
}
