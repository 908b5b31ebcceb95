mod common;

use glaclip::attention::{
    attend_and_project, build_proxies, dynamic_u, dynamic_w, fixed_normalize, mask_and_softmax,
    self_similarity, smooth_queries, window_attention, AttentionConfig, NormConfig, ProjectionHead,
    ProxyConfig, TokenBank,
};
use glaclip::grid::{build_window_grid, GridSpec};
use glaclip::TensorF32;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn baseline_cfg() -> AttentionConfig {
    AttentionConfig {
        proxy: ProxyConfig {
            steps: 0,
            ..ProxyConfig::default()
        },
        norm: NormConfig::fixed(1.2, 3.0),
        smoothing: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn single_window_reduces_to_baseline(seed in any::<u64>(), side in 1usize..6, dv in 1usize..12, dc in 1usize..12, de in 1usize..12) {
        let mut rng = common::rng(seed);
        let n = side * side;
        let feats = common::clustered_unit_vectors(&mut rng, n, dv, 2);
        let values = common::uniform_matrix(&mut rng, n, dc, 1.0);
        let weight = common::uniform_matrix(&mut rng, dc, de, 0.5);
        let bias = common::uniform_matrix(&mut rng, 1, de, 0.5).remove(0);
        let grid = build_window_grid(GridSpec::new(side, side, side, side, 1)).unwrap();
        let bank = TokenBank::from_windows(
            &[TensorF32::from_rows(&feats).unwrap()],
            &[TensorF32::from_rows(&values).unwrap()],
        ).unwrap();
        let head = ProjectionHead::new(TensorF32::from_rows(&weight).unwrap(), TensorF32::new(vec![de], bias.clone()).unwrap()).unwrap();
        let got = window_attention(&bank, &grid, &head, 0, &baseline_cfg()).unwrap();
        let want = common::baseline_oracle(&feats, &values, &weight, &bias, 1.2, 3.0);
        for i in 0..n {
            for e in 0..de {
                prop_assert!((f64::from(got.at2(i, e)) - want[i][e]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn raw_mean_proxies_match_oracle(seed in any::<u64>(), l in 1usize..4, n in 1usize..16, d in 1usize..8, steps in 0usize..3, rho in 0.0f32..0.95) {
        let mut rng = common::rng(seed);
        let keys = common::clustered_unit_vectors(&mut rng, l * n, d, 3);
        let queries = keys[..n].to_vec();
        let cfg = ProxyConfig { rho, steps, renormalize: false };
        let got = build_proxies(&TensorF32::from_rows(&queries).unwrap(), &TensorF32::from_rows(&keys).unwrap(), &cfg).unwrap();
        let want = common::proxy_oracle(&queries, &keys, rho, steps, false);
        for i in 0..n {
            let set: std::collections::BTreeSet<usize> = got.positive_sets[i].iter().copied().collect();
            prop_assert_eq!(&set, &want.sets[i]);
            for c in 0..d {
                prop_assert!((got.proxies.at2(i, c) - want.proxies[i][c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn renormalized_proxies_are_unit_and_sets_nonempty(seed in any::<u64>(), l in 1usize..4, n in 1usize..16, d in 2usize..8, rho in -0.5f32..0.99) {
        let mut rng = common::rng(seed);
        let keys = common::clustered_unit_vectors(&mut rng, l * n, d, 3);
        let queries: Vec<Vec<f32>> = (0..n).map(|_| common::unit_vector(&mut rng, d)).collect();
        let state = build_proxies(&TensorF32::from_rows(&queries).unwrap(), &TensorF32::from_rows(&keys).unwrap(), &ProxyConfig { rho, ..ProxyConfig::default() }).unwrap();
        for (i, set) in state.positive_sets.iter().enumerate() {
            prop_assert!(!set.is_empty());
            prop_assert!(set.windows(2).all(|p| p[0] < p[1]));
            let norm: f32 = state.proxies.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn global_token_permutation_is_equivariant(seed in any::<u64>(), m in 2usize..40, n in 1usize..10, d in 2usize..8, dc in 1usize..6) {
        let mut rng = common::rng(seed);
        let keys = common::clustered_unit_vectors(&mut rng, m, d, 3);
        let values = common::uniform_matrix(&mut rng, m, dc, 1.0);
        let queries: Vec<Vec<f32>> = (0..n).map(|_| common::unit_vector(&mut rng, d)).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let permute = |v: &[Vec<f32>]| -> Vec<Vec<f32>> { perm.iter().map(|&p| v[p].clone()).collect() };
        let head = ProjectionHead::identity(dc);
        let q = TensorF32::from_rows(&queries).unwrap();
        let run = |k: &[Vec<f32>], v: &[Vec<f32>]| {
            let s = self_similarity(&q, &TensorF32::from_rows(k).unwrap()).unwrap();
            let attn = mask_and_softmax(&fixed_normalize(&s, 1.2, 3.0).unwrap()).unwrap();
            let out = attend_and_project(&attn, &TensorF32::from_rows(v).unwrap(), &head).unwrap();
            (attn, out)
        };
        let (a, out) = run(&keys, &values);
        let (ap, outp) = run(&permute(&keys), &permute(&values));
        for i in 0..n {
            for (jp, &j) in perm.iter().enumerate() {
                prop_assert!((a.at2(i, j) - ap.at2(i, jp)).abs() <= 1e-6);
            }
        }
        for (x, y) in out.data().iter().zip(outp.data()) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn window_order_does_not_change_window_outputs(seed in any::<u64>(), dynamic in any::<bool>()) {
        let mut rng = common::rng(seed);
        let grid = build_window_grid(GridSpec::new(6, 8, 4, 2, 2)).unwrap();
        let (l, n, d) = (grid.len(), grid.tokens_per_window(), 5);
        let vfm: Vec<TensorF32> = (0..l).map(|_| TensorF32::from_rows(&common::clustered_unit_vectors(&mut rng, n, d, 2)).unwrap()).collect();
        let val: Vec<TensorF32> = (0..l).map(|_| TensorF32::from_rows(&common::uniform_matrix(&mut rng, n, 3, 1.0)).unwrap()).collect();
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut rng);
        let bank = TokenBank::from_windows(&vfm, &val).unwrap();
        let pv: Vec<TensorF32> = perm.iter().map(|&p| vfm[p].clone()).collect();
        let pa: Vec<TensorF32> = perm.iter().map(|&p| val[p].clone()).collect();
        let permuted = TokenBank::from_windows(&pv, &pa).unwrap();
        let cfg = AttentionConfig {
            norm: if dynamic { NormConfig::default() } else { NormConfig::fixed(1.2, 3.0) },
            ..AttentionConfig::default()
        };
        let head = ProjectionHead::identity(3);
        for (slot, &k) in perm.iter().enumerate() {
            let a = window_attention(&bank, &grid, &head, k, &cfg).unwrap();
            let b = window_attention(&permuted, &grid, &head, slot, &cfg).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-5, "window {k}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn dynamic_scalars_are_monotone(l in 1usize..500, p in 1usize..500, lambda1 in 0.0f32..2.0, lambda2 in 0.01f32..100.0) {
        prop_assert!(dynamic_u(l + 1, lambda1) >= dynamic_u(l, lambda1));
        prop_assert!(dynamic_w(p + 1, lambda2) < dynamic_w(p, lambda2));
        prop_assert_eq!(dynamic_u(l, 0.0), 1.0);
    }
}

#[test]
fn smoothing_keeps_constant_field() {
    let mut rng = common::rng(5);
    let grid = build_window_grid(GridSpec::new(12, 10, 8, 4, 2)).unwrap();
    let (l, n) = (grid.len(), grid.tokens_per_window());
    let v = common::unit_vector(&mut rng, 7);
    let vfm: Vec<TensorF32> = (0..l)
        .map(|_| TensorF32::from_rows(&vec![v.clone(); n]).unwrap())
        .collect();
    let val: Vec<TensorF32> = (0..l)
        .map(|_| TensorF32::zeros(vec![n, 2]).unwrap())
        .collect();
    let bank = TokenBank::from_windows(&vfm, &val).unwrap();
    let smoothed = smooth_queries(&bank, &grid).unwrap();
    assert_eq!(smoothed.shape(), &[l, n, 7]);
    for row in smoothed.data().chunks_exact(7) {
        for (a, b) in row.iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn smoothing_output_is_unit_norm() {
    let mut rng = common::rng(9);
    let grid = build_window_grid(GridSpec::new(10, 14, 6, 3, 2)).unwrap();
    let (l, n) = (grid.len(), grid.tokens_per_window());
    let vfm: Vec<TensorF32> = (0..l)
        .map(|_| TensorF32::from_rows(&common::clustered_unit_vectors(&mut rng, n, 4, 3)).unwrap())
        .collect();
    let val: Vec<TensorF32> = (0..l)
        .map(|_| TensorF32::zeros(vec![n, 1]).unwrap())
        .collect();
    let bank = TokenBank::from_windows(&vfm, &val).unwrap();
    let smoothed = smooth_queries(&bank, &grid).unwrap();
    for row in smoothed.data().chunks_exact(4) {
        let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
