mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdpc_core::metrics::{bd_rate, RdPoint};
use sdpc_core::nn::{down_conv_s2, sparse_conv, up_conv_s2, ConvKernel};
use sdpc_core::tensor::{Coord3, SparseTensor3};

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn same_scale_matches_dense(seed in any::<u64>(), ks in prop::sample::select(vec![1usize, 3, 9])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = rng.gen_range(1..=5);
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x = random_tensor(&mut rng, side, cin, 3);
        let k = random_kernel(&mut rng, ks, cin, cout);
        let targets = random_tensor(&mut rng, side, 1, 3);
        let y = sparse_conv(&x, &k, targets.coords()).unwrap();
        let dense = Dense::from_sparse(&x, 8);
        prop_assert!(max_abs_err(&y, |c| dense_conv_at(&dense, &k, c)) < TOL);
    }

    #[test]
    fn strided_match_dense(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = rng.gen_range(1..=5);
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x = random_tensor(&mut rng, side, cin, 3);
        let dense = Dense::from_sparse(&x, 8);
        let k = random_kernel(&mut rng, 2, cin, cout);
        let down = down_conv_s2(&x, &k).unwrap();
        prop_assert_eq!(down.coords().len(), x.downsample_coords().len());
        prop_assert!(max_abs_err(&down, |c| dense_down_at(&dense, &k, c)) < TOL);
        let up = up_conv_s2(&x, &k).unwrap();
        prop_assert_eq!(up.len(), 8 * x.len());
        prop_assert!(max_abs_err(&up, |c| dense_up_at(&dense, &k, c)) < TOL);
    }

    #[test]
    fn bd_rate_matches_integration(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, nb, qb) = (rng.gen_range(4..7), rng.gen_range(4..7), rng.gen_range(29.0..33.0));
        let a = random_curve(&mut rng, na, 30.0);
        let b = random_curve(&mut rng, nb, qb);
        let got = bd_rate(&a, &b).unwrap();
        let want = bd_rate_oracle(&a, &b, 10_000);
        prop_assert!((got - want).abs() <= 1e-3 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn hand_computed_k3() {
    let x = SparseTensor3::canonicalize(vec![Coord3::new(1, 1, 1), Coord3::new(1, 1, 2)], vec![2.0, -1.0], 1, 2).unwrap();
    let mut k = ConvKernel::zeros(3, 1, 1, true);
    // offset (0,0,0) is index 13, (0,0,1) is 14, (0,0,-1) is 12
    k.weights[13] = 0.5;
    k.weights[14] = 3.0;
    k.weights[12] = -2.0;
    k.bias = Some(vec![0.25]);
    let y = sparse_conv(&x, &k, &[Coord3::new(1, 1, 1), Coord3::new(1, 1, 2), Coord3::new(1, 1, 3)]).unwrap();
    assert_eq!(y.feats(), &[0.25 + 1.0 - 3.0, 0.25 - 0.5 - 4.0, 0.25 + 2.0]);
}

#[test]
fn frozen_bd_rate() {
    let a: Vec<RdPoint> = [(0.10, 30.0), (0.18, 33.0), (0.35, 36.5), (0.70, 39.0), (1.30, 41.0)]
        .iter()
        .map(|&(rate, quality)| RdPoint { rate, quality })
        .collect();
    let b: Vec<RdPoint> = [(0.08, 30.5), (0.15, 33.8), (0.26, 36.0), (0.52, 39.5)]
        .iter()
        .map(|&(rate, quality)| RdPoint { rate, quality })
        .collect();
    let oracle = bd_rate_oracle(&a, &b, 10_000);
    assert!((oracle - FROZEN_BD).abs() < 1e-6, "{oracle}");
    assert!((bd_rate(&a, &b).unwrap() - FROZEN_BD).abs() < 1e-6);
}

const FROZEN_BD: f64 = -25.527_638_805_4;
