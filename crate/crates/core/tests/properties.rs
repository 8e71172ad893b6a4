mod common;

use common::criteria::{encode_decode_round_trip, metric_oracles, mirror_involution_failures, projection_oracle};
use common::*;
use proptest::prelude::*;

use unsct::eval::{mre, nme, Pair};
use unsct::landmarks::{build_default_skeleton, mirror_landmarks, Spacing};
use unsct::net::{Network, NetworkConfig};
use unsct::nn::Tensor;
use unsct::phantom::{generate_phantom, PhantomConfig};
use unsct::uncertainty::{entropy_uncertainty, projection_weight};

#[test]
fn projection_matches_dense_brute_force() {
    let r = projection_oracle(150, 9);
    assert!(r.max_rel_vs_dense < 0.01, "{}", r.max_rel_vs_dense);
    assert!(r.max_linearity_err < 1e-9, "{}", r.max_linearity_err);
}

#[test]
fn metrics_match_brute_force() {
    let r = metric_oracles(300, 4);
    assert!(r.max_err < 1e-9, "{}", r.max_err);
    assert!((r.icc_worked_example - 0.29).abs() < 1e-3, "{}", r.icc_worked_example);
    assert_eq!(r.mre_345, 5.0);
}

#[test]
fn encode_decode_recovers_landmarks() {
    let r = encode_decode_round_trip(200, 100);
    assert_eq!(r.landmarks, 200 * 24);
    assert!(r.max_err_px <= 4.0 / 2.0 + 0.5, "{}", r.max_err_px);
}

#[test]
fn mirror_is_an_involution_on_phantoms() {
    assert_eq!(mirror_involution_failures(200, 0), 0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn output_shape_contract(k in 1usize..6, e in 1usize..8, hq in 1usize..4, wq in 1usize..4, srf in any::<bool>()) {
        let cfg = NetworkConfig {
            stages: 2,
            widths: vec![2, 4],
            output_stride: 4,
            num_landmarks: k,
            num_edges: e,
            srf_enabled: srf,
            ..NetworkConfig::default()
        };
        let net = Network::new(cfg, 1).unwrap();
        let (h, w) = (8 * hq, 8 * wq);
        let out = net.predict(&Tensor::zeros([2, 1, h, w])).unwrap();
        prop_assert_eq!(out.heatmaps.shape(), [2, k, h / 4, w / 4]);
        prop_assert_eq!(out.paf.shape(), [2, 2 * e, h / 4, w / 4]);
    }

    #[test]
    fn projection_is_linear_in_the_field(
        alpha in -5.0f64..5.0,
        ax in 0.0f64..60.0, ay in 0.0f64..60.0, bx in 0.0f64..60.0, by in 0.0f64..60.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(((bx - ax).powi(2) + (by - ay).powi(2)).sqrt() > 1e-3);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let fx: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fy: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = projection_weight(&fx, &fy, 16, 16, 4, (ax, ay), (bx, by), 32).unwrap();
        let sx: Vec<f64> = fx.iter().map(|v| v * alpha).collect();
        let sy: Vec<f64> = fy.iter().map(|v| v * alpha).collect();
        let scaled = projection_weight(&sx, &sy, 16, 16, 4, (ax, ay), (bx, by), 32).unwrap();
        prop_assert!((scaled.raw - alpha * base.raw).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&base.normalized));
    }

    #[test]
    fn entropy_is_nonnegative_on_unit_interval(w in 0.0f64..=1.0) {
        let u = entropy_uncertainty(w, 1e-6);
        prop_assert!(u >= -1e-12 && u <= (-1.0f64).exp() + 1e-9);
    }

    #[test]
    fn mre_scales_with_spacing_and_nme_with_scale(
        pts in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0, -5.0f64..5.0, -5.0f64..5.0), 1..20),
        s in 0.1f64..3.0,
        d in 10.0f64..300.0,
    ) {
        let pairs: Vec<Pair> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y, dx, dy))| Pair { global_id: i, pred: (x + dx, y + dy), gt: (x, y) })
            .collect();
        let one = mre(&pairs, Spacing::uniform(1.0)).unwrap();
        prop_assert!((mre(&pairs, Spacing::uniform(s)).unwrap() - s * one).abs() < 1e-9 * (1.0 + one));
        let scaled: Vec<Pair> = pairs
            .iter()
            .map(|p| Pair { global_id: p.global_id, pred: (p.pred.0 * s, p.pred.1 * s), gt: (p.gt.0 * s, p.gt.1 * s) })
            .collect();
        prop_assert!((nme(&scaled, d * s).unwrap() - nme(&pairs, d).unwrap()).abs() < 1e-9);
        let relabeled: Vec<Pair> = pairs.iter().rev().cloned().collect();
        prop_assert!((mre(&relabeled, Spacing::uniform(s)).unwrap() - mre(&pairs, Spacing::uniform(s)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn mirror_twice_is_identity(seed in any::<u64>()) {
        let a = generate_phantom(&PhantomConfig::with_size(128, 128), seed).unwrap();
        prop_assert_eq!(mirror_landmarks(&mirror_landmarks(&a)), a.clone());
        let m = mirror_landmarks(&a);
        prop_assert!(unsct::landmarks::validate_annotation(&m).is_empty());
    }

    #[test]
    fn skeleton_mirror_pairs_edges(id in 0usize..24) {
        let sk = build_default_skeleton();
        let mirrored = unsct::landmarks::mirrored_id(id);
        prop_assert_eq!(sk.degree(id), sk.degree(mirrored));
    }
}

#[test]
fn dense_oracle_agrees_with_itself_on_constant_field() {
    // Sanity check of the oracle: a constant aligned field integrates to
    // the segment length.
    let f = vec![1.0; 64];
    let z = vec![0.0; 64];
    let len: f64 = 20.0;
    let mut acc = 0.0;
    for k in 0..4096 {
        let t = (k as f64 + 0.5) / 4096.0;
        acc += bilinear_ref(&f, 8, 8, (2.0 + t * len) / 4.0, 1.0) * len / 4096.0;
    }
    assert!((acc - len).abs() < 1e-9);
    assert!(bilinear_ref(&z, 8, 8, 3.3, 2.2).abs() < 1e-12);
}
