use proptest::prelude::*;
use recoat::net::{att_pool, att_scores, att_weights, random_inputs, AttentionConfig, NetConfig, RecoatNet};
use recoat::scene::{AgentType, Point, MAX_NEIGHBORS};

/// Real neighbors at distinct radii (all above the distance floor) in random directions.
fn neighbor_set() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((0.2f64..30.0, -3.2f64..3.2), 1..=MAX_NEIGHBORS)
        .prop_map(|v| v.into_iter().map(|(r, a)| [r * a.cos(), r * a.sin()]).collect())
}

fn padded(real: &[Point]) -> [Point; MAX_NEIGHBORS] {
    let mut out = [[0.0; 2]; MAX_NEIGHBORS];
    out[..real.len()].copy_from_slice(real);
    out
}

fn norm(p: Point) -> f64 {
    p[0].hypot(p[1])
}

fn weights(real: &[Point]) -> [f64; MAX_NEIGHBORS] {
    att_weights(&att_scores(&padded(real), real.len(), &AttentionConfig::default()))
}

fn small_config() -> NetConfig {
    NetConfig {
        conv1d_channels: 4,
        lstm_hidden: 6,
        image_size: 16,
        cnn_blocks: vec![[3, 2, 4], [3, 2, 6]],
        context_dim: 5,
        path_points: 12,
        path_convs: vec![[3, 2, 4], [3, 1, 7]],
        score_traj_dim: 4,
        score_hidden: 5,
        ..NetConfig::new(AgentType::Vehicle)
    }
}

#[test]
fn default_attention_settings() {
    let cfg = AttentionConfig::default();
    assert_eq!(cfg.alpha, 10.0);
    assert_eq!(cfg.mask_value, -1e9);
    assert_eq!(cfg.distance_floor, 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_sum_to_one_and_padding_vanishes(real in neighbor_set()) {
        let w = weights(&real);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        for &pad in &w[real.len()..] {
            prop_assert!(pad < 1e-9);
        }
    }

    #[test]
    fn closer_neighbors_get_more_weight(real in neighbor_set()) {
        let w = weights(&real);
        for i in 0..real.len() {
            for j in 0..real.len() {
                if norm(real[i]) < norm(real[j]) {
                    prop_assert!(w[i] > w[j], "d {} < {} but w {} <= {}", norm(real[i]), norm(real[j]), w[i], w[j]);
                }
            }
        }
    }

    #[test]
    fn scores_follow_the_inverse_distance_formula(real in neighbor_set(), alpha in 0.5f64..50.0) {
        let cfg = AttentionConfig { alpha, ..AttentionConfig::default() };
        let s = att_scores(&padded(&real), real.len(), &cfg);
        for (i, p) in real.iter().enumerate() {
            prop_assert_eq!(s[i], alpha / norm(*p).max(cfg.distance_floor));
        }
        for &pad in &s[real.len()..] {
            prop_assert_eq!(pad, cfg.mask_value);
        }
    }

    #[test]
    fn doubling_distances_halves_scores_and_keeps_the_order(real in neighbor_set()) {
        let cfg = AttentionConfig::default();
        let far: Vec<Point> = real.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
        let (s1, s2) = (att_scores(&padded(&real), real.len(), &cfg), att_scores(&padded(&far), far.len(), &cfg));
        for i in 0..real.len() {
            prop_assert!((s2[i] - s1[i] / 2.0).abs() <= 1e-12 * s1[i]);
        }
        let (w1, w2) = (weights(&real), weights(&far));
        for i in 0..real.len() {
            for j in 0..real.len() {
                prop_assert_eq!(w1[i] > w1[j], w2[i] > w2[j]);
            }
        }
    }

    #[test]
    fn permuting_neighbors_permutes_weights_and_keeps_the_pool(
        real in neighbor_set(),
        seed in any::<u64>(),
        dim in 1usize..9,
    ) {
        let n = real.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            order.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let values: Vec<Vec<f64>> = (0..MAX_NEIGHBORS)
            .map(|i| (0..dim).map(|k| ((i * 31 + k * 7) as f64).sin() * 3.0).collect())
            .collect();
        let permuted_pts: Vec<Point> = order.iter().map(|&i| real[i]).collect();
        let mut permuted_vals: Vec<Vec<f64>> = order.iter().map(|&i| values[i].clone()).collect();
        permuted_vals.extend(values[n..].iter().cloned());

        let (w, wp) = (weights(&real), weights(&permuted_pts));
        for (k, &i) in order.iter().enumerate() {
            prop_assert!((wp[k] - w[i]).abs() <= 1e-12);
        }
        let a = att_pool(&w, &values).unwrap();
        let b = att_pool(&wp, &permuted_vals).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        // Direct weighted-sum oracle.
        for k in 0..dim {
            let expected: f64 = (0..MAX_NEIGHBORS).map(|i| w[i] * values[i][k]).sum();
            prop_assert!((a[k] - expected).abs() <= 1e-12);
        }
    }
}

#[test]
fn alpha_ten_reference_cases() {
    let cfg = AttentionConfig::default();
    let s = att_scores(&padded(&[[1.0, 0.0], [0.0, 2.0], [-4.0, 0.0]]), 3, &cfg);
    assert_eq!(&s[..3], &[10.0, 5.0, 2.5]);
    let w = att_weights(&att_scores(&padded(&[[1.0, 0.0], [0.0, 2.0]]), 2, &cfg));
    assert!((w[0] - 0.993307).abs() < 1e-6 && (w[1] - 0.006693).abs() < 1e-6);
}

#[test]
fn path_feature_is_the_max_of_per_line_features() {
    let cfg = small_config();
    let net = RecoatNet::new(cfg.clone(), 3).unwrap();
    for seed in 0..10 {
        let inputs = random_inputs(&cfg, 0, 3, seed);
        let lines = &inputs.centerlines;
        let joint = net.encode_paths(lines).unwrap();
        let single: Vec<Vec<f64>> = lines.iter().map(|l| net.encode_paths(std::slice::from_ref(l)).unwrap()).collect();
        assert_eq!(joint.len(), cfg.path_dim());
        for k in 0..joint.len() {
            let m = single.iter().map(|f| f[k]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(joint[k], m);
        }
        assert_eq!(net.encode_paths(&lines[..1]).unwrap(), single[0]);
    }
    assert!(net.encode_paths(&[]).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn inference_is_deterministic_and_batch_independent() {
    let cfg = small_config();
    let net = RecoatNet::new(cfg.clone(), 11).unwrap();
    let inputs: Vec<_> = (0..4).map(|s| random_inputs(&cfg, s as usize * 3, 2, s)).collect();
    let refs: Vec<_> = inputs.iter().collect();
    let batch = net.predict_batch(&refs).unwrap();
    assert_eq!(batch, net.predict_batch(&refs).unwrap());
    for (i, one) in inputs.iter().enumerate() {
        let alone = net.predict(one).unwrap();
        for (a, b) in alone.trajectories.iter().flatten().zip(batch[i].trajectories.iter().flatten()) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
        assert!((alone.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
