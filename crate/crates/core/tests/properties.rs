mod common;

use ndarray::Array2;
use proptest::prelude::*;

use vprg_core::eval::rank_scores;
use vprg_core::grounding_local::select_top_q;
use vprg_core::moment_map::{soft_label_map, temporal_iou, MomentIndex, ScoreMap, TimeInterval};
use vprg_core::retrieval::{infonce_value, triplet_value, SimilarityMatrix};

fn interval() -> impl Strategy<Value = TimeInterval> {
    (0.0f64..100.0, 0.01f64..50.0).prop_map(|(s, l)| TimeInterval::new(s, s + l).unwrap())
}

fn moment(k: usize) -> impl Strategy<Value = MomentIndex> {
    (0..k, 0..k).prop_map(move |(a, b)| MomentIndex::new(a.min(b), a.max(b), k).unwrap())
}

fn square(b: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0f64..1.0, b * b).prop_map(move |v| Array2::from_shape_vec((b, b), v).unwrap())
}

fn permute(s: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(s.dim(), |(r, c)| s[[perm[r], perm[c]]])
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in interval(), b in interval()) {
        let ab = temporal_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, temporal_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(temporal_iou(&a, &a).unwrap(), 1.0);
        prop_assert!((ab - common::iou_oracle((a.start, a.end), (b.start, b.end))).abs() < 1e-12);
    }

    #[test]
    fn cells_round_trip(k in 1usize..32, m in (1usize..32).prop_flat_map(moment)) {
        prop_assume!(m.end < k);
        prop_assert_eq!(MomentIndex::from_cell(m.cell(k), k), m);
    }

    #[test]
    fn soft_labels_peak_at_target(t in moment(12)) {
        let map = soft_label_map(t, 12, 0.5, 1.0).unwrap();
        prop_assert_eq!(map.get(t), 1.0);
        for (_, v) in map.valid_cells() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(map.argmax(), t);
    }

    #[test]
    fn triplet_ignores_constant_shift(s in square(4), c in -0.5f64..0.5) {
        // similarities stay inside [-1, 1]
        let s = s.mapv(|v| v * 0.5);
        let shifted = s.mapv(|v| v + c);
        let a = triplet_value(&SimilarityMatrix::new(s).unwrap(), 0.2);
        let b = triplet_value(&SimilarityMatrix::new(shifted).unwrap(), 0.2);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn losses_ignore_batch_order(s in square(5), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let p = permute(&s, &perm);
        let (s, p) = (SimilarityMatrix::new(s).unwrap(), SimilarityMatrix::new(p).unwrap());
        prop_assert!((infonce_value(&s, 7.0) - infonce_value(&p, 7.0)).abs() < 1e-9);
        prop_assert!((triplet_value(&s, 0.2) - triplet_value(&p, 0.2)).abs() < 1e-9);
        prop_assert!(infonce_value(&s, 7.0) >= 0.0);
    }

    #[test]
    fn top_q_is_sorted_and_valid(values in prop::collection::vec(0.0f64..1.0, 36), q in 1usize..8) {
        let map = ScoreMap::from_matrix(Array2::from_shape_vec((6, 6), values).unwrap()).unwrap();
        let top = select_top_q(&map, q).unwrap();
        prop_assert_eq!(top.len(), q);
        prop_assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert!(top.iter().all(|(m, _)| m.start <= m.end));
        prop_assert_eq!(top[0].0, map.argmax());
    }

    #[test]
    fn rankings_are_total_and_descending(scores in prop::collection::vec(-1.0f64..1.0, 1..12)) {
        let scored: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &s)| (format!("v{i:02}"), s)).collect();
        let ranked = rank_scores(scored.clone());
        prop_assert_eq!(ranked.len(), scored.len());
        for w in ranked.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }
}
