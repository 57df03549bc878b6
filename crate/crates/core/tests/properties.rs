use std::path::Path;

use morphface::evaluation::{auc, cosine_similarity, fuse_scores, roc_curve, ScoredPair};
use morphface::geometry::{apply_transform, procrustes_align, rotation_from_euler_zyx, Shape, SimilarityTransform};
use morphface::io::{format_obj, parse_obj, Container};
use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -1e6..1e6f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn procrustes_inverts_a_similarity(
        scale in 0.2..5.0f64,
        yaw in -3.0..3.0f64,
        pitch in -1.4..1.4f64,
        roll in -3.0..3.0f64,
        t in prop::array::uniform3(-100.0..100.0f64),
        coords in prop::collection::vec(-50.0..50.0f64, 30..90),
    ) {
        let n = coords.len() / 3 * 3;
        let source = Shape::new(coords[..n].to_vec()).unwrap();
        let xf = SimilarityTransform::new(scale, rotation_from_euler_zyx(yaw, pitch, roll), Vector3::from(t)).unwrap();
        let target = apply_transform(&source, &xf);
        let found = procrustes_align(&source.points(), &target.points()).unwrap();
        let aligned = apply_transform(&source, &found);
        let worst = aligned.points().iter().zip(target.points()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-7, "worst residual {worst}");
        prop_assert!((found.scale - scale).abs() < 1e-9 * scale.max(1.0));
    }

    #[test]
    fn container_roundtrip_is_bitwise(
        rows in 1usize..6,
        cols in 1usize..6,
        values in prop::collection::vec(finite(), 36),
        ints in prop::collection::vec(any::<u64>(), 0..10),
        config in "[a-z0-9 .=\n]{0,40}",
    ) {
        let m = DMatrix::from_column_slice(rows, cols, &values[..rows * cols]);
        let mut c = Container::new("prop", &config);
        c.push_matrix("m", &m);
        c.push_u64s("ints", &ints);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.matrix("m").unwrap(), m);
        prop_assert_eq!(back.u64s("ints").unwrap(), ints);
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn container_detects_any_single_byte_flip(
        values in prop::collection::vec(finite(), 1..20),
        position in any::<prop::sample::Index>(),
        mask in 1u8..=255,
    ) {
        let mut c = Container::new("prop", "");
        c.push_f64s("v", &values);
        let mut bytes = c.to_bytes();
        let i = position.index(bytes.len());
        bytes[i] ^= mask;
        prop_assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn obj_text_roundtrips_to_nine_significant_digits(coords in prop::collection::vec(finite(), 12..60)) {
        let n = coords.len() / 3 * 3;
        let shape = Shape::new(coords[..n].to_vec()).unwrap();
        let back = parse_obj(&format_obj(&shape), Path::new("prop.obj")).unwrap();
        for (a, b) in shape.coords().iter().zip(back.coords()) {
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn auc_is_complemented_by_flipping_labels(
        scores in prop::collection::vec((0u8..20, any::<bool>()), 2..80),
    ) {
        let pairs: Vec<ScoredPair> = scores.iter().map(|&(s, g)| ScoredPair { score: f64::from(s), is_genuine: g }).collect();
        prop_assume!(pairs.iter().any(|p| p.is_genuine) && pairs.iter().any(|p| !p.is_genuine));
        let flipped: Vec<ScoredPair> = pairs.iter().map(|p| ScoredPair { score: p.score, is_genuine: !p.is_genuine }).collect();
        let a = auc(&roc_curve(&pairs).unwrap());
        let b = auc(&roc_curve(&flipped).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_to_monotone_rescaling(
        scores in prop::collection::vec((-50i32..50, any::<bool>()), 2..60),
        gain in 0.1..10.0f64,
        offset in -5.0..5.0f64,
    ) {
        let pairs: Vec<ScoredPair> = scores.iter().map(|&(s, g)| ScoredPair { score: f64::from(s), is_genuine: g }).collect();
        prop_assume!(pairs.iter().any(|p| p.is_genuine) && pairs.iter().any(|p| !p.is_genuine));
        let mapped: Vec<ScoredPair> = pairs.iter().map(|p| ScoredPair { score: gain * p.score + offset, ..*p }).collect();
        let a = auc(&roc_curve(&pairs).unwrap());
        let b = auc(&roc_curve(&mapped).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fused_scores_stay_within_list_count(
        lists in prop::collection::vec(prop::collection::vec(finite(), 8), 1..4),
    ) {
        let fused = fuse_scores(&lists).unwrap();
        prop_assert_eq!(fused.len(), 8);
        prop_assert!(fused.iter().all(|&f| (0.0..=lists.len() as f64 + 1e-12).contains(&f)));
    }

    #[test]
    fn cosine_similarity_ignores_positive_scale(
        a in prop::collection::vec(-10.0..10.0f64, 5),
        b in prop::collection::vec(-10.0..10.0f64, 5),
        k in 0.01..100.0f64,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|x| k * x).collect();
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!(c.abs() <= 1.0 + 1e-12);
        prop_assert!((c - cosine_similarity(&scaled, &b).unwrap()).abs() < 1e-12);
    }
}
