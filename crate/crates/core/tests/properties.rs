mod common;

use ccd_core::augment::{apply_strong, apply_weak, enumerate_strong, AugKind, StrongBase, WeakConfig};
use ccd_core::detect::{fanogan_score, igd_score, msssim_score};
use ccd_core::image::{Image, Mask};
use ccd_core::localize::{combine_maps, connected_components, Heatmap, MapScale};
use ccd_core::losses::{augmentation_classification_loss, contrastive_distribution_loss, position_prediction_loss};
use ccd_core::metrics::{auroc, iou};
use proptest::prelude::*;

fn normalise(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Random orthogonal matrix from Gram-Schmidt on `raw` (row-major `d x d`).
fn orthogonal(raw: &[f64], d: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = raw[i * d..(i + 1) * d].to_vec();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        normalise(&mut v);
        q.push(v);
    }
    q.concat()
}

fn rotate(rows: &[f64], q: &[f64], d: usize) -> Vec<f64> {
    rows.chunks(d).flat_map(|r| (0..d).map(move |i| (0..d).map(|j| q[i * d + j] * r[j]).sum::<f64>())).collect()
}

fn unit_rows(raw: Vec<f64>, d: usize) -> Vec<f64> {
    let mut v = raw;
    v.chunks_mut(d).for_each(normalise);
    v
}

fn mask_from(bits: &[bool], h: usize, w: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    for (i, &b) in bits.iter().enumerate() {
        m.set(i / w, i % w, b);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_loss_is_rotation_invariant(
        raw in prop::collection::vec(-1.0f64..1.0, 3 * 4 + 3 * 4 + 3 * 2 * 4),
        basis in prop::collection::vec(-1.0f64..1.0, 16),
        tau in 0.05f64..1.0,
    ) {
        let d = 4;
        let a = unit_rows(raw[..12].to_vec(), d);
        let p = unit_rows(raw[12..24].to_vec(), d);
        let n = unit_rows(raw[24..].to_vec(), d);
        let q = orthogonal(&basis, d);
        let before = contrastive_distribution_loss(&a, &p, &n, d, tau).unwrap().loss;
        let after = contrastive_distribution_loss(&rotate(&a, &q, d), &rotate(&p, &q, d), &rotate(&n, &q, d), d, tau).unwrap().loss;
        prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
        prop_assert!(before >= 0.0);
    }

    #[test]
    fn contrastive_loss_falls_as_positive_similarity_rises(
        negs in prop::collection::vec(-1.0f64..1.0, 3 * 3),
        s_low in -1.0f64..0.9,
        gap in 0.01f64..0.5,
    ) {
        // anchor e0; positive with similarity s to the anchor; negatives fixed.
        let d = 3;
        let anchor = vec![1.0, 0.0, 0.0];
        let negatives = unit_rows(negs, d);
        let pos = |s: f64| vec![s, (1.0 - s * s).max(0.0).sqrt(), 0.0];
        let s_high = (s_low + gap).min(1.0);
        let lo = contrastive_distribution_loss(&anchor, &pos(s_low), &negatives, d, 0.2).unwrap().loss;
        let hi = contrastive_distribution_loss(&anchor, &pos(s_high), &negatives, d, 0.2).unwrap().loss;
        prop_assert!(hi < lo, "loss {hi} at s={s_high} not below {lo} at s={s_low}");
    }

    #[test]
    fn classification_losses_are_non_negative(raw in prop::collection::vec(0.01f64..1.0, 5 * 8), labels in prop::collection::vec(0usize..8, 5)) {
        let mut probs = raw;
        probs.chunks_mut(8).for_each(|r| { let s: f64 = r.iter().sum(); r.iter_mut().for_each(|v| *v /= s); });
        prop_assert!(position_prediction_loss(&probs, &labels).unwrap().0 >= 0.0);
        prop_assert!(augmentation_classification_loss(&probs, 8, &labels).unwrap().0 >= 0.0);
    }

    #[test]
    fn auroc_ignores_increasing_transforms(scores in prop::collection::vec(0.001f64..10.0, 2..60), flips in prop::collection::vec(any::<bool>(), 60)) {
        let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let base = auroc(&scores, &labels).unwrap();
        let squared: Vec<f64> = scores.iter().map(|s| s * s).collect();
        let logged: Vec<f64> = scores.iter().map(|s| s.ln()).collect();
        prop_assert_eq!(base, auroc(&squared, &labels).unwrap());
        prop_assert_eq!(base, auroc(&logged, &labels).unwrap());
        prop_assert_eq!(base, common::pairwise_auroc(&scores, &labels));
    }

    #[test]
    fn auroc_of_complement_labels_sums_to_one(n in 2usize..60, seed in any::<u64>(), flips in prop::collection::vec(any::<bool>(), 60)) {
        // Distinct scores: a seeded permutation of 0..n.
        let scores: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1_000_003) as f64 + i as f64 * 1e-6).collect();
        let mut labels = flips[..n].to_vec();
        labels[0] = true;
        labels[1] = false;
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_rescaling_keeps_ranking(scores in prop::collection::vec(-5.0f64..5.0, 2..40), a in 0.01f64..100.0, b in -10.0f64..10.0) {
        let rescaled: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let order = |v: &[f64]| { let mut o: Vec<usize> = (0..v.len()).collect(); o.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j))); o };
        prop_assert_eq!(order(&scores), order(&rescaled));
    }

    #[test]
    fn detector_scores_are_bounded_and_monotone(mg in 0.0f64..=1.0, ml in 0.0f64..=1.0, nu in 0.0f64..=1.0, r1 in 0.0f64..2.0, dr in 0.0f64..2.0, h in 0.0f64..=1.0, xi in 0.0f64..=1.0, kappa in 0.0f64..5.0) {
        let s = msssim_score(mg, ml, nu);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(igd_score(r1 + dr, h, xi) >= igd_score(r1, h, xi));
        prop_assert!(igd_score(r1, h, xi) >= 0.0);
        prop_assert!(fanogan_score(r1 + dr, 0.3, kappa) >= fanogan_score(r1, 0.3, kappa));
        prop_assert!(fanogan_score(0.3, r1 + dr, kappa) >= fanogan_score(0.3, r1, kappa));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let (ma, mb) = (mask_from(&a, 8, 8), mask_from(&b, 8, 8));
        let ab = iou(&ma, &mb).unwrap();
        prop_assert_eq!(ab, iou(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, common::pixel_iou(&ma, &mb));
        if a.iter().any(|&v| v) {
            prop_assert_eq!(iou(&ma, &ma).unwrap(), 1.0);
        }
    }

    #[test]
    fn fusing_with_a_constant_map_keeps_the_argmax(values in prop::collection::vec(0.0f32..1.0, 16 * 16), c in -3.0f32..3.0) {
        let g = Heatmap::new(16, 16, values, MapScale::Global).unwrap();
        let l = Heatmap::new(16, 16, vec![c; 256], MapScale::Local).unwrap();
        prop_assert_eq!(combine_maps(&g, &l).unwrap().argmax(), g.argmax());
        prop_assert_eq!(combine_maps(&l, &g).unwrap().argmax(), g.argmax());
    }

    #[test]
    fn connected_components_match_flood_fill(bits in prop::collection::vec(prop::bool::weighted(0.35), 32 * 32), min_area in 0usize..12) {
        let m = mask_from(&bits, 32, 32);
        let (kept, comps) = connected_components(&m, min_area);
        let (oracle_mask, oracle) = common::flood_fill_components(&m, min_area);
        prop_assert_eq!(kept, oracle_mask);
        let got: Vec<_> = comps.iter().map(|c| (c.area, c.bbox)).collect();
        prop_assert_eq!(got, oracle);
    }

    #[test]
    fn augmentations_stay_in_range(pixels in prop::collection::vec(0.0f32..=1.0, 3 * 16 * 16), seed in any::<u64>(), kind in 0usize..4) {
        let im = Image::new(3, 16, 16, pixels);
        let kind = [AugKind::Rotation, AugKind::Permutation, AugKind::Cutout, AugKind::GaussianNoise][kind];
        for d in enumerate_strong(kind, 4, &StrongBase::default(), 16).unwrap() {
            let out = apply_strong(&im, &d, seed).unwrap();
            prop_assert!(out.same_shape(&im));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let weak = apply_weak(&im, &WeakConfig::default(), seed);
        prop_assert!(weak.same_shape(&im));
        prop_assert!(weak.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
