use cpcl_core::augment::{sample_mask, sample_rect, CutMixConfig};
use cpcl_core::dataio::{generate_dataset, partition, DatasetSpec, Fraction};
use cpcl_core::grid::{elementwise_mix, label_mix, BinaryMap, GridTensor, LabelMap, IGNORE};
use cpcl_core::loss::{dynamic_weight, prediction_entropy, unsup_loss};
use cpcl_core::metrics::{overlap_ratio, ConfusionMatrix};
use cpcl_core::network::{confidence_map, softmax_probs};
use cpcl_core::pseudo::{
    agreement_map, build_agreement_matrix, compose_intersection, compose_union, disagreement_indicator,
    label_agreement, label_disagreement_baseline, label_disagreement_cpcl, PseudoLabels, Strategy as LabelStrategy,
};
use proptest::prelude::*;
use rand::SeedableRng;

fn label_map(h: usize, w: usize, c: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..c, h * w).prop_map(move |d| LabelMap::new(h, w, d).unwrap())
}

/// Two label maps of a shared random size plus the class count.
fn label_pair() -> impl Strategy<Value = (usize, LabelMap, LabelMap)> {
    (2usize..=6, 1usize..=8, 1usize..=8).prop_flat_map(|(c, h, w)| {
        (Just(c), label_map(h, w, c as u8), label_map(h, w, c as u8))
    })
}

fn logits(c: usize, h: usize, w: usize) -> impl Strategy<Value = GridTensor> {
    prop::collection::vec(-4.0f64..4.0, c * h * w).prop_map(move |d| GridTensor::new(vec![c, h, w], d).unwrap())
}

fn permuted(y: &LabelMap, perm: &[u8]) -> LabelMap {
    let (h, w) = y.dims();
    LabelMap::new(h, w, y.data().iter().map(|&v| if v == IGNORE { v } else { perm[v as usize] }).collect()).unwrap()
}

fn permutation(c: usize) -> impl Strategy<Value = Vec<u8>> {
    Just((0..c as u8).collect::<Vec<_>>()).prop_shuffle()
}

fn label_pair_and_permutation() -> impl Strategy<Value = ((usize, LabelMap, LabelMap), Vec<u8>)> {
    label_pair().prop_flat_map(|p| {
        let c = p.0;
        (Just(p), permutation(c))
    })
}

proptest! {
    #[test]
    fn mix_of_equal_inputs_is_identity(
        data in prop::collection::vec(0.0f64..1.0, 3 * 5 * 4),
        bits in prop::collection::vec(any::<bool>(), 5 * 4),
    ) {
        let a = GridTensor::new(vec![3, 5, 4], data).unwrap();
        let m = BinaryMap::new(5, 4, bits).unwrap();
        prop_assert_eq!(elementwise_mix(&a, &a, &m).unwrap(), a);
    }

    #[test]
    fn label_mix_matches_one_hot_mix_then_argmax(
        (c, a, b) in label_pair(),
        seed in any::<u64>(),
    ) {
        let (h, w) = a.dims();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<bool> = (0..h * w).map(|_| rand::Rng::gen(&mut rng)).collect();
        let m = BinaryMap::new(h, w, bits).unwrap();
        let one_hot = |y: &LabelMap| {
            let mut d = vec![0.0; c * h * w];
            for (i, &v) in y.data().iter().enumerate() {
                d[v as usize * h * w + i] = 1.0;
            }
            GridTensor::new(vec![c, h, w], d).unwrap()
        };
        let mixed = elementwise_mix(&one_hot(&a), &one_hot(&b), &m).unwrap();
        let got = label_mix(&a, &b, &m).unwrap();
        for i in 0..h * w {
            let k = (0..c).find(|&k| mixed.data()[k * h * w + i] == 1.0).unwrap();
            prop_assert_eq!(got.data()[i] as usize, k);
        }
    }

    #[test]
    fn masks_are_nonempty_and_rectangles_in_bounds(
        h in 4usize..40,
        w in 4usize..40,
        seed in any::<u64>(),
    ) {
        let cfg = CutMixConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(&cfg, h, w, &mut rng).unwrap();
        prop_assert!(mask.count_true() > 0);
        prop_assert_eq!(mask.dims(), (h, w));
        let r = sample_rect(&cfg, h, w, &mut rng);
        prop_assert!(r.height >= 1 && r.width >= 1);
        prop_assert!(r.top + r.height <= h && r.left + r.width <= w);
    }

    #[test]
    fn agreement_and_disagreement_partition_every_pixel((c, y_c, y_p) in label_pair(), seed in any::<u64>()) {
        let (h, w) = y_c.dims();
        let m = build_agreement_matrix(&y_c, &y_p, c).unwrap();
        let ind = disagreement_indicator(&m);
        let l_a = label_agreement(&y_c, &y_p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let conf = |rng: &mut rand_chacha::ChaCha8Rng| {
            GridTensor::new(vec![h, w], (0..h * w).map(|_| rand::Rng::gen_range(rng, 0.2..1.0)).collect()).unwrap()
        };
        let (bc, bp) = (conf(&mut rng), conf(&mut rng));
        let mut all = vec![label_disagreement_cpcl(&y_c, &y_p, &ind).unwrap()];
        for s in LabelStrategy::ALL {
            all.push(label_disagreement_baseline(&y_c, &y_p, &bc, &bp, &ind, s).unwrap());
        }
        for l_d in all {
            for i in 0..h * w {
                let in_a = l_a.labels.data()[i] != IGNORE;
                let in_d = l_d.pseudo.labels.data()[i] != IGNORE;
                prop_assert!(in_a != in_d, "pixel {} in_a={} in_d={}", i, in_a, in_d);
            }
            let union = compose_union(&l_a, &l_d.pseudo).unwrap();
            prop_assert!(!union.labels.has_ignore());
            let inter = compose_intersection(&l_a);
            let agree = agreement_map(&y_c, &y_p).unwrap();
            for i in 0..h * w {
                let expected = if agree.data()[i] { union.labels.data()[i] } else { IGNORE };
                prop_assert_eq!(inter.labels.data()[i], expected);
            }
        }
    }

    #[test]
    fn indicator_is_bounded_and_permutes_with_classes(((c, y_c, y_p), perm) in label_pair_and_permutation()) {
        let ind = disagreement_indicator(&build_agreement_matrix(&y_c, &y_p, c).unwrap());
        for &v in ind.values() {
            prop_assert!((0.0..=2.0).contains(&v));
        }
        let (pc, pp) = (permuted(&y_c, &perm), permuted(&y_p, &perm));
        let ind_p = disagreement_indicator(&build_agreement_matrix(&pc, &pp, c).unwrap());
        for k in 0..c {
            prop_assert_eq!(ind_p.get(perm[k] as usize), ind.get(k));
        }
    }

    #[test]
    fn dynamic_weight_lies_between_one_over_c_and_one(
        (c, lc, lp) in (2usize..=6, 1usize..=6, 1usize..=6)
            .prop_flat_map(|(c, h, w)| (Just(c), logits(c, h, w), logits(c, h, w))),
    ) {
        let (pc, pp) = (softmax_probs(&lc).unwrap(), softmax_probs(&lp).unwrap());
        let (yc, yp) = (
            cpcl_core::network::predict_argmax(&pc).unwrap(),
            cpcl_core::network::predict_argmax(&pp).unwrap(),
        );
        let ind = disagreement_indicator(&build_agreement_matrix(&yc, &yp, c).unwrap());
        let l_d = label_disagreement_cpcl(&yc, &yp, &ind).unwrap();
        let agree = agreement_map(&yc, &yp).unwrap();
        let w = dynamic_weight(&agree, &confidence_map(&pc).unwrap(), &confidence_map(&pp).unwrap(), &l_d.source).unwrap();
        for &v in w.data() {
            prop_assert!(v >= 1.0 / c as f64 - 1e-12 && v <= 1.0 + 1e-12, "{}", v);
        }
    }

    #[test]
    fn unsup_loss_scales_with_weights(
        (lc, lp, y) in (2usize..=4, 1usize..=5, 1usize..=5)
            .prop_flat_map(|(c, h, w)| (logits(c, h, w), logits(c, h, w), label_map(h, w, c as u8))),
        alpha in 0.01f64..10.0,
    ) {
        let (h, w) = y.dims();
        let (pc, pp) = (softmax_probs(&lc).unwrap(), softmax_probs(&lp).unwrap());
        let weights = GridTensor::new(vec![h, w], (0..h * w).map(|i| 0.3 + 0.05 * (i % 7) as f64).collect()).unwrap();
        let labels = PseudoLabels { labels: y, weights: weights.clone() };
        let base = unsup_loss(&labels, &labels, &pc, &pp, &weights).unwrap();
        let mut scaled_w = weights.clone();
        scaled_w.scale(alpha);
        let scaled = unsup_loss(&labels, &labels, &pc, &pp, &scaled_w).unwrap();
        prop_assert!((scaled.value - alpha * base.value).abs() <= 1e-12 * scaled.value.abs().max(1.0));
        let same = unsup_loss(&labels, &labels, &pc, &pc, &GridTensor::filled(&[h, w], 1.0)).unwrap();
        prop_assert_eq!(same.conservative, same.progressive);
    }

    #[test]
    fn softmax_is_shift_invariant_and_entropy_positive_off_one_hot(
        l in (2usize..=5, 1usize..=4, 1usize..=4).prop_flat_map(|(c, h, w)| logits(c, h, w)),
        shift in -50.0f64..50.0,
    ) {
        let p = softmax_probs(&l).unwrap();
        let shifted = GridTensor::new(l.shape().to_vec(), l.data().iter().map(|v| v + shift).collect()).unwrap();
        let q = softmax_probs(&shifted).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for &e in prediction_entropy(&p).unwrap().data() {
            prop_assert!(e > 1e-12);
        }
    }

    #[test]
    fn overlap_is_symmetric_and_bounded((_, a, b) in label_pair()) {
        let ab = overlap_ratio(&a, &b).unwrap();
        prop_assert_eq!(ab, overlap_ratio(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn miou_is_permutation_invariant_and_iou_bounded(((c, gt, pred), perm) in label_pair_and_permutation()) {
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&gt, &pred).unwrap();
        let mut pm = ConfusionMatrix::new(c);
        pm.accumulate(&permuted(&gt, &perm), &permuted(&pred, &perm)).unwrap();
        prop_assert!((cm.miou() - pm.miou()).abs() <= 1e-12);
        for v in cm.iou_per_class().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partition_is_a_disjoint_deterministic_split(
        n in 16usize..48,
        f in prop::sample::select(Fraction::ALL.to_vec()),
        seed in any::<u64>(),
    ) {
        let spec = DatasetSpec { num_samples: n, height: 8, width: 8, ..DatasetSpec::default() };
        let ds = generate_dataset(&spec).unwrap();
        prop_assume!(f.labeled_count(n) >= 1);
        let (l, u) = partition(&ds.samples, f, seed).unwrap();
        prop_assert_eq!(l.len(), n / f.denominator());
        prop_assert_eq!(l.len() + u.len(), n);
        prop_assert!(u.iter().all(|s| s.label.is_none()) && l.iter().all(|s| s.label.is_some()));
        let mut ids: Vec<&str> = l.iter().chain(&u).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(partition(&ds.samples, f, seed).unwrap(), (l, u));
    }
}

#[test]
fn agreement_matrix_matches_double_loop_on_3x3_binary_maps() {
    // 10k of the 2^18 pairs of 3×3 maps with two classes.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let code: u32 = rand::Rng::gen_range(&mut rng, 0..1 << 18);
        let bits = |shift: u32| (0..9).map(|i| ((code >> (shift + i)) & 1) as u8).collect::<Vec<_>>();
        let y_c = LabelMap::new(3, 3, bits(0)).unwrap();
        let y_p = LabelMap::new(3, 3, bits(9)).unwrap();
        let m = build_agreement_matrix(&y_c, &y_p, 2).unwrap();
        let mut expected = [[0u64; 2]; 2];
        for i in 0..9 {
            expected[y_c.data()[i] as usize][y_p.data()[i] as usize] += 1;
        }
        for j in 0..2 {
            for k in 0..2 {
                assert_eq!(m.get(j, k), expected[j][k]);
            }
        }
    }
}
