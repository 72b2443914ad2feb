use affspace::affinity::{affinity_space, asc_value, cosine_affinity, mean_affinity, NeighborhoodSpec};
use affspace::losses::{argmax_labels, pseudo_labels, LabelMap, LossWeights, IGNORE};
use affspace::metrics::ConfusionCounts;
use affspace::ops::softmax_channels;
use affspace::optim::poly_lr;
use affspace::{Tape, Tensor};
use proptest::prelude::*;

fn spec(eight: bool) -> NeighborhoodSpec {
    if eight {
        NeighborhoodSpec::eight()
    } else {
        NeighborhoodSpec::four()
    }
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..3, 2usize..5, 2usize..6, 2usize..6)
}

fn logits() -> impl Strategy<Value = Tensor<f64>> {
    dims().prop_flat_map(|(b, c, h, w)| {
        prop::collection::vec(-6.0f64..6.0, b * c * h * w)
            .prop_map(move |v| Tensor::new(vec![b, c, h, w], v).unwrap())
    })
}

fn probs() -> impl Strategy<Value = Tensor<f64>> {
    logits().prop_map(|l| softmax_channels(&l).unwrap())
}

/// Reorders class channels so that output channel `perm[k]` holds input channel `k`.
fn permute_channels(p: &Tensor<f64>, perm: &[usize], blocks: usize) -> Tensor<f64> {
    let s = p.shape();
    let (b, ch, plane) = (s[0], s[1], s[2] * s[3]);
    let c = ch / blocks;
    let mut out = vec![0.0; p.numel()];
    for n in 0..b {
        for blk in 0..blocks {
            for (k, &to) in perm.iter().enumerate().take(c) {
                let src = (n * ch + blk * c + k) * plane;
                let dst = (n * ch + blk * c + to) * plane;
                out[dst..dst + plane].copy_from_slice(&p.data()[src..src + plane]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

fn with_perm() -> impl Strategy<Value = (Tensor<f64>, Vec<usize>)> {
    probs().prop_flat_map(|p| {
        let c = p.shape()[1];
        (Just(p), Just((0..c).collect::<Vec<_>>()).prop_shuffle())
    })
}

fn label_pairs(c: u8) -> impl Strategy<Value = Vec<(LabelMap, LabelMap)>> {
    let cell = prop_oneof![9 => 0..c, 1 => Just(IGNORE)];
    prop::collection::vec(
        (prop::collection::vec(0..c, 16), prop::collection::vec(cell, 16)),
        1..6,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(p, g)| (LabelMap::new(4, 4, p).unwrap(), LabelMap::new(4, 4, g).unwrap()))
            .collect()
    })
}

fn counts(pairs: &[(LabelMap, LabelMap)], c: usize) -> ConfusionCounts {
    let mut acc = ConfusionCounts::new(c);
    for (p, g) in pairs {
        acc.accumulate(p, g).unwrap();
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(l in logits(), shift in -40.0f64..40.0) {
        let l = l.map(|v| 8.0 * v + shift);
        let p = softmax_channels(&l).unwrap();
        let s = p.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        for n in 0..s[0] {
            for q in 0..plane {
                let sum: f64 = (0..c).map(|k| p.data()[(n * c + k) * plane + q]).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn asc_is_complement_of_mean_affinity(p in probs(), eight in any::<bool>()) {
        let sp = spec(eight);
        let asc = asc_value(&p, &sp).unwrap();
        prop_assert!((0.0..=1.0).contains(&asc));
        prop_assert!((asc + mean_affinity(&p, &sp).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn interior_neighbor_counts(p in probs(), eight in any::<bool>()) {
        let sp = spec(eight);
        for map in cosine_affinity(&p, &sp).unwrap() {
            let (h, w) = (map.height(), map.width());
            prop_assert!(map.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    prop_assert_eq!(map.valid_count[y * w + x] as usize, sp.len());
                }
            }
            prop_assert_eq!(map.valid_count[0] as usize, if eight { 3 } else { 2 });
        }
    }

    #[test]
    fn class_permutation_invariance((p, perm) in with_perm(), eight in any::<bool>()) {
        let sp = spec(eight);
        let q = permute_channels(&p, &perm, 1);
        prop_assert!((asc_value(&p, &sp).unwrap() - asc_value(&q, &sp).unwrap()).abs() <= 1e-12);
        prop_assert!((mean_affinity(&p, &sp).unwrap() - mean_affinity(&q, &sp).unwrap()).abs() <= 1e-12);

        let a = affinity_space(&p, &sp).unwrap();
        let aq = affinity_space(&q, &sp).unwrap();
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(a.shape()[1], sp.len() * p.shape()[1]);
        let expected = permute_channels(&a, &perm, sp.len());
        prop_assert!(expected.max_abs_diff(&aq) <= 1e-12);
    }

    #[test]
    fn argmax_follows_channel_relabeling((p, perm) in with_perm(), thr in 0.3f64..0.95) {
        let q = permute_channels(&p, &perm, 1);
        for (a, b) in argmax_labels(&p).unwrap().iter().zip(argmax_labels(&q).unwrap()) {
            for (&x, &y) in a.values().iter().zip(b.values()) {
                prop_assert_eq!(perm[x as usize] as u8, y);
            }
        }
        for (a, b) in pseudo_labels(&p, thr).unwrap().iter().zip(pseudo_labels(&q, thr).unwrap()) {
            for (&x, &y) in a.values().iter().zip(b.values()) {
                let mapped = if x == IGNORE { IGNORE } else { perm[x as usize] as u8 };
                prop_assert_eq!(mapped, y);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_root(p in probs(), eight in any::<bool>()) {
        let sp = spec(eight);
        let build = |tape: &mut Tape<f64>| {
            let x = tape.leaf(p.clone());
            let asc = tape.asc_loss(x, &sp).unwrap();
            let a = tape.build_affinity_space(x, &sp).unwrap();
            let sum = tape.sum_all(a);
            (x, asc, sum)
        };
        let mut tape = Tape::new();
        let (x, asc, sum) = build(&mut tape);
        let both = tape.add(asc, sum).unwrap();
        let joint = tape.backward(both).unwrap().get(x);
        let g1 = tape.backward(asc).unwrap().get(x);
        let g2 = tape.backward(sum).unwrap().get(x);
        let sep = Tensor::new(g1.shape().to_vec(), g1.data().iter().zip(g2.data()).map(|(a, b)| a + b).collect()).unwrap();
        let scale = 1.0 + sep.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(joint.max_abs_diff(&sep) <= 1e-12 * scale);
    }

    #[test]
    fn restricted_backward_matches_full(x in logits(), y in logits()) {
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let b = tape.leaf(x.map(|v| v * 0.5 + 0.1));
        let other = tape.leaf(y.clone());
        let pa = tape.softmax_channels(a).unwrap();
        let pb = tape.mul(pa, b).unwrap();
        let e = tape.exp(other);
        let s1 = tape.sum_all(pb);
        let s2 = tape.mean_all(e);
        let root = tape.add(s1, s2).unwrap();
        let full = tape.backward(root).unwrap();
        let part = tape.backward_wrt(root, &[a]).unwrap();
        prop_assert_eq!(full.get(a), part.get(a));
        prop_assert!(!part.reached(b) && !part.reached(other));
        prop_assert!(part.get(other).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_scales_regularizers_linearly(
        ps in probs(),
        lambda in 1e-4f64..1.0,
        k in 0.1f64..50.0,
    ) {
        let s = ps.shape().to_vec();
        let pt = softmax_channels(&ps.map(|v| (v * 7.0).sin())).unwrap();
        let labels = argmax_labels(&ps).unwrap();
        let sp = NeighborhoodSpec::eight();
        let reg = |l: f64| {
            let mut tape = Tape::new();
            let a = tape.constant(ps.clone());
            let b = tape.constant(pt.clone());
            let w = LossWeights { lambda_asc: l, lambda_asa: l };
            let t = tape.asc_objective(a, &labels, b, &w, &sp).unwrap();
            let total = tape.value(t.total).item();
            prop_assert!(total.is_finite() && total >= 0.0);
            Ok(total - tape.value(t.seg).item())
        };
        let base = reg(lambda)?;
        let scaled = reg(k * lambda)?;
        prop_assert!((scaled - k * base).abs() <= 1e-9 * (1.0 + scaled.abs()), "{:?}", s);
    }

    #[test]
    fn iou_never_exceeds_dsc(pairs in label_pairs(5)) {
        let acc = counts(&pairs, 5);
        for c in 0..5 {
            match (acc.iou(c), acc.dsc(c)) {
                (Some(i), Some(d)) => {
                    prop_assert!(i <= d + 1e-15);
                    prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
                    if i > 0.0 && i < 1.0 {
                        prop_assert!(i < d);
                    }
                }
                (None, None) => {}
                _ => prop_assert!(false, "iou and dsc disagree on absence"),
            }
        }
        let valid: u64 = acc.total - acc.ignored;
        prop_assert!(acc.tp.iter().sum::<u64>() + acc.ignored <= acc.total);
        prop_assert_eq!(acc.tp.iter().sum::<u64>() + acc.fn_.iter().sum::<u64>(), valid);
    }

    #[test]
    fn confusion_counts_ignore_order(
        (pairs, order) in label_pairs(4).prop_flat_map(|v| {
            let n = v.len();
            (Just(v), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let shuffled: Vec<_> = order.iter().map(|&i| pairs[i].clone()).collect();
        prop_assert_eq!(counts(&pairs, 4), counts(&shuffled, 4));

        let (head, tail) = pairs.split_at(pairs.len() / 2);
        let mut merged = counts(head, 4);
        merged.merge(&counts(tail, 4)).unwrap();
        prop_assert_eq!(merged, counts(&pairs, 4));
    }

    #[test]
    fn poly_lr_strictly_decreases(total in 2usize..5000, power in 0.1f64..3.0, base in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        let step = (total / 50).max(1);
        for it in (0..total).step_by(step) {
            let lr = poly_lr(base, it, total, power).unwrap();
            prop_assert!(lr < prev);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(base, 0, total, power).unwrap(), base);
    }
}
