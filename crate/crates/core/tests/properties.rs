use mkfusion_core::data::{
    compute_visual_centers, derive_knowledge_datasets, generate_synthetic, Level, SampleAccess, SyntheticSpec,
};
use mkfusion_core::eval::{ausuc, classify_top1, harmonic_mean, ClassPrototypes, CurvePoint, SeenUnseenCurve};
use mkfusion_core::model::{loss_kr, FusionWeights};
use mkfusion_core::nfg::{classify_stability, crossover, mutate, Selection, Thresholds};
use mkfusion_core::optim::AdamState;
use mkfusion_core::tensor::{clip_weights, softmax};
use mkfusion_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, len)
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        families: 2,
        genera_per_family: 2,
        species_per_genus: 3,
        samples_per_species: 4,
        visual_dim: 5,
        semantic_dim: 4,
        latent_per_level: 2,
        unseen_fraction: 0.25,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(xs in vec_strategy(7)) {
        let p = softmax(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss(a in vec_strategy(6), b in vec_strategy(6)) {
        let x = Tensor::parameter(vec![2, 3], a).unwrap();
        let w = Tensor::new(vec![2, 3], b).unwrap();
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let xv = g.param(&x).unwrap();
            let wv = g.constant(&w).unwrap();
            let p = g.mul(xv, wv).unwrap();
            let l1 = g.sum(p).unwrap();
            let sq = g.square(xv).unwrap();
            let l2 = g.mean(sq).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(xv).unwrap().to_vec()
        };
        let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            prop_assert!((g1[i] + g2[i] - g12[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_with_zero_grads_is_identity(a in vec_strategy(5), lr in 1e-5..1.0f64) {
        let mut p = Tensor::parameter(vec![1, 5], a.clone()).unwrap();
        p.accumulate_grad(&[0.0; 5]).unwrap();
        let mut adam = AdamState::new(lr);
        adam.step(&mut [&mut p]).unwrap();
        prop_assert_eq!(p.data(), a.as_slice());
    }

    #[test]
    fn clipping_bounds_weights(a in vec_strategy(9), c in 1e-3..1.0f64) {
        let mut p = Tensor::new(vec![3, 3], a).unwrap();
        clip_weights([&mut p], c);
        prop_assert!(p.max_abs() <= c);
    }

    #[test]
    fn fusion_scores_scale_invariant(s in prop::array::uniform3(1e-3..1.0f64), k in 1e-3..1e3f64) {
        let a = FusionWeights::from_scores(s).as_array();
        let b = FusionWeights::from_scores([s[0] * k, s[1] * k, s[2] * k]).as_array();
        for i in 0..3 {
            prop_assert!((a[i] - b[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn kr_is_zero_iff_rows_match_centers(c in vec_strategy(6), shift in -1.0..1.0f64) {
        let centers = Tensor::new(vec![2, 3], c.clone()).unwrap();
        let mut g = Graph::new();
        let same = g.constant(&centers).unwrap();
        let l = loss_kr(&mut g, same, &centers).unwrap();
        prop_assert_eq!(g.value(l).item().unwrap(), 0.0);
        let moved: Vec<f64> = c.iter().enumerate().map(|(i, v)| if i == 0 { v + shift } else { *v }).collect();
        let moved = g.constant(&Tensor::new(vec![2, 3], moved).unwrap()).unwrap();
        let l = loss_kr(&mut g, moved, &centers).unwrap();
        prop_assert_eq!(g.value(l).item().unwrap() == 0.0, shift == 0.0);
    }

    #[test]
    fn crossover_is_closed_and_mutation_local(a in vec_strategy(12), b in vec_strategy(12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = crossover(&a, &b, &mut rng).unwrap();
        prop_assert!(c.iter().enumerate().all(|(p, &v)| v == a[p] || v == b[p]));
        let m = mutate(&a, &mut rng);
        prop_assert_eq!(m.len(), a.len());
    }

    #[test]
    fn selection_is_a_trichotomy(d in -1.0..1.0f64, k2 in -1.0..0.9f64, gap in 1e-6..1.0f64) {
        let k1 = (k2 + gap).min(1.0);
        prop_assume!(k1 > k2);
        let th = Thresholds::new(k1, k2).unwrap();
        let sel = classify_stability(d, th);
        let expect = if d > k1 { Selection::Enhanced } else if d < k2 { Selection::Novel } else { Selection::Discarded };
        prop_assert_eq!(sel, expect);
    }

    #[test]
    fn harmonic_mean_bounds(s in 0.0..1.0f64, u in 0.0..1.0f64) {
        let h = harmonic_mean(s, u);
        prop_assert_eq!(h, harmonic_mean(u, s));
        prop_assert!(h <= 2.0 * s.min(u) + 1e-15);
        prop_assert!(h <= s.max(u) + 1e-15);
    }

    #[test]
    fn classification_ignores_positive_scale(x in vec_strategy(4), k in 1e-3..1e3f64, seed in any::<u64>()) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos = ClassPrototypes {
            n_syn: 1,
            prototypes: (0..5).map(|c| (c, (0..4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())).collect(),
        };
        let scaled: Vec<f64> = x.iter().map(|v| v * k).collect();
        prop_assert_eq!(classify_top1(&protos, &x).unwrap(), classify_top1(&protos, &scaled).unwrap());
    }

    #[test]
    fn ausuc_bounded_and_dominated_points_do_not_add_area(
        cuts in prop::collection::vec(0.0..1.0f64, 1..8),
        pick in 0usize..8,
        shrink in prop::array::uniform2(0.0..1.0f64),
    ) {
        // A monotone curve: S falls while U rises, as calibrated stacking produces.
        let mut s: Vec<f64> = cuts.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        let n = s.len() + 2;
        let mut pts = vec![CurvePoint { gamma: 0.0, seen: 1.0, unseen: 0.0 }];
        for (i, &si) in s.iter().enumerate() {
            pts.push(CurvePoint { gamma: (i + 1) as f64, seen: si, unseen: (i + 1) as f64 / n as f64 });
        }
        pts.push(CurvePoint { gamma: n as f64, seen: 0.0, unseen: 1.0 });
        let curve = SeenUnseenCurve { points: pts.clone() };
        let area = ausuc(&curve).unwrap();
        prop_assert!((0.0..=1.0).contains(&area));
        let base = pts[pick % pts.len()];
        let mut with = pts;
        with.push(CurvePoint { gamma: -1.0, seen: base.seen * shrink[0], unseen: base.unseen * shrink[1] });
        let area2 = ausuc(&SeenUnseenCurve { points: with }).unwrap();
        prop_assert!(area2 <= area + 1e-12);
    }

    #[test]
    fn knowledge_datasets_partition_seen_samples(seed in 0u64..500) {
        let b = generate_synthetic(&tiny_spec(), seed).unwrap();
        let seen_n = b.seen_sample_ids().len();
        let ds = derive_knowledge_datasets(&b).unwrap();
        for level in Level::ALL {
            let d = ds.get(level);
            prop_assert_eq!(d.entries.len(), seen_n);
            let mut fibers: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (i, e) in d.entries.iter().enumerate() {
                fibers.entry(e.class_id).or_default().push(i);
            }
            // Surjective onto the level's classes; fibers partition the entries.
            prop_assert_eq!(fibers.keys().copied().collect::<Vec<_>>(), d.class_ids.clone());
            prop_assert_eq!(fibers.values().map(Vec::len).sum::<usize>(), seen_n);
            let centers = compute_visual_centers(d).unwrap();
            for (class, ids) in &fibers {
                let c = centers.get(*class).unwrap();
                for (j, cj) in c.iter().enumerate() {
                    let mean = ids.iter().map(|&i| d.entries[i].visual[j]).sum::<f64>() / ids.len() as f64;
                    prop_assert!((cj - mean).abs() <= 1e-12);
                }
            }
        }
        let seen: std::collections::BTreeSet<_> = b.splits.seen.iter().collect();
        prop_assert!(b.splits.unseen.iter().all(|u| !seen.contains(u)));
        prop_assert_eq!(generate_synthetic(&tiny_spec(), seed).unwrap(), b);
    }
}
