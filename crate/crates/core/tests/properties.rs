use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resgcn::attention::PartAtt;
use resgcn::blocks::spatial_gcn;
use resgcn::graph::{build_adjacency, graph_distances};
use resgcn::nn::Ctx;
use resgcn::param::ParamStore;
use resgcn::preprocess::{bone_angles, build_branches};
use resgcn::skeleton::pad_or_crop;
use resgcn::train::{evaluate_logits, lr_at_epoch, TrainConfig};
use resgcn::{build_model, parse_structure, Mode, ModelSpec, SkeletonGraph, SkeletonSequence, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_sequence(frames: usize, seed: u64) -> SkeletonSequence {
    let mut r = rng(seed);
    let coords = Tensor::uniform(&[3, frames, 25, 2], -1.0, 1.0, &mut r);
    SkeletonSequence::new(coords, frames, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_is_shift_invariant(seed in any::<u64>(), c in -50.0f64..50.0) {
        let x = Tensor::uniform(&[3, 4, 5], -3.0, 3.0, &mut rng(seed));
        let mut tape = Tape::inference();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + c));
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-9);
    }

    #[test]
    fn concat_then_narrow_is_exact(seed in any::<u64>(), widths in prop::collection::vec(1usize..4, 1..4), axis in 0usize..3) {
        let mut r = rng(seed);
        let parts: Vec<Tensor> = widths
            .iter()
            .map(|&w| {
                let mut s = [2, 3, 2];
                s[axis] = w;
                Tensor::randn(&s, 1.0, &mut r)
            })
            .collect();
        let mut tape = Tape::inference();
        let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let joined = tape.concat(&vars, axis).unwrap();
        let mut start = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let back = tape.narrow(joined, axis, start, w).unwrap();
            prop_assert_eq!(tape.value(back), p);
            start += w;
        }
    }

    #[test]
    fn pad_or_crop_is_idempotent(frames in 1usize..12, target in 1usize..12, seed in any::<u64>()) {
        let s = pad_or_crop(&random_sequence(frames, seed), target).unwrap();
        prop_assert_eq!(s.frames(), target);
        prop_assert_eq!(pad_or_crop(&s, target).unwrap(), s);
    }

    #[test]
    fn translation_leaves_relative_channels(seed in any::<u64>(), dx in -5.0f64..5.0, dy in -5.0f64..5.0, dz in -5.0f64..5.0) {
        let g = SkeletonGraph::ntu25();
        let x = random_sequence(6, seed);
        let shifted = x.map_joints(|p| [p[0] + dx, p[1] + dy, p[2] + dz]);
        let (a, b) = (build_branches(&x, &g).unwrap(), build_branches(&shifted, &g).unwrap());
        for c in 3..6 {
            prop_assert!(a.joint.features.narrow(0, c, 1).unwrap().max_abs_diff(&b.joint.features.narrow(0, c, 1).unwrap()) < 1e-9);
        }
        prop_assert!(a.velocity.features.max_abs_diff(&b.velocity.features) < 1e-9);
        prop_assert!(a.bone.features.max_abs_diff(&b.bone.features) < 1e-9);
    }

    #[test]
    fn scaling_scales_lengths_and_keeps_angles(seed in any::<u64>(), s in 0.1f64..10.0) {
        let g = SkeletonGraph::ntu25();
        let x = random_sequence(6, seed);
        let y = x.map_joints(|p| [s * p[0], s * p[1], s * p[2]]);
        let (a, b) = (build_branches(&x, &g).unwrap(), build_branches(&y, &g).unwrap());
        prop_assert!(a.joint.features.map(|v| s * v).max_abs_diff(&b.joint.features) < 1e-9);
        prop_assert!(a.velocity.features.map(|v| s * v).max_abs_diff(&b.velocity.features) < 1e-9);
        let (la, lb) = (a.bone.features.narrow(0, 0, 3).unwrap(), b.bone.features.narrow(0, 0, 3).unwrap());
        prop_assert!(la.map(|v| s * v).max_abs_diff(&lb) < 1e-9);
        let (aa, ab) = (a.bone.features.narrow(0, 3, 3).unwrap(), b.bone.features.narrow(0, 3, 3).unwrap());
        prop_assert!(aa.max_abs_diff(&ab) < 1e-9);
    }

    #[test]
    fn direction_cosines_square_sum_to_one(x in -10.0f64..10.0, y in -10.0f64..10.0, z in -10.0f64..10.0) {
        prop_assume!(x * x + y * y + z * z > 1e-12);
        let s: f64 = bone_angles([x, y, z]).iter().map(|a| a.cos().powi(2)).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adjacency_ignores_edge_order(seed in any::<u64>(), d in 1usize..4) {
        use rand::seq::SliceRandom;
        let g = SkeletonGraph::ntu25();
        let mut edges = g.edges.clone();
        edges.shuffle(&mut rng(seed));
        let edges: Vec<_> = edges.into_iter().map(|(a, b)| if seed % 2 == 0 { (b, a) } else { (a, b) }).collect();
        prop_assert_eq!(build_adjacency(&edges, 25, d).unwrap(), build_adjacency(&g.edges, 25, d).unwrap());
    }

    #[test]
    fn normalized_hop_one_has_spectral_radius_at_most_one(seed in any::<u64>()) {
        // Rayleigh quotients of a symmetric matrix span its eigenvalue range
        let g = SkeletonGraph::ntu25();
        let a = &build_adjacency(&g.edges, 25, 2).unwrap().normalized[1];
        let x = Tensor::randn(&[25], 1.0, &mut rng(seed));
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..25 {
            den += x.data()[i] * x.data()[i];
            for j in 0..25 {
                num += x.data()[i] * a.at(&[i, j]) * x.data()[j];
            }
        }
        prop_assert!((num / den).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn spatial_gcn_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let g = SkeletonGraph::ntu25();
        let adj = build_adjacency(&g.edges, 25, 2).unwrap();
        let mut r = rng(seed);
        let x = Tensor::randn(&[2, 3, 4, 25], 1.0, &mut r);
        let y = Tensor::randn(&[2, 3, 4, 25], 1.0, &mut r);
        let ws: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[5, 3], 1.0, &mut r)).collect();
        let run = |input: Tensor| {
            let mut tape = Tape::inference();
            let xv = tape.constant(input);
            let wv: Vec<_> = ws.iter().map(|w| tape.constant(w.clone())).collect();
            let av: Vec<_> = adj.normalized.iter().map(|a| tape.constant(a.clone())).collect();
            let out = spatial_gcn(&mut tape, xv, &wv, &av).unwrap();
            tape.value(out).clone()
        };
        let combo = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        let (fx, fy) = (run(x), run(y));
        let expect = Tensor::new(
            fx.shape().to_vec(),
            fx.data().iter().zip(fy.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        prop_assert!(run(combo).max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn spatial_gcn_reaches_two_hops_only(seed in any::<u64>(), joint in 0usize..25, frame in 0usize..4) {
        let g = SkeletonGraph::ntu25();
        let adj = build_adjacency(&g.edges, 25, 2).unwrap();
        let dist = graph_distances(&g.edges, 25).unwrap();
        let mut r = rng(seed);
        let x = Tensor::randn(&[1, 2, 4, 25], 1.0, &mut r);
        let ws: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[3, 2], 1.0, &mut r)).collect();
        let run = |input: Tensor| {
            let mut tape = Tape::inference();
            let xv = tape.constant(input);
            let wv: Vec<_> = ws.iter().map(|w| tape.constant(w.clone())).collect();
            let av: Vec<_> = adj.normalized.iter().map(|a| tape.constant(a.clone())).collect();
            let out = spatial_gcn(&mut tape, xv, &wv, &av).unwrap();
            tape.value(out).clone()
        };
        let mut bumped = x.clone();
        for c in 0..2 {
            let v = bumped.at(&[0, c, frame, joint]);
            bumped.set(&[0, c, frame, joint], v + 1.0);
        }
        let (a, b) = (run(x), run(bumped));
        for c in 0..3 {
            for t in 0..4 {
                for v in 0..25 {
                    if t != frame || dist[joint][v] > 2 {
                        prop_assert_eq!(a.at(&[0, c, t, v]), b.at(&[0, c, t, v]));
                    }
                }
            }
        }
    }

    #[test]
    fn part_attention_normalizes_and_shares_within_parts(seed in any::<u64>()) {
        let g = SkeletonGraph::ntu25();
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let att = PartAtt::register(&mut store, "att", 8, 4, g.part_of(), &mut r).unwrap();
        let x = Tensor::uniform(&[3, 8, 5, 25], 0.5, 2.0, &mut r);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
        let xv = ctx.tape.constant(x.clone());
        let w = att.weights(&mut ctx, xv).unwrap();
        let out = att.forward(&mut ctx, xv).unwrap();
        let w = ctx.tape.value(w).clone();
        let out = ctx.tape.value(out).clone();
        for n in 0..3 {
            for c in 0..8 {
                let s: f64 = (0..5).map(|p| w.at(&[n, c, p])).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                for v in 0..25 {
                    let expect = w.at(&[n, c, g.part_of()[v]]);
                    for t in 0..5 {
                        let ratio = out.at(&[n, c, t, v]) / x.at(&[n, c, t, v]);
                        prop_assert!((ratio - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn learning_rate_is_piecewise_constant_after_warmup(
        warmup in 0usize..6,
        gap in 1usize..10,
        gap2 in 1usize..10,
        tail in 1usize..10,
        base in 0.001f64..1.0,
    ) {
        let first = warmup + gap;
        let cfg = TrainConfig {
            base_lr: base,
            warmup_epochs: warmup,
            decay_epochs: vec![first, first + gap2],
            max_epochs: first + gap2 + tail,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..cfg.max_epochs).map(|e| lr_at_epoch(e, &cfg).unwrap()).collect();
        prop_assert!(lrs.iter().all(|&l| l > 0.0));
        for e in warmup.max(1)..cfg.max_epochs {
            if cfg.decay_epochs.contains(&e) {
                prop_assert!(lrs[e] < lrs[e - 1]);
            } else {
                prop_assert_eq!(lrs[e], lrs[e - 1]);
            }
        }
        prop_assert!(lr_at_epoch(cfg.max_epochs, &cfg).is_err());
    }

    #[test]
    fn confusion_rows_sum_to_class_counts(seed in any::<u64>(), labels in prop::collection::vec(0usize..4, 1..30)) {
        let logits = Tensor::randn(&[labels.len(), 4], 1.0, &mut rng(seed));
        let e = evaluate_logits(&logits, &labels).unwrap();
        for k in 0..4 {
            let count = labels.iter().filter(|&&l| l == k).count();
            prop_assert_eq!(e.confusion[k].iter().sum::<usize>(), count);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn parameter_counts_do_not_depend_on_seed(a in any::<u64>(), b in any::<u64>(), attention in any::<bool>(), r in prop::sample::select(vec![1usize, 2, 4])) {
        let g = SkeletonGraph::ntu25();
        let spec = ModelSpec {
            structure: parse_structure("[B1,N1,N1,N1]").unwrap(),
            channel_plan: vec![8, 8, 16, 32],
            num_classes: 5,
            with_part_attention: attention,
            reduction: r,
            ..Default::default()
        };
        let (ma, mb) = (build_model(&spec, &g, a).unwrap(), build_model(&spec, &g, b).unwrap());
        prop_assert_eq!(ma.count_params(), mb.count_params());
    }
}
