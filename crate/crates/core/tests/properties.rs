//! Randomized structural invariants: transform validity and determinism,
//! sampler constraints, relabeling symmetry of the forward pass, aggregation
//! algebra, and dataset serialization round trips.

use gmetro_core::graph::{pool, validate_graph, Graph, NodeMasks, PoolMode, TaskKind};
use gmetro_core::model::{
    AggregationMode, ExpertMode, ExpertOutputs, GatingOutput, MoEConfig, MoEModel,
};
use gmetro_core::nn::layers::EncoderConfig;
use gmetro_core::nn::Activation;
use gmetro_core::seed::stream_rng;
use gmetro_core::transforms::{
    apply_traced, CompositeTransform, TransformKind, TransformSet, TransformSpec,
    EXCLUDED_PAIRS,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALL_KINDS: [TransformKind; 11] = [
    TransformKind::MaskNodeFeat,
    TransformKind::NoisyNodeFeat,
    TransformKind::NodeFeatShift,
    TransformKind::MaskEdgeFeat,
    TransformKind::NoisyEdgeFeat,
    TransformKind::EdgeFeatShift,
    TransformKind::AddEdge,
    TransformKind::DropEdge,
    TransformKind::DropNode,
    TransformKind::DropPath,
    TransformKind::RandomSubgraph,
];

fn excluded(a: TransformKind, b: TransformKind) -> bool {
    EXCLUDED_PAIRS
        .iter()
        .any(|&(x, y)| (a == x && b == y) || (a == y && b == x))
}

/// Node count, reciprocal edge list, node features, edge features.
#[derive(Debug, Clone)]
struct RawGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<f64>,
    dim: usize,
    edge_features: Vec<f64>,
}

impl RawGraph {
    fn build(&self) -> Graph {
        let features =
            Array2::from_shape_vec((self.n, self.dim), self.features.clone()).unwrap();
        let mut g = Graph::new(features, self.edges.clone(), false);
        g.edge_features = Some(
            Array2::from_shape_vec((self.edges.len(), 1), self.edge_features.clone()).unwrap(),
        );
        g.checked().unwrap()
    }
}

/// Connected-enough random undirected graph with reciprocal edge pairs and
/// one edge feature column. Pair (0, 1) is always present so every graph has
/// at least one edge.
fn raw_graph(max_nodes: usize) -> impl Strategy<Value = RawGraph> {
    (2usize..=max_nodes, 1usize..=3).prop_flat_map(|(n, dim)| {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        let num_pairs = pairs.len();
        (
            Just(n),
            Just(dim),
            prop::collection::vec(prop::bool::weighted(0.4), num_pairs),
            prop::collection::vec(-1.0f64..1.0, n * dim),
        )
            .prop_flat_map(move |(n, dim, mask, features)| {
                let mut edges = vec![(0, 1), (1, 0)];
                for (&(i, j), &keep) in pairs.iter().zip(&mask) {
                    if keep && (i, j) != (0, 1) {
                        edges.push((i, j));
                        edges.push((j, i));
                    }
                }
                let e = edges.len();
                (
                    Just(n),
                    Just(dim),
                    Just(edges),
                    Just(features),
                    prop::collection::vec(-1.0f64..1.0, e),
                )
            })
            .prop_map(|(n, dim, edges, features, edge_features)| RawGraph {
                n,
                edges,
                features,
                dim,
                edge_features,
            })
    })
}

fn toy_config(task_kind: TaskKind, feature_dim: usize) -> MoEConfig {
    MoEConfig {
        task_kind,
        feature_dim,
        num_classes: 3,
        encoder: EncoderConfig {
            layers: 2,
            hidden_dim: 4,
            activation: Activation::Elu,
            dropout: 0.0,
        },
        expert_mode: ExpertMode::IndependentEncoders,
        aggregation: AggregationMode::SoftmaxSum,
        pooling: PoolMode::Add,
    }
}

/// Relabel nodes: `order[k]` is the old index placed at new position `k`.
/// Edge list positions are preserved (endpoints rewritten in place), so the
/// per-node message accumulation order is unchanged.
fn relabel(g: &Graph, order: &[usize]) -> Graph {
    let n = g.num_nodes();
    let mut pos = vec![0usize; n];
    for (k, &old) in order.iter().enumerate() {
        pos[old] = k;
    }
    let features = Array2::from_shape_fn((n, g.feature_dim()), |(k, j)| {
        g.node_features[(order[k], j)]
    });
    let edges: Vec<(usize, usize)> = g
        .edge_index
        .iter()
        .map(|&(s, d)| (pos[s], pos[d]))
        .collect();
    let mut out = Graph::new(features, edges, g.directed);
    out.edge_features = g.edge_features.clone();
    out.node_labels = g
        .node_labels
        .as_ref()
        .map(|l| order.iter().map(|&old| l[old]).collect());
    out.graph_label = g.graph_label;
    out.node_masks = g.node_masks.as_ref().map(|m| NodeMasks {
        train: order.iter().map(|&old| m.train[old]).collect(),
        val: order.iter().map(|&old| m.val[old]).collect(),
        test: order.iter().map(|&old| m.test[old]).collect(),
    });
    out
}

fn bits(a: &Array2<f64>) -> Vec<u64> {
    a.iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn every_transform_yields_a_valid_graph_deterministically(
        raw in raw_graph(9),
        kind_idx in 0usize..11,
        seed in any::<u64>(),
    ) {
        let g = raw.build();
        let spec = TransformSpec::with_defaults(ALL_KINDS[kind_idx]);
        let c = CompositeTransform::single(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = apply_traced(&g, &c, &mut rng, None).unwrap();
        let problems = validate_graph(&out.graph);
        prop_assert!(problems.is_empty(), "{problems:?}");
        prop_assert!(out.graph.num_nodes() >= 1);
        // Origins point at surviving input nodes, in strictly increasing
        // order for the node-removing kinds (they never reorder survivors).
        for &o in &out.node_origin {
            prop_assert!(o < g.num_nodes());
        }

        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        let again = apply_traced(&g, &c, &mut rng2, None).unwrap();
        prop_assert_eq!(&again.graph, &out.graph);
        prop_assert_eq!(&again.node_origin, &out.node_origin);
    }

    #[test]
    fn anchored_transforms_keep_the_anchor_alive(
        raw in raw_graph(9),
        kind_idx in 0usize..11,
        seed in any::<u64>(),
        anchor_pick in any::<prop::sample::Index>(),
    ) {
        let g = raw.build();
        let anchor = anchor_pick.index(g.num_nodes());
        let spec = TransformSpec::with_defaults(ALL_KINDS[kind_idx]);
        let c = CompositeTransform::single(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = apply_traced(&g, &c, &mut rng, Some(anchor)).unwrap();
        prop_assert!(
            out.node_origin.contains(&anchor),
            "anchor {anchor} dropped by {:?}",
            ALL_KINDS[kind_idx]
        );
    }

    #[test]
    fn sampled_composites_respect_size_membership_and_exclusions(
        subset_mask in prop::collection::vec(any::<bool>(), 11),
        max_size in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let kinds: Vec<TransformKind> = ALL_KINDS
            .iter()
            .zip(&subset_mask)
            .filter_map(|(&k, &keep)| keep.then_some(k))
            .collect();
        prop_assume!(!kinds.is_empty());
        let set = TransformSet::from_kinds(&kinds).unwrap();
        // The size bound must stay within the set; that contract is enforced
        // upstream when the sampler is built.
        let max_size = max_size.min(kinds.len());
        let mut rng = stream_rng(seed, "tau", &[0]);
        for _ in 0..32 {
            let c = set.sample_composite(max_size, &mut rng).unwrap();
            let drawn = c.kinds();
            prop_assert!(!drawn.is_empty() && drawn.len() <= max_size);
            for k in &drawn {
                prop_assert!(kinds.contains(k), "{k:?} outside the active set");
            }
            for a in 0..drawn.len() {
                for b in (a + 1)..drawn.len() {
                    prop_assert!(drawn[a] != drawn[b], "duplicate kind in composite");
                    prop_assert!(
                        !excluded(drawn[a], drawn[b]),
                        "excluded pair {:?}/{:?} sampled",
                        drawn[a],
                        drawn[b]
                    );
                }
            }
        }
    }

    #[test]
    fn mixture_labels_mark_exactly_the_applied_components(
        subset_mask in prop::collection::vec(any::<bool>(), 11),
        pick in prop::collection::vec(any::<prop::sample::Index>(), 0..=2),
    ) {
        let kinds: Vec<TransformKind> = ALL_KINDS
            .iter()
            .zip(&subset_mask)
            .filter_map(|(&k, &keep)| keep.then_some(k))
            .collect();
        prop_assume!(kinds.len() >= 2);
        let set = TransformSet::from_kinds(&kinds).unwrap();
        let mut chosen: Vec<usize> = pick.iter().map(|p| p.index(kinds.len())).collect();
        chosen.sort_unstable();
        chosen.dedup();
        let composite = CompositeTransform {
            specs: chosen
                .iter()
                .map(|&i| TransformSpec::with_defaults(kinds[i]))
                .collect(),
        };
        let label = set.mixture_label(&composite).unwrap();
        prop_assert_eq!(label.len(), kinds.len() + 1);
        prop_assert_eq!(label.bits[0], chosen.is_empty(), "identity bit");
        for (i, _) in kinds.iter().enumerate() {
            prop_assert_eq!(
                label.bits[i + 1],
                chosen.contains(&i),
                "component bit {}", i + 1
            );
        }
    }

    #[test]
    fn environment_count_matches_the_pair_exclusion_rule(
        subset_mask in prop::collection::vec(any::<bool>(), 11),
    ) {
        let kinds: Vec<TransformKind> = ALL_KINDS
            .iter()
            .zip(&subset_mask)
            .filter_map(|(&k, &keep)| keep.then_some(k))
            .collect();
        prop_assume!(!kinds.is_empty());
        let set = TransformSet::from_kinds(&kinds).unwrap();
        let k = 2.min(kinds.len());
        let envs = set.enumerate_environments(k).unwrap();
        let mut valid_pairs = 0;
        if k >= 2 {
            for a in 0..kinds.len() {
                for b in (a + 1)..kinds.len() {
                    if !excluded(kinds[a], kinds[b]) {
                        valid_pairs += 1;
                    }
                }
            }
        }
        prop_assert_eq!(envs.len(), 1 + kinds.len() + valid_pairs);
        prop_assert!(envs[0].composite.is_identity());
        for (i, e) in envs.iter().enumerate() {
            prop_assert_eq!(e.index, i);
        }
        let mut names: Vec<&str> = envs.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        prop_assert_eq!(names.len(), envs.len(), "environment names collide");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn relabeling_nodes_permutes_node_outputs_bitwise(
        raw in raw_graph(8),
        order_seed in any::<u64>(),
    ) {
        let mut g = raw.build();
        g.node_labels = Some(vec![0; g.num_nodes()]);
        let model = MoEModel::new(
            toy_config(TaskKind::Node, g.feature_dim()),
            &TransformSet::default_synthetic(),
            11,
        )
        .unwrap();
        let base = model.model_forward(&g).unwrap();

        let mut order: Vec<usize> = (0..g.num_nodes()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
        let permuted = relabel(&g, &order);
        let out = model.model_forward(&permuted).unwrap();

        for (k, &old) in order.iter().enumerate() {
            for c in 0..base.logits.ncols() {
                prop_assert_eq!(
                    out.logits[(k, c)].to_bits(),
                    base.logits[(old, c)].to_bits(),
                    "logit row moved inexactly: new {} old {} col {}", k, old, c
                );
            }
        }
    }

    #[test]
    fn relabeling_nodes_leaves_graph_outputs_bitwise_unchanged(
        raw in raw_graph(8),
        order_seed in any::<u64>(),
    ) {
        let mut g = raw.build();
        g.graph_label = Some(1);
        let model = MoEModel::new(
            toy_config(TaskKind::Graph, g.feature_dim()),
            &TransformSet::default_synthetic(),
            19,
        )
        .unwrap();
        let base = model.model_forward(&g).unwrap();

        let mut order: Vec<usize> = (0..g.num_nodes()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
        let permuted = relabel(&g, &order);
        let out = model.model_forward(&permuted).unwrap();

        prop_assert_eq!(bits(&out.logits), bits(&base.logits));
        prop_assert_eq!(bits(&out.mixed_rep), bits(&base.mixed_rep));
    }

    #[test]
    fn pooling_is_permutation_invariant_bitwise(
        rows in 1usize..40,
        cols in 1usize..6,
        cells in prop::collection::vec(-1e12f64..1e12, 240),
        order_seed in any::<u64>(),
    ) {
        let m = Array2::from_shape_fn((rows, cols), |(i, j)| cells[(i * cols + j) % cells.len()]);
        let mut order: Vec<usize> = (0..rows).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
        let shuffled = Array2::from_shape_fn((rows, cols), |(i, j)| m[(order[i], j)]);
        for mode in [PoolMode::Add, PoolMode::Mean] {
            let a: Array1<f64> = pool(&m, mode).unwrap();
            let b: Array1<f64> = pool(&shuffled, mode).unwrap();
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ab, bb, "{:?} pooling drifted under row shuffle", mode);
        }
    }

    #[test]
    fn sharpened_softmax_mixing_converges_monotonically_to_the_top_expert(
        instances in 1usize..5,
        dim in 1usize..5,
        seed in any::<u64>(),
        winner in 0usize..4,
    ) {
        let k1 = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reps: Vec<Array2<f64>> = (0..k1)
            .map(|_| Array2::from_shape_fn((instances, dim), |_| rand::Rng::gen::<f64>(&mut rng) * 2.0 - 1.0))
            .collect();
        // Winner margin >= 0.5 per row keeps the limit unambiguous.
        let scores = Array2::from_shape_fn((instances, k1), |(_, j)| {
            if j == winner { 1.0 } else { 0.5 - rand::Rng::gen::<f64>(&mut rng) * 0.5 }
        });
        let model = MoEModel::new(
            MoEConfig { num_classes: 2, feature_dim: 2, ..toy_config(TaskKind::Node, 2) },
            &TransformSet::from_kinds(&[
                TransformKind::DropEdge,
                TransformKind::NoisyNodeFeat,
                TransformKind::AddEdge,
            ]).unwrap(),
            5,
        )
        .unwrap();
        let experts = ExpertOutputs { reps: reps.clone() };
        let target = &reps[winner];
        // Signed cancellation keeps the raw error non-monotone for small
        // scales, so the monotone quantity is the convergence envelope: the
        // winner's mixing weight rises with the scale and bounds the error.
        let mut last_min_weight = 0.0f64;
        let mut err = f64::INFINITY;
        for t in [1.0, 4.0, 16.0, 64.0, 256.0, 1024.0, 1e6] {
            let gating = GatingOutput::from_scores(scores.mapv(|v| v * t));
            let min_weight = (0..instances)
                .map(|i| gating.weights[(i, winner)])
                .fold(f64::INFINITY, f64::min);
            prop_assert!(
                min_weight >= last_min_weight,
                "sharpening lowered the winner's weight: {min_weight} after {last_min_weight}"
            );
            last_min_weight = min_weight;

            let mixed = model.aggregate(&gating, &experts).unwrap();
            err = 0.0;
            for i in 0..instances {
                let mut max_delta = 0.0f64;
                for (j, rep) in reps.iter().enumerate() {
                    if j == winner {
                        continue;
                    }
                    for c in 0..dim {
                        max_delta = max_delta.max((rep[(i, c)] - target[(i, c)]).abs());
                    }
                }
                let slack = 1.0 - gating.weights[(i, winner)];
                for c in 0..dim {
                    let e = (mixed[(i, c)] - target[(i, c)]).abs();
                    err = err.max(e);
                    prop_assert!(
                        e <= slack * max_delta + 1e-12,
                        "row {i} col {c}: error {e} above envelope {}",
                        slack * max_delta
                    );
                }
            }
        }
        prop_assert!(err == 0.0, "limit did not reach the winning row exactly: {err}");
    }

    #[test]
    fn argmax_selection_returns_the_winning_row_verbatim(
        instances in 1usize..5,
        dim in 1usize..5,
        seed in any::<u64>(),
        quantized in prop::collection::vec(0i8..=4, 20),
    ) {
        let k1 = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reps: Vec<Array2<f64>> = (0..k1)
            .map(|_| Array2::from_shape_fn((instances, dim), |_| rand::Rng::gen::<f64>(&mut rng) * 2.0 - 1.0))
            .collect();
        // Coarse score grid makes ties common; ties must resolve to the
        // lowest component index.
        let scores = Array2::from_shape_fn((instances, k1), |(i, j)| {
            f64::from(quantized[(i * k1 + j) % quantized.len()]) * 0.25
        });
        let mut cfg = toy_config(TaskKind::Node, 2);
        cfg.aggregation = AggregationMode::ArgmaxSelect;
        let model = MoEModel::new(
            cfg,
            &TransformSet::from_kinds(&[
                TransformKind::DropEdge,
                TransformKind::NoisyNodeFeat,
                TransformKind::AddEdge,
                TransformKind::DropNode,
            ]).unwrap(),
            5,
        )
        .unwrap();
        let gating = GatingOutput::from_scores(scores.clone());
        let mixed = model.aggregate(&gating, &ExpertOutputs { reps: reps.clone() }).unwrap();
        for i in 0..instances {
            let mut best = 0usize;
            for j in 1..k1 {
                if scores[(i, j)] > scores[(i, best)] {
                    best = j;
                }
            }
            for c in 0..dim {
                prop_assert_eq!(
                    mixed[(i, c)].to_bits(),
                    reps[best][(i, c)].to_bits(),
                    "instance {} col {}: expected expert {}", i, c, best
                );
            }
        }
    }
}
