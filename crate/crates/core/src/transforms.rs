//! Stochastic graph transform functions and their composition.
//!
//! A transform models one component of a distribution shift: structural edits
//! (dropping nodes or edges, inserting edges, cutting a random path, taking an
//! ego subgraph) or attribute corruption (masking, Gaussian noise, constant
//! shifts on node or edge features). Each application draws its strength
//! uniformly from the spec's parameter domain and then applies elementwise
//! randomness, so the same spec yields a family of graphs.
//!
//! Composites apply up to `k` transforms of distinct kinds in sequence.
//! Kind pairs that cancel or subsume each other (`add_edge`+`drop_edge`,
//! `random_subgraph`+`drop_node`) are never combined. Component index 0 is
//! reserved for the identity (no transform); an active [`TransformSet`] of K
//! kinds therefore spans K+1 mixture components.
//!
//! Undirected graphs are edited per edge *unit* (a reciprocal pair of stored
//! rows), keeping the edge list symmetric; edge-feature corruption draws once
//! per unit so reciprocal rows stay equal.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeMasks, validate_graph};
use crate::{Error, Result};

/// The transform vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    MaskNodeFeat,
    NoisyNodeFeat,
    NodeFeatShift,
    MaskEdgeFeat,
    NoisyEdgeFeat,
    EdgeFeatShift,
    AddEdge,
    DropEdge,
    DropNode,
    DropPath,
    RandomSubgraph,
}

impl TransformKind {
    pub const ALL: [TransformKind; 11] = [
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

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::MaskNodeFeat => "mask_node_feat",
            TransformKind::NoisyNodeFeat => "noisy_node_feat",
            TransformKind::NodeFeatShift => "node_feat_shift",
            TransformKind::MaskEdgeFeat => "mask_edge_feat",
            TransformKind::NoisyEdgeFeat => "noisy_edge_feat",
            TransformKind::EdgeFeatShift => "edge_feat_shift",
            TransformKind::AddEdge => "add_edge",
            TransformKind::DropEdge => "drop_edge",
            TransformKind::DropNode => "drop_node",
            TransformKind::DropPath => "drop_path",
            TransformKind::RandomSubgraph => "random_subgraph",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown transform kind {name:?}")))
    }

    /// Default strength domain: fractions/probabilities for structural edits
    /// and masking, a noise standard deviation range for the noisy kinds, an
    /// additive range for shifts, and a hop-count range for subgraphs.
    pub fn default_domain(self) -> (f64, f64) {
        match self {
            TransformKind::NoisyNodeFeat | TransformKind::NoisyEdgeFeat => (0.05, 0.3),
            TransformKind::NodeFeatShift | TransformKind::EdgeFeatShift => (0.1, 0.5),
            TransformKind::RandomSubgraph => (1.0, 2.0),
            _ => (0.3, 0.5),
        }
    }

    fn needs_edge_features(self) -> bool {
        matches!(
            self,
            TransformKind::MaskEdgeFeat
                | TransformKind::NoisyEdgeFeat
                | TransformKind::EdgeFeatShift
        )
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Kind pairs that are never composed: adding and dropping edges cancel, and
/// an ego subgraph followed or preceded by node drops collapses into a single
/// node-removal component.
pub const EXCLUDED_PAIRS: [(TransformKind, TransformKind); 2] = [
    (TransformKind::AddEdge, TransformKind::DropEdge),
    (TransformKind::RandomSubgraph, TransformKind::DropNode),
];

fn pair_excluded(a: TransformKind, b: TransformKind) -> bool {
    EXCLUDED_PAIRS
        .iter()
        .any(|&(x, y)| (a == x && b == y) || (a == y && b == x))
}

/// One transform with its strength domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Inclusive [lo, hi] range the per-application strength is drawn from.
    pub param_domain: (f64, f64),
    /// Replacement value for the masking kinds; ignored otherwise.
    #[serde(default)]
    pub fill_value: f64,
}

impl TransformSpec {
    pub fn with_defaults(kind: TransformKind) -> Self {
        Self {
            kind,
            param_domain: kind.default_domain(),
            fill_value: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.param_domain;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "{}: bad param domain [{lo}, {hi}]",
                self.kind
            )));
        }
        match self.kind {
            TransformKind::NoisyNodeFeat | TransformKind::NoisyEdgeFeat => {
                if lo < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{}: noise std domain must be non-negative",
                        self.kind
                    )));
                }
            }
            TransformKind::NodeFeatShift | TransformKind::EdgeFeatShift => {}
            TransformKind::RandomSubgraph => {
                if lo < 1.0 || hi.floor() < lo.ceil() {
                    return Err(Error::InvalidArgument(format!(
                        "{}: hop domain [{lo}, {hi}] must contain an integer >= 1",
                        self.kind
                    )));
                }
            }
            // Remaining kinds interpret the strength as a probability/fraction.
            _ => {
                if lo < 0.0 || hi > 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{}: probability domain [{lo}, {hi}] outside [0, 1]",
                        self.kind
                    )));
                }
            }
        }
        if !self.fill_value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{}: fill value must be finite",
                self.kind
            )));
        }
        Ok(())
    }
}

/// An ordered sequence of distinct-kind transforms; empty means identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeTransform {
    pub specs: Vec<TransformSpec>,
}

impl CompositeTransform {
    pub fn identity() -> Self {
        Self { specs: Vec::new() }
    }

    pub fn single(spec: TransformSpec) -> Self {
        Self { specs: vec![spec] }
    }

    pub fn is_identity(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn kinds(&self) -> Vec<TransformKind> {
        self.specs.iter().map(|s| s.kind).collect()
    }

    /// Check size, spec domains, kind distinctness, and pair exclusions.
    pub fn validate(&self, max_size: usize) -> Result<()> {
        if self.specs.len() > max_size {
            return Err(Error::InvalidArgument(format!(
                "composite of {} specs exceeds k = {max_size}",
                self.specs.len()
            )));
        }
        for spec in &self.specs {
            spec.validate()?;
        }
        for i in 0..self.specs.len() {
            for j in (i + 1)..self.specs.len() {
                let (a, b) = (self.specs[i].kind, self.specs[j].kind);
                if a == b {
                    return Err(Error::InvalidArgument(format!(
                        "composite repeats kind {a}"
                    )));
                }
                if pair_excluded(a, b) {
                    return Err(Error::InvalidArgument(format!(
                        "composite combines excluded pair {a} + {b}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Human-readable name: kind names joined by '+', or "identity".
    pub fn describe(&self) -> String {
        if self.is_identity() {
            "identity".into()
        } else {
            self.kinds()
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

/// Multi-hot indicator over the K+1 mixture components: bit 0 is identity,
/// bit i >= 1 marks the i-th kind of the active set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureLabel {
    pub bits: Vec<bool>,
}

impl MixtureLabel {
    /// Number of components (K + 1).
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// One extrapolated test environment: a fixed composite applied to every
/// instance (with fresh per-instance randomness).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub index: usize,
    pub name: String,
    pub composite: CompositeTransform,
}

/// The active set of K transform kinds, indexed 1..=K in insertion order
/// (index 0 is the implicit identity component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    specs: Vec<TransformSpec>,
}

impl TransformSet {
    /// Build from specs; kinds must be distinct and domains valid. An empty
    /// set is allowed and spans only the identity component.
    pub fn new(specs: Vec<TransformSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for spec in &specs {
            spec.validate()?;
            if !seen.insert(spec.kind) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate kind {} in transform set",
                    spec.kind
                )));
            }
        }
        Ok(Self { specs })
    }

    pub fn from_kinds(kinds: &[TransformKind]) -> Result<Self> {
        Self::new(kinds.iter().map(|&k| TransformSpec::with_defaults(k)).collect())
    }

    /// The default 5-kind set used for synthetic structure+feature shifts.
    pub fn default_synthetic() -> Self {
        Self::from_kinds(&[
            TransformKind::RandomSubgraph,
            TransformKind::DropNode,
            TransformKind::DropEdge,
            TransformKind::AddEdge,
            TransformKind::NoisyNodeFeat,
        ])
        .expect("default set is valid")
    }

    /// All eleven kinds with default domains.
    pub fn full() -> Self {
        Self::from_kinds(&TransformKind::ALL).expect("full set is valid")
    }

    pub fn specs(&self) -> &[TransformSpec] {
        &self.specs
    }

    /// Number of non-identity kinds (K).
    pub fn k_kinds(&self) -> usize {
        self.specs.len()
    }

    /// Total mixture components (K + 1, counting identity).
    pub fn num_components(&self) -> usize {
        self.specs.len() + 1
    }

    /// Component index of a kind (1-based; 0 is identity).
    pub fn kind_index(&self, kind: TransformKind) -> Option<usize> {
        self.specs.iter().position(|s| s.kind == kind).map(|i| i + 1)
    }

    /// Component names, identity first.
    pub fn component_names(&self) -> Vec<String> {
        std::iter::once("identity".to_string())
            .chain(self.specs.iter().map(|s| s.kind.name().to_string()))
            .collect()
    }

    /// Multi-hot label of a composite over this set's components. Errors if
    /// the composite uses a kind outside the set.
    pub fn mixture_label(&self, c: &CompositeTransform) -> Result<MixtureLabel> {
        let mut bits = vec![false; self.num_components()];
        if c.is_identity() {
            bits[0] = true;
        }
        for spec in &c.specs {
            let ix = self.kind_index(spec.kind).ok_or_else(|| {
                Error::InvalidArgument(format!("kind {} not in the active set", spec.kind))
            })?;
            bits[ix] = true;
        }
        Ok(MixtureLabel { bits })
    }

    /// Kind-index subsets of each size in 1..=k that violate no exclusion.
    fn valid_subsets(&self, k: usize) -> Vec<Vec<Vec<usize>>> {
        let n = self.specs.len();
        let mut by_size: Vec<Vec<Vec<usize>>> = vec![Vec::new(); k + 1];
        // n <= 11, so bitmask enumeration is cheap.
        for mask in 1u32..(1 << n) {
            let size = mask.count_ones() as usize;
            if size > k {
                continue;
            }
            let ids: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            let ok = ids.iter().enumerate().all(|(a, &i)| {
                ids[a + 1..]
                    .iter()
                    .all(|&j| !pair_excluded(self.specs[i].kind, self.specs[j].kind))
            });
            if ok {
                by_size[size].push(ids);
            }
        }
        by_size
    }

    /// Draw a composite: a uniform size in 1..=k (sizes admitting no valid
    /// kind combination are excluded), then distinct kinds of that size,
    /// redrawing any combination that hits an excluded pair, in random
    /// application order.
    pub fn sample_composite(&self, k: usize, rng: &mut ChaCha8Rng) -> Result<CompositeTransform> {
        let n = self.specs.len();
        if k < 1 || k > n {
            return Err(Error::InvalidArgument(format!(
                "composite size bound k = {k} outside 1..={n}"
            )));
        }
        let by_size = self.valid_subsets(k);
        let sizes: Vec<usize> = (1..=k).filter(|&s| !by_size[s].is_empty()).collect();
        if sizes.is_empty() {
            return Err(Error::InvalidArgument(
                "no valid kind combination of any size".into(),
            ));
        }
        let size = sizes[rng.gen_range(0..sizes.len())];
        let mut ids: Vec<usize>;
        loop {
            // Partial Fisher-Yates draw of `size` distinct kind indices.
            let mut all: Vec<usize> = (0..n).collect();
            for i in 0..size {
                let j = rng.gen_range(i..n);
                all.swap(i, j);
            }
            ids = all[..size].to_vec();
            let ok = ids.iter().enumerate().all(|(a, &i)| {
                ids[a + 1..]
                    .iter()
                    .all(|&j| !pair_excluded(self.specs[i].kind, self.specs[j].kind))
            });
            if ok {
                break;
            }
        }
        ids.shuffle(rng);
        Ok(CompositeTransform {
            specs: ids.into_iter().map(|i| self.specs[i]).collect(),
        })
    }

    /// Enumerate test environments up to composite size `k`, in a stable
    /// order: identity (index 0), then singles in set order, then pairs
    /// (i, j), i < j, ordered by (j, i), then larger subsets
    /// lexicographically. Excluded pairs never appear.
    pub fn enumerate_environments(&self, k: usize) -> Result<Vec<Environment>> {
        let n = self.specs.len();
        if k < 1 || (n > 0 && k > n) {
            return Err(Error::InvalidArgument(format!(
                "environment size bound k = {k} outside 1..={n}"
            )));
        }
        let mut envs = vec![Environment {
            index: 0,
            name: "identity".into(),
            composite: CompositeTransform::identity(),
        }];
        let by_size = self.valid_subsets(k.min(n));
        for (size, mut subsets) in by_size.into_iter().enumerate() {
            if size == 0 {
                continue;
            }
            if size == 2 {
                subsets.sort_by_key(|ids| (ids[1], ids[0]));
            } else {
                subsets.sort();
            }
            for ids in subsets {
                let composite = CompositeTransform {
                    specs: ids.iter().map(|&i| self.specs[i]).collect(),
                };
                envs.push(Environment {
                    index: envs.len(),
                    name: composite.describe(),
                    composite,
                });
            }
        }
        Ok(envs)
    }
}

/// Result of a traced application: the transformed graph plus, for every
/// surviving node, its index in the input graph.
#[derive(Debug, Clone)]
pub struct TransformOutcome {
    pub graph: Graph,
    pub node_origin: Vec<usize>,
}

/// Apply a composite to a graph.
pub fn apply(g: &Graph, c: &CompositeTransform, rng: &mut ChaCha8Rng) -> Result<Graph> {
    Ok(apply_traced(g, c, rng, None)?.graph)
}

/// Apply a composite, tracking node provenance. When `anchor` names a node of
/// the input graph, node-removing transforms protect it: `drop_node` never
/// drops it and `random_subgraph` grows the subgraph from it, so it is
/// guaranteed to survive to the output.
pub fn apply_traced(
    g: &Graph,
    c: &CompositeTransform,
    rng: &mut ChaCha8Rng,
    anchor: Option<usize>,
) -> Result<TransformOutcome> {
    if let Some(a) = anchor {
        if a >= g.num_nodes() {
            return Err(Error::InvalidArgument(format!(
                "anchor {a} outside 0..{}",
                g.num_nodes()
            )));
        }
    }
    let mut current = g.clone();
    let mut origin: Vec<usize> = (0..g.num_nodes()).collect();
    let mut anchor_now = anchor;
    for spec in &c.specs {
        spec.validate()?;
        let step = apply_spec(&current, spec, rng, anchor_now)?;
        origin = step.node_origin.iter().map(|&m| origin[m]).collect();
        if let Some(a) = anchor_now {
            anchor_now = Some(
                step.node_origin
                    .iter()
                    .position(|&m| m == a)
                    .expect("anchored node survives every transform"),
            );
        }
        current = step.graph;
    }
    debug_assert!(validate_graph(&current).is_empty());
    Ok(TransformOutcome {
        graph: current,
        node_origin: origin,
    })
}

/// Draw the per-application strength from the spec's domain.
fn draw_param(spec: &TransformSpec, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = spec.param_domain;
    if spec.kind == TransformKind::RandomSubgraph {
        let lo = lo.ceil() as u64;
        let hi = hi.floor() as u64;
        rng.gen_range(lo..=hi) as f64
    } else if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Edge units: for undirected graphs, reciprocal row pairs (self-loops
/// stand alone); for directed graphs, each row is its own unit. Editing whole
/// units keeps undirected edge lists symmetric.
fn edge_units(g: &Graph) -> Vec<Vec<usize>> {
    if g.directed {
        return (0..g.edge_index.len()).map(|i| vec![i]).collect();
    }
    let mut forward: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    let mut backward: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    let mut units: Vec<Vec<usize>> = Vec::new();
    for (row, &(s, d)) in g.edge_index.iter().enumerate() {
        if s == d {
            units.push(vec![row]);
        } else if s < d {
            forward.entry((s, d)).or_default().push(row);
        } else {
            backward.entry((d, s)).or_default().push(row);
        }
    }
    let mut keys: Vec<(usize, usize)> = forward.keys().chain(backward.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    for key in keys {
        let f = forward.remove(&key).unwrap_or_default();
        let b = backward.remove(&key).unwrap_or_default();
        let paired = f.len().min(b.len());
        for i in 0..paired {
            units.push(vec![f[i], b[i]]);
        }
        // Unpaired rows only occur on graphs that fail validation; keep them
        // as singleton units rather than panicking.
        for &row in f[paired..].iter().chain(&b[paired..]) {
            units.push(vec![row]);
        }
    }
    for unit in &mut units {
        unit.sort_unstable();
    }
    units.sort_by_key(|u| u[0]);
    units
}

/// Keep the listed rows (ascending) of the edge list and features.
fn keep_edge_rows(g: &Graph, keep: &[usize]) -> (Vec<(usize, usize)>, Option<ndarray::Array2<f64>>) {
    let edge_index = keep.iter().map(|&r| g.edge_index[r]).collect();
    let edge_features = g
        .edge_features
        .as_ref()
        .map(|ef| ef.select(ndarray::Axis(0), keep));
    (edge_index, edge_features)
}

/// Induce the subgraph on `kept` (ascending node ids), remapping edges,
/// labels, and masks. Returns the graph and the kept list as node origins.
fn induce_subgraph(g: &Graph, kept: &[usize]) -> TransformOutcome {
    let mut new_id = vec![usize::MAX; g.num_nodes()];
    for (new, &old) in kept.iter().enumerate() {
        new_id[old] = new;
    }
    let keep_rows: Vec<usize> = g
        .edge_index
        .iter()
        .enumerate()
        .filter(|(_, &(s, d))| new_id[s] != usize::MAX && new_id[d] != usize::MAX)
        .map(|(r, _)| r)
        .collect();
    let (edges_old, edge_features) = keep_edge_rows(g, &keep_rows);
    let edge_index = edges_old
        .into_iter()
        .map(|(s, d)| (new_id[s], new_id[d]))
        .collect();
    let graph = Graph {
        node_features: g.node_features.select(ndarray::Axis(0), kept),
        edge_index,
        edge_features,
        node_labels: g
            .node_labels
            .as_ref()
            .map(|l| kept.iter().map(|&i| l[i]).collect()),
        graph_label: g.graph_label,
        node_masks: g.node_masks.as_ref().map(|m| NodeMasks {
            train: kept.iter().map(|&i| m.train[i]).collect(),
            val: kept.iter().map(|&i| m.val[i]).collect(),
            test: kept.iter().map(|&i| m.test[i]).collect(),
        }),
        directed: g.directed,
    };
    TransformOutcome {
        graph,
        node_origin: kept.to_vec(),
    }
}

fn identity_outcome(g: &Graph) -> TransformOutcome {
    TransformOutcome {
        graph: g.clone(),
        node_origin: (0..g.num_nodes()).collect(),
    }
}

/// Undirected-view adjacency for walks and BFS: node -> (neighbor, unit id).
/// Directed graphs walk along edge direction only.
fn unit_adjacency(g: &Graph, units: &[Vec<usize>]) -> Vec<Vec<(usize, usize)>> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); g.num_nodes()];
    for (uid, unit) in units.iter().enumerate() {
        for &row in unit {
            let (s, d) = g.edge_index[row];
            adj[s].push((d, uid));
        }
    }
    adj
}

fn apply_spec(
    g: &Graph,
    spec: &TransformSpec,
    rng: &mut ChaCha8Rng,
    anchor: Option<usize>,
) -> Result<TransformOutcome> {
    if spec.kind.needs_edge_features() && g.edge_features.is_none() {
        return Err(Error::MissingEdgeFeatures(spec.kind.name()));
    }
    let n = g.num_nodes();
    if n == 0 {
        return Ok(identity_outcome(g));
    }
    let p = draw_param(spec, rng);

    match spec.kind {
        TransformKind::MaskNodeFeat => {
            let mut out = g.clone();
            for v in out.node_features.iter_mut() {
                if rng.gen::<f64>() < p {
                    *v = spec.fill_value;
                }
            }
            Ok(identity_outcome(&out))
        }
        TransformKind::NoisyNodeFeat => {
            let normal = Normal::new(0.0, p)
                .map_err(|e| Error::InvalidArgument(format!("noise std {p}: {e}")))?;
            let mut out = g.clone();
            for v in out.node_features.iter_mut() {
                *v += normal.sample(rng);
            }
            Ok(identity_outcome(&out))
        }
        TransformKind::NodeFeatShift => {
            let mut out = g.clone();
            out.node_features += p;
            Ok(identity_outcome(&out))
        }
        TransformKind::MaskEdgeFeat | TransformKind::NoisyEdgeFeat | TransformKind::EdgeFeatShift => {
            let mut out = g.clone();
            let units = edge_units(g);
            let ef = out.edge_features.as_mut().expect("checked above");
            match spec.kind {
                TransformKind::EdgeFeatShift => {
                    *ef += p;
                }
                TransformKind::MaskEdgeFeat => {
                    // One draw per (unit, column) keeps reciprocal rows equal.
                    for unit in &units {
                        for col in 0..ef.ncols() {
                            if rng.gen::<f64>() < p {
                                for &row in unit {
                                    ef[(row, col)] = spec.fill_value;
                                }
                            }
                        }
                    }
                }
                TransformKind::NoisyEdgeFeat => {
                    let normal = Normal::new(0.0, p)
                        .map_err(|e| Error::InvalidArgument(format!("noise std {p}: {e}")))?;
                    for unit in &units {
                        for col in 0..ef.ncols() {
                            let noise = normal.sample(rng);
                            for &row in unit {
                                ef[(row, col)] += noise;
                            }
                        }
                    }
                }
                _ => unreachable!(),
            }
            Ok(identity_outcome(&out))
        }
        TransformKind::DropEdge => {
            let units = edge_units(g);
            let mut keep_rows = Vec::with_capacity(g.edge_index.len());
            for unit in &units {
                if rng.gen::<f64>() >= p {
                    keep_rows.extend_from_slice(unit);
                }
            }
            keep_rows.sort_unstable();
            let (edge_index, edge_features) = keep_edge_rows(g, &keep_rows);
            let mut out = g.clone();
            out.edge_index = edge_index;
            out.edge_features = edge_features;
            Ok(identity_outcome(&out))
        }
        TransformKind::AddEdge => {
            let units = edge_units(g);
            let mut existing: HashSet<(usize, usize)> = HashSet::new();
            for &(s, d) in &g.edge_index {
                existing.insert(if g.directed || s <= d { (s, d) } else { (d, s) });
            }
            let absent_total = if g.directed {
                n * n.saturating_sub(1) - existing.iter().filter(|&&(s, d)| s != d).count()
            } else {
                n * n.saturating_sub(1) / 2 - existing.iter().filter(|&&(s, d)| s < d).count()
            };
            let target = units.len().min(absent_total);
            let mut candidates = Vec::with_capacity(target);
            let mut chosen = HashSet::new();
            let mut attempts = 0usize;
            let max_attempts = 100 * target + 100;
            while candidates.len() < target && attempts < max_attempts {
                attempts += 1;
                let u = rng.gen_range(0..n);
                let v = rng.gen_range(0..n);
                if u == v {
                    continue;
                }
                let key = if g.directed || u <= v { (u, v) } else { (v, u) };
                if existing.contains(&key) || !chosen.insert(key) {
                    continue;
                }
                candidates.push(key);
            }
            let mut out = g.clone();
            let de = g.edge_feature_dim();
            let mut added = 0usize;
            for (u, v) in candidates {
                if rng.gen::<f64>() < p {
                    out.edge_index.push((u, v));
                    added += 1;
                    if !g.directed {
                        out.edge_index.push((v, u));
                        added += 1;
                    }
                }
            }
            if let (Some(de), Some(ef)) = (de, out.edge_features.take()) {
                // Inserted edges carry zero feature rows.
                let mut grown = ndarray::Array2::zeros((ef.nrows() + added, de));
                grown.slice_mut(ndarray::s![..ef.nrows(), ..]).assign(&ef);
                out.edge_features = Some(grown);
            }
            Ok(identity_outcome(&out))
        }
        TransformKind::DropNode => {
            let mut kept: Vec<usize> = Vec::new();
            for _attempt in 0..100 {
                kept.clear();
                for i in 0..n {
                    let drop = rng.gen::<f64>() < p;
                    if !drop || anchor == Some(i) {
                        kept.push(i);
                    }
                }
                if !kept.is_empty() {
                    break;
                }
            }
            if kept.is_empty() {
                kept.push(rng.gen_range(0..n));
            }
            Ok(induce_subgraph(g, &kept))
        }
        TransformKind::DropPath => {
            let units = edge_units(g);
            let budget = (p * units.len() as f64).ceil() as usize;
            if units.is_empty() || budget == 0 {
                return Ok(identity_outcome(g));
            }
            let adj = unit_adjacency(g, &units);
            let starts: Vec<usize> = (0..n).filter(|&i| !adj[i].is_empty()).collect();
            if starts.is_empty() {
                return Ok(identity_outcome(g));
            }
            let mut current = starts[rng.gen_range(0..starts.len())];
            let mut visited = HashSet::from([current]);
            let mut dropped_units = HashSet::new();
            while dropped_units.len() < budget {
                let options: Vec<(usize, usize)> = adj[current]
                    .iter()
                    .copied()
                    .filter(|&(nb, uid)| !visited.contains(&nb) && !dropped_units.contains(&uid))
                    .collect();
                if options.is_empty() {
                    break;
                }
                let (next, uid) = options[rng.gen_range(0..options.len())];
                dropped_units.insert(uid);
                visited.insert(next);
                current = next;
            }
            let mut keep_rows = Vec::with_capacity(g.edge_index.len());
            for (uid, unit) in units.iter().enumerate() {
                if !dropped_units.contains(&uid) {
                    keep_rows.extend_from_slice(unit);
                }
            }
            keep_rows.sort_unstable();
            let (edge_index, edge_features) = keep_edge_rows(g, &keep_rows);
            let mut out = g.clone();
            out.edge_index = edge_index;
            out.edge_features = edge_features;
            Ok(identity_outcome(&out))
        }
        TransformKind::RandomSubgraph => {
            let hops = p as usize;
            let seed = anchor.unwrap_or_else(|| rng.gen_range(0..n));
            let units = edge_units(g);
            let adj = unit_adjacency(g, &units);
            let mut dist = vec![usize::MAX; n];
            dist[seed] = 0;
            let mut frontier = vec![seed];
            for level in 1..=hops {
                let mut next = Vec::new();
                for &u in &frontier {
                    for &(v, _) in &adj[u] {
                        if dist[v] == usize::MAX {
                            dist[v] = level;
                            next.push(v);
                        }
                    }
                }
                frontier = next;
            }
            let kept: Vec<usize> = (0..n).filter(|&i| dist[i] != usize::MAX).collect();
            Ok(induce_subgraph(g, &kept))
        }
    }
}
