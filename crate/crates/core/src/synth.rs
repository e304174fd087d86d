//! Synthetic benchmark data.
//!
//! Two generators, both pure functions of (config, seed):
//!
//! * a stochastic block model for node classification, where the community is
//!   both the label and the feature signal, and
//! * a G(n, p) collection for graph classification, labeled either by a
//!   pooled feature threshold or by triangle-count terciles.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::seed::stream_rng;
use crate::{Error, Result};

/// Stochastic block model over a fixed node count. Communities are assigned
/// by shuffled round robin, so class counts never differ by more than one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub num_nodes: usize,
    pub num_communities: usize,
    /// Edge probability within a community.
    pub p_intra: f64,
    /// Edge probability across communities.
    pub p_inter: f64,
    pub feature_dim: usize,
    /// Scale of the community indicator added to node features.
    pub separation: f64,
    /// Standard deviation of per-entry feature noise.
    pub noise: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            num_nodes: 1000,
            num_communities: 4,
            p_intra: 0.05,
            p_inter: 0.005,
            feature_dim: 8,
            separation: 1.0,
            noise: 0.5,
        }
    }
}

impl SbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_communities < 2 || self.num_nodes < self.num_communities {
            return Err(Error::InvalidArgument(
                "need at least 2 communities and one node per community".into(),
            ));
        }
        for (name, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {p} outside [0, 1]"
                )));
            }
        }
        if self.feature_dim == 0 || self.noise < 0.0 || !self.separation.is_finite() {
            return Err(Error::InvalidArgument(
                "feature_dim must be positive, noise non-negative, separation finite".into(),
            ));
        }
        Ok(())
    }
}

/// Generate one SBM graph. Node labels are the communities; node features are
/// `separation * one_hot(community mod feature_dim) + Normal(0, noise)`.
pub fn generate_sbm(cfg: &SbmConfig, seed: u64) -> Result<Graph> {
    cfg.validate()?;
    let n = cfg.num_nodes;
    let mut rng = stream_rng(seed, "data", &[0]);

    let mut communities: Vec<usize> = (0..n).map(|i| i % cfg.num_communities).collect();
    communities.shuffle(&mut rng);

    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE))
        .expect("validated noise parameter");
    let mut features = Array2::from_shape_fn((n, cfg.feature_dim), |_| {
        if cfg.noise > 0.0 {
            normal.sample(&mut rng)
        } else {
            0.0
        }
    });
    for (i, &c) in communities.iter().enumerate() {
        features[(i, c % cfg.feature_dim)] += cfg.separation;
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if communities[i] == communities[j] {
                cfg.p_intra
            } else {
                cfg.p_inter
            };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    if edges.is_empty() {
        // Degenerate configs (both probabilities zero) still need structure
        // for message passing; connect the first pair.
        edges.push((0, 1));
        edges.push((1, 0));
    }

    let mut g = Graph::new(features, edges, false);
    g.node_labels = Some(communities.iter().map(|&c| c as i64).collect());
    g.checked()
}

/// How graph labels are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Column 0 of node features carries a per-graph mean of +shift or
    /// -shift; the binary label is the sign of the realized column mean.
    FeatureThreshold,
    /// Three classes from dataset-level terciles of the triangle count.
    MotifCount,
}

impl LabelRule {
    pub fn num_classes(self) -> usize {
        match self {
            LabelRule::FeatureThreshold => 2,
            LabelRule::MotifCount => 3,
        }
    }
}

/// G(n, p) graph collection with per-graph node counts drawn uniformly from
/// an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphDatasetConfig {
    pub num_graphs: usize,
    pub nodes_range: (usize, usize),
    pub edge_prob: f64,
    pub feature_dim: usize,
    pub label_rule: LabelRule,
    /// Mean magnitude of the column-0 signal under `FeatureThreshold`.
    pub shift: f64,
    /// Standard deviation of feature noise.
    pub noise: f64,
}

impl Default for GraphDatasetConfig {
    fn default() -> Self {
        Self {
            num_graphs: 500,
            nodes_range: (10, 30),
            edge_prob: 0.15,
            feature_dim: 8,
            label_rule: LabelRule::FeatureThreshold,
            shift: 0.5,
            noise: 0.5,
        }
    }
}

impl GraphDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_graphs == 0 {
            return Err(Error::InvalidArgument("num_graphs must be positive".into()));
        }
        let (lo, hi) = self.nodes_range;
        if lo < 3 || hi < lo {
            return Err(Error::InvalidArgument(format!(
                "nodes_range ({lo}, {hi}) must satisfy 3 <= lo <= hi"
            )));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::InvalidArgument(format!(
                "edge_prob = {} outside [0, 1]",
                self.edge_prob
            )));
        }
        if self.feature_dim == 0 || self.noise < 0.0 || !(self.shift > 0.0) {
            return Err(Error::InvalidArgument(
                "feature_dim must be positive, noise non-negative, shift positive".into(),
            ));
        }
        Ok(())
    }
}

/// Triangles in the undirected simple graph underlying `g` (each unordered
/// node triple with all three connections counts once).
pub fn triangle_count(g: &Graph) -> usize {
    let n = g.num_nodes();
    let mut adj = vec![std::collections::HashSet::new(); n];
    for &(s, d) in &g.edge_index {
        if s != d {
            adj[s].insert(d);
            adj[d].insert(s);
        }
    }
    let mut count = 0;
    for u in 0..n {
        for &v in &adj[u] {
            if v <= u {
                continue;
            }
            count += adj[u].iter().filter(|&&w| w > v && adj[v].contains(&w)).count();
        }
    }
    count
}

/// Generate the graph collection. Labels under `MotifCount` are assigned in a
/// second pass from the empirical tercile boundaries of the whole dataset.
pub fn generate_graph_dataset(cfg: &GraphDatasetConfig, seed: u64) -> Result<Vec<Graph>> {
    cfg.validate()?;
    let mut graphs = Vec::with_capacity(cfg.num_graphs);
    for gi in 0..cfg.num_graphs {
        let mut rng = stream_rng(seed, "data", &[gi as u64]);
        let n = rng.gen_range(cfg.nodes_range.0..=cfg.nodes_range.1);

        let signal = match cfg.label_rule {
            LabelRule::FeatureThreshold => {
                if rng.gen::<bool>() {
                    cfg.shift
                } else {
                    -cfg.shift
                }
            }
            // A constant baseline keeps pooled representations informative
            // about size and density, which the motif label tracks.
            LabelRule::MotifCount => 1.0,
        };
        let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE))
            .expect("validated noise parameter");
        let mut features = Array2::from_shape_fn((n, cfg.feature_dim), |_| {
            if cfg.noise > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            }
        });
        for i in 0..n {
            features[(i, 0)] += signal;
        }

        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < cfg.edge_prob {
                    edges.push((i, j));
                    edges.push((j, i));
                }
            }
        }
        if edges.is_empty() {
            edges.push((0, 1));
            edges.push((1, 0));
        }

        let mut g = Graph::new(features, edges, false);
        if cfg.label_rule == LabelRule::FeatureThreshold {
            let mean0 = g.node_features.column(0).mean().expect("non-empty");
            g.graph_label = Some(i64::from(mean0 > 0.0));
        }
        graphs.push(g.checked()?);
    }

    if cfg.label_rule == LabelRule::MotifCount {
        let counts: Vec<usize> = graphs.iter().map(triangle_count).collect();
        let (q1, q2) = tercile_bounds(&counts);
        for (g, &c) in graphs.iter_mut().zip(counts.iter()) {
            g.graph_label = Some(if c <= q1 {
                0
            } else if c <= q2 {
                1
            } else {
                2
            });
        }
    }
    Ok(graphs)
}

/// Inclusive upper bounds of the first and second terciles of `counts`.
fn tercile_bounds(counts: &[usize]) -> (usize, usize) {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    (sorted[(n - 1) / 3], sorted[(2 * (n - 1)) / 3])
}
