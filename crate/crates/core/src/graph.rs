//! Attributed graphs, dataset splits, and permutation-invariant pooling.
//!
//! A [`Graph`] is a plain data carrier: dense node features, an edge list,
//! optional edge features, and either per-node labels (node tasks) or one
//! graph label (graph tasks). Undirected graphs store both directions of each
//! edge explicitly; message passing code never needs to know the flag.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numeric::ExactSum;
use crate::seed::stream_rng;
use crate::{Error, Result};

/// What a dataset's labels attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Node,
    Graph,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Node => write!(f, "node"),
            TaskKind::Graph => write!(f, "graph"),
        }
    }
}

/// Train/val/test membership flags over the nodes of one graph.
///
/// All three vectors have one entry per node; a node belongs to at most one
/// part. Nodes in no part exist structurally but are never scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl NodeMasks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    /// Indices of nodes in the given part.
    pub fn part_indices(&self, part: SplitPart) -> Vec<usize> {
        let mask = match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        };
        mask.iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// An attributed graph.
///
/// Invariants (checked by [`validate_graph`], upheld by every constructor and
/// transform in this crate):
/// - every edge endpoint indexes a node;
/// - `edge_features`, when present, has one row per stored edge;
/// - node labels and a graph label are mutually exclusive;
/// - node labels and masks, when present, have one entry per node;
/// - masks are pairwise disjoint;
/// - undirected graphs store both orientations of every non-loop edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// N x d_v node feature matrix.
    pub node_features: Array2<f64>,
    /// Stored edges as (src, dst) pairs; both directions for undirected graphs.
    pub edge_index: Vec<(usize, usize)>,
    /// Optional E x d_e edge feature matrix, row i for edge i.
    pub edge_features: Option<Array2<f64>>,
    /// Per-node class labels (node tasks).
    pub node_labels: Option<Vec<i64>>,
    /// Whole-graph class label (graph tasks).
    pub graph_label: Option<i64>,
    /// Node split membership (node tasks).
    pub node_masks: Option<NodeMasks>,
    /// False if the edge list encodes an undirected graph (reciprocal pairs).
    pub directed: bool,
}

impl Graph {
    /// Bare graph with features and edges only.
    pub fn new(node_features: Array2<f64>, edge_index: Vec<(usize, usize)>, directed: bool) -> Self {
        Self {
            node_features,
            edge_index,
            edge_features: None,
            node_labels: None,
            graph_label: None,
            node_masks: None,
            directed,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    /// Stored (directed) edge count.
    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn edge_feature_dim(&self) -> Option<usize> {
        self.edge_features.as_ref().map(|f| f.ncols())
    }

    /// Validate and return self, for constructor-style use.
    pub fn checked(self) -> Result<Self> {
        let problems = validate_graph(&self);
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidGraph(problems.join("; ")))
        }
    }
}

/// Check every structural invariant; returns human-readable diagnostics,
/// empty when the graph is well formed.
pub fn validate_graph(g: &Graph) -> Vec<String> {
    let mut problems = Vec::new();
    let n = g.num_nodes();

    for (i, &(s, d)) in g.edge_index.iter().enumerate() {
        if s >= n || d >= n {
            problems.push(format!("edge {i} = ({s}, {d}) references a node >= {n}"));
        }
    }

    if let Some(ef) = &g.edge_features {
        if ef.nrows() != g.edge_index.len() {
            problems.push(format!(
                "edge_features has {} rows for {} edges",
                ef.nrows(),
                g.edge_index.len()
            ));
        }
    }

    if g.node_labels.is_some() && g.graph_label.is_some() {
        problems.push("graph carries both node labels and a graph label".into());
    }
    if let Some(labels) = &g.node_labels {
        if labels.len() != n {
            problems.push(format!("{} node labels for {n} nodes", labels.len()));
        }
    }

    if let Some(masks) = &g.node_masks {
        for (name, m) in [("train", &masks.train), ("val", &masks.val), ("test", &masks.test)] {
            if m.len() != n {
                problems.push(format!("{name} mask has {} entries for {n} nodes", m.len()));
            }
        }
        if masks.train.len() == n && masks.val.len() == n && masks.test.len() == n {
            for i in 0..n {
                let parts = masks.train[i] as u8 + masks.val[i] as u8 + masks.test[i] as u8;
                if parts > 1 {
                    problems.push(format!("node {i} belongs to {parts} split parts"));
                }
            }
        }
    }

    if !g.directed {
        // Count each ordered pair; reciprocity means count(u,v) == count(v,u).
        let mut counts = std::collections::HashMap::new();
        for &(s, d) in &g.edge_index {
            *counts.entry((s, d)).or_insert(0usize) += 1;
        }
        for (&(s, d), &c) in &counts {
            if s != d && counts.get(&(d, s)).copied().unwrap_or(0) != c {
                problems.push(format!(
                    "undirected graph stores ({s}, {d}) x{c} without matching reverse"
                ));
                break;
            }
        }
    }

    problems
}

/// A dataset split the trainer and evaluator consume.
#[derive(Debug, Clone)]
pub enum DatasetSplit {
    /// Disjoint graph collections (graph tasks).
    Graphs {
        train: Vec<Graph>,
        val: Vec<Graph>,
        test: Vec<Graph>,
    },
    /// One graph whose masks carry the membership (node tasks).
    NodeGraph { graph: Graph },
}

impl DatasetSplit {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            DatasetSplit::Graphs { .. } => TaskKind::Graph,
            DatasetSplit::NodeGraph { .. } => TaskKind::Node,
        }
    }

    /// Number of labeled instances in a part (graphs or masked nodes).
    pub fn part_len(&self, part: SplitPart) -> usize {
        match self {
            DatasetSplit::Graphs { train, val, test } => match part {
                SplitPart::Train => train.len(),
                SplitPart::Val => val.len(),
                SplitPart::Test => test.len(),
            },
            DatasetSplit::NodeGraph { graph } => graph
                .node_masks
                .as_ref()
                .map_or(0, |m| m.part_indices(part).len()),
        }
    }
}

/// Validate split fractions: each in (0, 1), summing to 1 within 1e-9.
fn check_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fractions;
    for (name, f) in [("train", a), ("val", b), ("test", c)] {
        if !(f > 0.0 && f < 1.0) || !f.is_finite() {
            return Err(Error::InvalidSplit(format!(
                "{name} fraction {f} outside (0, 1)"
            )));
        }
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!(
            "fractions sum to {}, expected 1",
            a + b + c
        )));
    }
    Ok(())
}

/// Shuffle `0..n` with the given seed and partition by largest-remainder
/// apportionment of the fractions, so part sizes are exact when `n * f` is
/// integral. Every part must come out non-empty.
pub fn split_indices(
    n: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    check_fractions(fractions)?;
    if n < 3 {
        return Err(Error::InvalidSplit(format!(
            "cannot split {n} instances into three non-empty parts"
        )));
    }

    let fs = [fractions.0, fractions.1, fractions.2];
    let ideal: Vec<f64> = fs.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    // Hand out remaining slots by descending fractional part, ties by order.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let fi = ideal[i] - ideal[i].floor();
        let fj = ideal[j] - ideal[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidSplit(format!(
            "fractions {fractions:?} leave an empty part for n = {n}"
        )));
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, "split", &[n as u64]));
    let val_at = counts[0];
    let test_at = counts[0] + counts[1];
    Ok((
        perm[..val_at].to_vec(),
        perm[val_at..test_at].to_vec(),
        perm[test_at..].to_vec(),
    ))
}

/// Split a graph collection into train/val/test parts.
pub fn split_dataset(
    graphs: Vec<Graph>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (tr, va, te) = split_indices(graphs.len(), fractions, seed)?;
    let mut slots: Vec<Option<Graph>> = graphs.into_iter().map(Some).collect();
    let take = |ids: &[usize], slots: &mut Vec<Option<Graph>>| {
        ids.iter().map(|&i| slots[i].take().expect("disjoint split indices")).collect()
    };
    Ok(DatasetSplit::Graphs {
        train: take(&tr, &mut slots),
        val: take(&va, &mut slots),
        test: take(&te, &mut slots),
    })
}

/// Assign split masks over the nodes of one graph (node tasks). Any existing
/// masks are replaced.
pub fn split_nodes(mut graph: Graph, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let n = graph.num_nodes();
    let (tr, va, te) = split_indices(n, fractions, seed)?;
    let mut masks = NodeMasks::empty(n);
    for i in tr {
        masks.train[i] = true;
    }
    for i in va {
        masks.val[i] = true;
    }
    for i in te {
        masks.test[i] = true;
    }
    graph.node_masks = Some(masks);
    Ok(DatasetSplit::NodeGraph { graph })
}

/// Partition a list of labeled graphs into train/val/test (graph tasks).
pub fn split_graphs(
    graphs: Vec<Graph>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (tr, va, te) = split_indices(graphs.len(), fractions, seed)?;
    let mut slots: Vec<Option<Graph>> = graphs.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<Graph> {
        ids.iter()
            .map(|&i| slots[i].take().expect("split indices are disjoint"))
            .collect()
    };
    Ok(DatasetSplit::Graphs {
        train: take(&tr),
        val: take(&va),
        test: take(&te),
    })
}

/// Pooling mode for collapsing node representations to a graph representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Add,
    Mean,
}

/// Pool node rows into one vector. Column sums are correctly rounded, so the
/// result is bitwise identical under any permutation of the rows.
pub fn pool(node_reps: &Array2<f64>, mode: PoolMode) -> Result<Array1<f64>> {
    let n = node_reps.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("pool over zero rows".into()));
    }
    let mut out = Array1::zeros(node_reps.ncols());
    for (j, col) in node_reps.columns().into_iter().enumerate() {
        let mut acc = ExactSum::new();
        for &v in col {
            acc.add(v);
        }
        out[j] = match mode {
            PoolMode::Add => acc.value(),
            PoolMode::Mean => acc.value() / n as f64,
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path_graph(n: usize) -> Graph {
        let mut edges = Vec::new();
        for i in 0..n.saturating_sub(1) {
            edges.push((i, i + 1));
            edges.push((i + 1, i));
        }
        Graph::new(Array2::zeros((n, 3)), edges, false)
    }

    #[test]
    fn validate_accepts_well_formed() {
        let mut g = path_graph(4);
        g.node_labels = Some(vec![0, 1, 0, 1]);
        g.node_masks = Some(NodeMasks {
            train: vec![true, false, false, false],
            val: vec![false, true, false, false],
            test: vec![false, false, true, true],
        });
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn validate_flags_out_of_range_edge() {
        let mut g = path_graph(3);
        g.edge_index.push((0, 9));
        let problems = validate_graph(&g);
        assert!(problems.iter().any(|p| p.contains("references a node")));
    }

    #[test]
    fn validate_flags_edge_feature_row_mismatch() {
        let mut g = path_graph(3);
        g.edge_features = Some(Array2::zeros((1, 2)));
        assert!(!validate_graph(&g).is_empty());
    }

    #[test]
    fn validate_flags_label_conflict_and_mask_overlap() {
        let mut g = path_graph(3);
        g.node_labels = Some(vec![0, 0, 1]);
        g.graph_label = Some(2);
        g.node_masks = Some(NodeMasks {
            train: vec![true, false, false],
            val: vec![true, false, false],
            test: vec![false, false, false],
        });
        let problems = validate_graph(&g);
        assert!(problems.iter().any(|p| p.contains("both node labels")));
        assert!(problems.iter().any(|p| p.contains("split parts")));
    }

    #[test]
    fn validate_flags_missing_reverse_edge() {
        let mut g = path_graph(3);
        g.edge_index.push((0, 2));
        assert!(validate_graph(&g)
            .iter()
            .any(|p| p.contains("without matching reverse")));
        g.directed = true;
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn split_100_graphs_80_10_10() {
        let graphs: Vec<Graph> = (0..100)
            .map(|i| {
                let mut g = path_graph(2);
                g.graph_label = Some(i as i64);
                g
            })
            .collect();
        let split = split_dataset(graphs, (0.8, 0.1, 0.1), 5).unwrap();
        let DatasetSplit::Graphs { train, val, test } = split else {
            panic!("expected graph split")
        };
        assert_eq!((train.len(), val.len(), test.len()), (80, 10, 10));
        let mut seen: Vec<i64> = train
            .iter()
            .chain(&val)
            .chain(&test)
            .map(|g| g.graph_label.unwrap())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<i64>>());
    }

    #[test]
    fn split_is_seed_deterministic() {
        let a = split_indices(50, (0.6, 0.2, 0.2), 9).unwrap();
        let b = split_indices(50, (0.6, 0.2, 0.2), 9).unwrap();
        let c = split_indices(50, (0.6, 0.2, 0.2), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split_indices(100, (0.8, 0.1, 0.2), 0).is_err());
        assert!(split_indices(100, (0.0, 0.5, 0.5), 0).is_err());
        assert!(split_indices(100, (1.0, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn split_rejects_empty_parts() {
        // 4 instances at (0.9, 0.05, 0.05) floor to (3, 0, 0) with two slots
        // left over: one part necessarily stays empty.
        assert!(split_indices(4, (0.9, 0.05, 0.05), 0).is_err());
        assert!(split_indices(2, (0.4, 0.3, 0.3), 0).is_err());
    }

    #[test]
    fn split_nodes_sets_disjoint_masks() {
        let split = split_nodes(path_graph(10), (0.5, 0.2, 0.3), 3).unwrap();
        let DatasetSplit::NodeGraph { graph } = split else {
            panic!("expected node split")
        };
        let masks = graph.node_masks.as_ref().unwrap();
        assert_eq!(masks.part_indices(SplitPart::Train).len(), 5);
        assert_eq!(masks.part_indices(SplitPart::Val).len(), 2);
        assert_eq!(masks.part_indices(SplitPart::Test).len(), 3);
        assert!(validate_graph(&graph).is_empty());
    }

    #[test]
    fn pool_add_and_mean() {
        let m = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(pool(&m, PoolMode::Add).unwrap(), array![9.0, 12.0]);
        assert_eq!(pool(&m, PoolMode::Mean).unwrap(), array![3.0, 4.0]);
        assert!(pool(&Array2::zeros((0, 2)), PoolMode::Add).is_err());
    }

    #[test]
    fn pool_bitwise_invariant_to_row_shuffles() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = Array2::from_shape_fn((64, 8), |(i, j)| {
            ((i * 31 + j * 17) as f64).sin() * 10f64.powi((i % 13) as i32 - 6)
        });
        let reference = pool(&m, PoolMode::Mean).unwrap();
        let mut rows: Vec<usize> = (0..64).collect();
        for _ in 0..20 {
            rows.shuffle(&mut rng);
            let shuffled = m.select(ndarray::Axis(0), &rows);
            let p = pool(&shuffled, PoolMode::Mean).unwrap();
            for (a, b) in p.iter().zip(reference.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
