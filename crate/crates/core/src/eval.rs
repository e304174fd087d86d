//! Evaluation: per-environment metrics on transformed test sets, the expert
//! invariance matrix, gate-based shift discovery, and multi-seed comparison
//! statistics.
//!
//! Environment evaluation is deterministic: every transform application draws
//! from an RNG derived from (evaluation seed, environment index, instance
//! index), so results are bitwise reproducible and independent of worker
//! scheduling. Node-task instances are evaluated one at a time with the scored
//! node anchored, so node-removing transforms never delete the instance under
//! measurement.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::graph::{DatasetSplit, Graph, SplitPart, TaskKind};
use crate::model::{BatchGraph, MoEModel, TrainedModel};
use crate::seed::stream_rng;
use crate::train::{accuracy, alignment_distance};
use crate::transforms::{apply, apply_traced, CompositeTransform, Environment, TransformSet};
use crate::{Error, Result};

/// Instance chunk size for batched graph-task forwards.
const FORWARD_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    RocAuc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::RocAuc => "roc_auc",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "accuracy" => Ok(Metric::Accuracy),
            "roc_auc" => Ok(Metric::RocAuc),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One environment's score under one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvResult {
    pub env_index: usize,
    pub env_name: String,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
}

/// Area under the ROC curve by the rank statistic, with average ranks for
/// tied scores. Labels must be 0/1 and both classes present.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "roc_auc: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!(
            "roc_auc: label {bad} is not binary"
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "roc_auc: needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).expect("finite scores"));
    // Average ranks over tie groups (ranks are 1-based).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels.iter())
        .filter(|(_, &l)| l == 1)
        .map(|(&r, _)| r)
        .sum();
    Ok((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

fn metric_value(metric: Metric, logits: &Array2<f64>, targets: &[usize]) -> Result<f64> {
    match metric {
        Metric::Accuracy => accuracy(logits, targets),
        Metric::RocAuc => {
            if logits.ncols() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "roc_auc requires binary logits, got {} classes",
                    logits.ncols()
                )));
            }
            let scores: Vec<f64> = logits
                .rows()
                .into_iter()
                .map(|r| r[1] - r[0])
                .collect();
            roc_auc(&scores, targets)
        }
    }
}

/// Score a model on every environment under every evaluation seed. Instances
/// come from the test part of the split; the identity environment scores the
/// untransformed test set, every other environment transforms each instance
/// with an RNG derived from (seed, environment index, instance index).
pub fn evaluate_environments(
    model: &TrainedModel,
    split: &DatasetSplit,
    environments: &[Environment],
    metric: Metric,
    seeds: &[u64],
) -> Result<Vec<EnvResult>> {
    if environments.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one environment and one seed".into(),
        ));
    }
    if metric == Metric::RocAuc && model.num_classes() != 2 {
        return Err(Error::InvalidArgument(format!(
            "roc_auc requires binary labels, model has {} classes",
            model.num_classes()
        )));
    }
    let mut results = Vec::with_capacity(environments.len() * seeds.len());
    for &seed in seeds {
        for env in environments {
            let value = match split {
                DatasetSplit::NodeGraph { graph } => {
                    eval_node_env(model, graph, env, metric, seed)?
                }
                DatasetSplit::Graphs { test, .. } => {
                    eval_graph_env(model, test, env, metric, seed)?
                }
            };
            results.push(EnvResult {
                env_index: env.index,
                env_name: env.name.clone(),
                metric,
                value,
                seed,
            });
        }
    }
    Ok(results)
}

fn node_test_targets(graph: &Graph) -> Result<(Vec<usize>, Vec<usize>)> {
    let masks = graph
        .node_masks
        .as_ref()
        .ok_or_else(|| Error::InvalidSplit("node-task evaluation requires split masks".into()))?;
    let labels = graph
        .node_labels
        .as_ref()
        .ok_or_else(|| Error::InvalidSplit("node-task evaluation requires node labels".into()))?;
    let test_nodes = masks.part_indices(SplitPart::Test);
    if test_nodes.is_empty() {
        return Err(Error::InvalidSplit("empty test mask".into()));
    }
    let targets = test_nodes.iter().map(|&v| labels[v] as usize).collect();
    Ok((test_nodes, targets))
}

fn eval_node_env(
    model: &TrainedModel,
    graph: &Graph,
    env: &Environment,
    metric: Metric,
    seed: u64,
) -> Result<f64> {
    let (test_nodes, targets) = node_test_targets(graph)?;
    if env.composite.is_identity() {
        let logits = model.logits_batch(&BatchGraph::single(graph)?)?;
        let picked = logits.select(Axis(0), &test_nodes);
        return metric_value(metric, &picked, &targets);
    }
    // One anchored transform and forward per test node; the anchor is
    // guaranteed to survive, so each instance scores its own logits row.
    let rows: Vec<Vec<f64>> = test_nodes
        .par_iter()
        .map(|&v| -> Result<Vec<f64>> {
            let mut rng = stream_rng(seed, "eval", &[env.index as u64, v as u64]);
            let out = apply_traced(graph, &env.composite, &mut rng, Some(v))?;
            let row = out
                .node_origin
                .iter()
                .position(|&o| o == v)
                .expect("anchored node survives");
            let logits = model.logits_batch(&BatchGraph::single(&out.graph)?)?;
            Ok(logits.row(row).to_vec())
        })
        .collect::<Result<_>>()?;
    let ncols = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let logits = Array2::from_shape_vec((test_nodes.len(), ncols), flat)
        .expect("uniform logit width");
    metric_value(metric, &logits, &targets)
}

fn graph_targets(graphs: &[Graph]) -> Result<Vec<usize>> {
    graphs
        .iter()
        .map(|g| {
            g.graph_label
                .map(|l| l as usize)
                .ok_or_else(|| Error::InvalidSplit("test graph without label".into()))
        })
        .collect()
}

fn eval_graph_env(
    model: &TrainedModel,
    test: &[Graph],
    env: &Environment,
    metric: Metric,
    seed: u64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidSplit("empty test part".into()));
    }
    let targets = graph_targets(test)?;
    let logits = if env.composite.is_identity() {
        forward_chunked(model, test)?
    } else {
        let transformed: Vec<Graph> = test
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let mut rng = stream_rng(seed, "eval", &[env.index as u64, i as u64]);
                apply(g, &env.composite, &mut rng)
            })
            .collect::<Result<_>>()?;
        forward_chunked(model, &transformed)?
    };
    metric_value(metric, &logits, &targets)
}

/// Instance logits for a graph collection, computed in parallel chunks and
/// reassembled in input order.
fn forward_chunked(model: &TrainedModel, graphs: &[Graph]) -> Result<Array2<f64>> {
    let chunks: Vec<Array2<f64>> = graphs
        .par_chunks(FORWARD_CHUNK)
        .map(|chunk| {
            let refs: Vec<&Graph> = chunk.iter().collect();
            model.logits_batch(&BatchGraph::batch(&refs)?)
        })
        .collect::<Result<_>>()?;
    let ncols = chunks[0].ncols();
    let mut out = Array2::zeros((graphs.len(), ncols));
    let mut row = 0;
    for c in chunks {
        out.slice_mut(ndarray::s![row..row + c.nrows(), ..]).assign(&c);
        row += c.nrows();
    }
    Ok(out)
}

/// How the invariance matrix is normalized for display.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Per row: (v - min) / (max - min); constant rows map to zero.
    RowMinMax,
    /// Whole matrix: v / max; the zero matrix stays zero.
    GlobalMax,
}

/// Sensitivity of each expert to each transform kind: entry (i, j), both
/// 1-based over the K non-identity components, estimates
/// E[d(expert_i(transform_j(G)), expert_0(G))].
#[derive(Debug, Clone)]
pub struct InvarianceMatrix {
    pub kind_names: Vec<String>,
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
    pub norm_mode: NormMode,
}

impl InvarianceMatrix {
    /// Rows whose diagonal entry is strictly below the mean of the row's
    /// off-diagonal entries (the pattern aligned experts should show).
    pub fn diagonal_dominant_rows(&self) -> usize {
        let k = self.raw.nrows();
        (0..k)
            .filter(|&i| {
                let off: f64 = (0..k).filter(|&j| j != i).map(|j| self.raw[(i, j)]).sum();
                k > 1 && self.raw[(i, i)] < off / (k - 1) as f64
            })
            .count()
    }
}

fn normalize_matrix(raw: &Array2<f64>, mode: NormMode) -> Array2<f64> {
    let mut out = raw.clone();
    match mode {
        NormMode::RowMinMax => {
            for mut row in out.rows_mut() {
                let mn = row.iter().copied().fold(f64::INFINITY, f64::min);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = mx - mn;
                for v in row.iter_mut() {
                    *v = if span > 0.0 { (*v - mn) / span } else { 0.0 };
                }
            }
        }
        NormMode::GlobalMax => {
            let mx = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx > 0.0 {
                out.mapv_inplace(|v| v / mx);
            }
        }
    }
    out
}

/// Monte Carlo estimate of the invariance matrix over `sample` graphs and
/// `trials` independent transform draws per (kind, trial) cell.
pub fn invariance_matrix(
    model: &MoEModel,
    sample: &[&Graph],
    set: &TransformSet,
    trials: usize,
    seed: u64,
    norm_mode: NormMode,
) -> Result<InvarianceMatrix> {
    let k = set.k_kinds();
    if sample.is_empty() || trials == 0 {
        return Err(Error::InvalidArgument(
            "invariance matrix needs a non-empty sample and at least one trial".into(),
        ));
    }
    if k == 0 || model.num_components() != k + 1 {
        return Err(Error::InvalidArgument(format!(
            "transform set spans {k} kinds, model has {} components",
            model.num_components()
        )));
    }

    // Reference representations on the clean sample, one per graph.
    let references: Vec<Array2<f64>> = sample
        .iter()
        .map(|g| model.expert_forward(g, 0))
        .collect::<Result<_>>()?;

    // Each (kind j, trial t) task accumulates one distance per expert row,
    // summed over the sample; tasks are independent and ordered afterwards.
    let tasks: Vec<(usize, usize)> = (1..=k)
        .flat_map(|j| (0..trials).map(move |t| (j, t)))
        .collect();
    let node_task = model.config.task_kind == TaskKind::Node;
    let partials: Vec<(usize, Vec<f64>)> = tasks
        .par_iter()
        .map(|&(j, t)| -> Result<(usize, Vec<f64>)> {
            let composite = CompositeTransform::single(set.specs()[j - 1]);
            let mut sums = vec![0.0; k];
            for (gi, g) in sample.iter().enumerate() {
                let mut rng =
                    stream_rng(seed, "invariance", &[j as u64, t as u64, gi as u64]);
                let out = apply_traced(g, &composite, &mut rng, None)?;
                let reference = if node_task {
                    references[gi].select(Axis(0), &out.node_origin)
                } else {
                    references[gi].clone()
                };
                let reps = model.experts_forward(&out.graph)?;
                for i in 1..=k {
                    sums[i - 1] += alignment_distance(&reps.reps[i], &reference)?;
                }
            }
            Ok((j, sums))
        })
        .collect::<Result<_>>()?;

    let mut raw = Array2::zeros((k, k));
    for (j, sums) in partials {
        for i in 1..=k {
            raw[(i - 1, j - 1)] += sums[i - 1];
        }
    }
    raw /= (trials * sample.len()) as f64;

    Ok(InvarianceMatrix {
        kind_names: set.specs().iter().map(|s| s.kind.name().to_string()).collect(),
        normalized: normalize_matrix(&raw, norm_mode),
        raw,
        norm_mode,
    })
}

/// Mean gate probabilities over a (typically unlabeled) target collection,
/// interpreted as the mixture of shifts the target carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftReport {
    /// Component names, identity first.
    pub component_names: Vec<String>,
    /// Mean per-component sigmoid probability over all instances.
    pub mean_probs: Vec<f64>,
    pub num_instances: usize,
    /// Multitask binary gate accuracy on labeled probes, when computed.
    pub gating_probe_accuracy: Option<f64>,
}

impl ShiftReport {
    /// Index of the highest-probability non-identity component.
    pub fn top_shift_component(&self) -> Option<usize> {
        (1..self.mean_probs.len()).max_by(|&a, &b| {
            self.mean_probs[a]
                .partial_cmp(&self.mean_probs[b])
                .expect("finite probabilities")
        })
    }
}

/// Mean sigmoid gate outputs over every instance of the target collection
/// (per node for node tasks, per graph for graph tasks).
pub fn discover_shifts(model: &MoEModel, target: &[&Graph]) -> Result<ShiftReport> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("empty target collection".into()));
    }
    let k1 = model.num_components();
    let mut sums = vec![0.0; k1];
    let mut count = 0usize;
    match model.config.task_kind {
        TaskKind::Node => {
            for g in target {
                let gating = model.gate_forward(g)?;
                for row in gating.probs.rows() {
                    for (c, &p) in row.iter().enumerate() {
                        sums[c] += p;
                    }
                }
                count += gating.num_instances();
            }
        }
        TaskKind::Graph => {
            let chunks: Vec<Array2<f64>> = target
                .par_chunks(FORWARD_CHUNK)
                .map(|chunk| {
                    let refs: Vec<&Graph> = chunk.iter().copied().collect();
                    Ok(model.gate_forward_batch(&BatchGraph::batch(&refs)?)?.probs)
                })
                .collect::<Result<_>>()?;
            for probs in chunks {
                for row in probs.rows() {
                    for (c, &p) in row.iter().enumerate() {
                        sums[c] += p;
                    }
                }
                count += probs.nrows();
            }
        }
    }
    let mut component_names = vec!["identity".to_string()];
    component_names.extend(model.kind_names.iter().cloned());
    Ok(ShiftReport {
        component_names,
        mean_probs: sums.into_iter().map(|s| s / count as f64).collect(),
        num_instances: count,
        gating_probe_accuracy: None,
    })
}

/// Multitask binary accuracy of the gate on planted probes: every source
/// instance is presented untransformed and once per single kind, and each of
/// the gate's K+1 thresholded outputs is scored against the planted
/// indicator. Node-task probes score only rows originating from test-mask
/// nodes when masks are present.
pub fn gating_probe_accuracy(
    model: &MoEModel,
    source: &[&Graph],
    set: &TransformSet,
    seed: u64,
) -> Result<f64> {
    let k = set.k_kinds();
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty probe source".into()));
    }
    if model.num_components() != k + 1 {
        return Err(Error::InvalidArgument(format!(
            "transform set spans {k} kinds, model has {} components",
            model.num_components()
        )));
    }
    let node_task = model.config.task_kind == TaskKind::Node;
    let composites: Vec<CompositeTransform> = std::iter::once(CompositeTransform::identity())
        .chain(set.specs().iter().map(|&s| CompositeTransform::single(s)))
        .collect();

    let tasks: Vec<(usize, usize)> = (0..source.len())
        .flat_map(|gi| (0..composites.len()).map(move |ci| (gi, ci)))
        .collect();
    let counts: Vec<(usize, usize)> = tasks
        .par_iter()
        .map(|&(gi, ci)| -> Result<(usize, usize)> {
            let g = source[gi];
            let composite = &composites[ci];
            let bits = set.mixture_label(composite)?.bits;
            let mut rng = stream_rng(seed, "probe", &[gi as u64, ci as u64]);
            let out = apply_traced(g, composite, &mut rng, None)?;
            let gating = model.gate_forward(&out.graph)?;
            let scored_rows: Vec<usize> = if node_task {
                match &g.node_masks {
                    Some(masks) => out
                        .node_origin
                        .iter()
                        .enumerate()
                        .filter_map(|(row, &orig)| masks.test[orig].then_some(row))
                        .collect(),
                    None => (0..gating.num_instances()).collect(),
                }
            } else {
                (0..gating.num_instances()).collect()
            };
            let mut hits = 0;
            let mut total = 0;
            for &row in &scored_rows {
                for (c, &bit) in bits.iter().enumerate() {
                    if (gating.probs[(row, c)] > 0.5) == bit {
                        hits += 1;
                    }
                    total += 1;
                }
            }
            Ok((hits, total))
        })
        .collect::<Result<_>>()?;
    let (hits, total) = counts
        .into_iter()
        .fold((0usize, 0usize), |(h, t), (dh, dt)| (h + dh, t + dt));
    if total == 0 {
        return Err(Error::InvalidSplit(
            "no probe rows to score (empty test masks?)".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

/// Welch's unequal-variance t statistic and two-sided p-value.
///
/// When both samples have zero variance the statistic is undefined; the
/// result is flagged `degenerate` with p = 1 for equal means (no evidence of
/// a difference) and p = 0 otherwise, with t and dof reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

fn mean_and_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "welch_t_test: need at least 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_and_var(a);
    let (mb, vb) = mean_and_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va / na;
    let sb = vb / nb;
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(WelchResult {
            t: 0.0,
            dof: 0.0,
            p_value: if ma == mb { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(WelchResult {
        t,
        dof,
        p_value,
        degenerate: false,
    })
}

/// Mean and standard deviation per side plus the Welch comparison; sides are
/// per-seed metric values for a method and its baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub n_a: usize,
    pub mean_a: f64,
    pub std_a: f64,
    pub n_b: usize,
    pub mean_b: f64,
    pub std_b: f64,
    pub welch: WelchResult,
}

pub fn summarize_trials(a: &[f64], b: &[f64]) -> Result<TrialSummary> {
    let welch = welch_t_test(a, b)?;
    let (mean_a, var_a) = mean_and_var(a);
    let (mean_b, var_b) = mean_and_var(b);
    Ok(TrialSummary {
        n_a: a.len(),
        mean_a,
        std_a: var_a.sqrt(),
        n_b: b.len(),
        mean_b,
        std_b: var_b.sqrt(),
        welch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{split_nodes, PoolMode};
    use crate::model::{AggregationMode, ExpertMode, MoEConfig, SingleModel, SingleModelConfig};
    use crate::nn::layers::EncoderConfig;
    use crate::nn::Activation;
    use crate::transforms::{TransformKind, TransformSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn encoder_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden_dim: 8,
            activation: Activation::Elu,
            dropout: 0.0,
        }
    }

    fn moe(task_kind: TaskKind, set: &TransformSet, seed: u64) -> MoEModel {
        MoEModel::new(
            MoEConfig {
                task_kind,
                feature_dim: 3,
                num_classes: 2,
                encoder: encoder_cfg(),
                expert_mode: ExpertMode::IndependentEncoders,
                aggregation: AggregationMode::SoftmaxSum,
                pooling: PoolMode::Add,
            },
            set,
            seed,
        )
        .unwrap()
    }

    fn ring(n: usize) -> Graph {
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push((i, (i + 1) % n));
            edges.push(((i + 1) % n, i));
        }
        let mut g = Graph::new(
            Array2::from_shape_fn((n, 3), |(i, j)| ((i % 2) as f64 * 2.0 - 1.0) + 0.1 * j as f64),
            edges,
            false,
        );
        g.node_labels = Some((0..n).map(|i| (i % 2) as i64).collect());
        g
    }

    fn node_split(n: usize, seed: u64) -> DatasetSplit {
        split_nodes(ring(n), (0.6, 0.2, 0.2), seed).unwrap()
    }

    fn graph_collection(count: usize) -> Vec<Graph> {
        (0..count)
            .map(|i| {
                let mut g = ring(6 + i % 3);
                g.node_labels = None;
                g.graph_label = Some((i % 2) as i64);
                g
            })
            .collect()
    }

    #[test]
    fn roc_auc_matches_rank_oracle_with_ties() {
        let labels = [1, 0, 1, 1, 0, 0, 1, 0];
        let scores = [0.9, 0.8, 0.8, 0.7, 0.3, 0.7, 0.2, 0.1];
        assert_abs_diff_eq!(roc_auc(&scores, &labels).unwrap(), 0.6875, epsilon = 1e-15);
    }

    #[test]
    fn roc_auc_extremes_and_errors() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            roc_auc(&[0.5, 0.5, 0.5], &[1, 0, 1]).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert!(roc_auc(&[0.5, 0.6], &[1, 1]).is_err());
        assert!(roc_auc(&[0.5], &[2]).is_err());
    }

    #[test]
    fn welch_matches_reference_values() {
        // Frozen against an independent statistics implementation.
        let a = [0.82, 0.79, 0.85, 0.81, 0.80];
        let b = [0.70, 0.74, 0.69, 0.72, 0.75];
        let r = welch_t_test(&a, &b).unwrap();
        assert_abs_diff_eq!(r.t, 6.118878816098729, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dof, 7.918112027295987, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.00029552724384547335, epsilon = 1e-9);
        assert!(!r.degenerate);

        // Equal means, unequal sizes: t = 0, p = 1.
        let r = welch_t_test(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5, 3.5]).unwrap();
        assert_eq!(r.t, 0.0);
        assert_abs_diff_eq!(r.dof, 4.959183673469387, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);

        let r = welch_t_test(&[10.0, 11.0], &[10.5, 12.5, 9.0, 11.0, 10.2]).unwrap();
        assert_abs_diff_eq!(r.t, -0.18469078399962563, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dof, 3.71634810795746, epsilon = 1e-11);
        assert_abs_diff_eq!(r.p_value, 0.8631070105680871, epsilon = 1e-9);
    }

    #[test]
    fn welch_degenerate_and_size_errors() {
        let r = welch_t_test(&[0.5, 0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        let r = welch_t_test(&[0.5, 0.5], &[0.7, 0.7]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn summarize_trials_reports_sample_stats() {
        let s = summarize_trials(&[2.0, 4.0, 6.0], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.mean_a, 4.0);
        assert_abs_diff_eq!(s.std_a, 2.0, epsilon = 1e-15);
        assert_eq!(s.mean_b, 1.0);
        assert_eq!(s.std_b, 0.0);
        assert_eq!((s.n_a, s.n_b), (3, 4));
    }

    #[test]
    fn identity_environment_equals_plain_evaluation() {
        let set = TransformSet::default_synthetic();
        let model = TrainedModel::Moe(moe(TaskKind::Node, &set, 3));
        let split = node_split(20, 5);
        let envs = set.enumerate_environments(2).unwrap();
        let results =
            evaluate_environments(&model, &split, &envs[..1], Metric::Accuracy, &[7]).unwrap();
        let DatasetSplit::NodeGraph { graph } = &split else {
            panic!()
        };
        let (test_nodes, targets) = node_test_targets(graph).unwrap();
        let logits = model.logits_batch(&BatchGraph::single(graph).unwrap()).unwrap();
        let picked = logits.select(Axis(0), &test_nodes);
        let plain = accuracy(&picked, &targets).unwrap();
        assert_eq!(results[0].value.to_bits(), plain.to_bits());
        assert_eq!(results[0].env_name, "identity");
    }

    #[test]
    fn environment_results_are_deterministic_and_complete() {
        let set = TransformSet::default_synthetic();
        let model = TrainedModel::Moe(moe(TaskKind::Node, &set, 1));
        let split = node_split(24, 2);
        let envs = set.enumerate_environments(2).unwrap();
        assert_eq!(envs.len(), 14);
        let a = evaluate_environments(&model, &split, &envs, Metric::Accuracy, &[3, 4]).unwrap();
        let b = evaluate_environments(&model, &split, &envs, Metric::Accuracy, &[3, 4]).unwrap();
        assert_eq!(a.len(), 28);
        for (ra, rb) in a.iter().zip(b.iter()) {
            assert_eq!(ra.value.to_bits(), rb.value.to_bits());
            assert!((0.0..=1.0).contains(&ra.value));
        }
        // Different eval seeds may and typically do differ somewhere.
        let seeds_differ = a
            .iter()
            .take(14)
            .zip(a.iter().skip(14))
            .any(|(r3, r4)| r3.value != r4.value);
        assert!(seeds_differ || a.iter().all(|r| r.value == a[0].value));
    }

    #[test]
    fn graph_task_environments_cover_all_graphs() {
        let set = TransformSet::from_kinds(&[TransformKind::DropEdge, TransformKind::NoisyNodeFeat])
            .unwrap();
        let graphs = graph_collection(30);
        let split = crate::graph::split_dataset(graphs, (0.5, 0.2, 0.3), 11).unwrap();
        let model = TrainedModel::Moe(moe(TaskKind::Graph, &set, 4));
        let envs = set.enumerate_environments(2).unwrap();
        // identity + 2 singles + 1 pair.
        assert_eq!(envs.len(), 4);
        let results =
            evaluate_environments(&model, &split, &envs, Metric::RocAuc, &[9]).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!((0.0..=1.0).contains(&r.value));
            assert_eq!(r.metric, Metric::RocAuc);
        }
    }

    #[test]
    fn roc_auc_rejects_multiclass_model() {
        let set = TransformSet::default_synthetic();
        let mut cfg = MoEConfig {
            task_kind: TaskKind::Node,
            feature_dim: 3,
            num_classes: 3,
            encoder: encoder_cfg(),
            expert_mode: ExpertMode::IndependentEncoders,
            aggregation: AggregationMode::SoftmaxSum,
            pooling: PoolMode::Add,
        };
        cfg.num_classes = 3;
        let model = TrainedModel::Moe(MoEModel::new(cfg, &set, 0).unwrap());
        let split = node_split(20, 1);
        let envs = set.enumerate_environments(2).unwrap();
        assert!(matches!(
            evaluate_environments(&model, &split, &envs, Metric::RocAuc, &[0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    /// Copy expert 0's parameters into every other expert, making all experts
    /// the same function.
    fn clone_expert0_into_all(model: &mut MoEModel) {
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            if let Some(rest) = name.strip_prefix("expert") {
                let (idx, tail) = rest.split_once('.').unwrap();
                if idx != "0" {
                    let source_name = format!("expert0.{tail}");
                    let source = model
                        .params
                        .ids()
                        .find(|&s| model.params.name(s) == source_name)
                        .unwrap();
                    let value = model.params.get(source).clone();
                    model.params.get_mut(id).assign(&value);
                }
            }
        }
    }

    #[test]
    fn identical_experts_and_inert_transforms_give_zero_matrix() {
        // Zero-strength domains: every kind leaves the graph untouched.
        let set = TransformSet::new(vec![
            TransformSpec {
                kind: TransformKind::DropEdge,
                param_domain: (0.0, 0.0),
                fill_value: 0.0,
            },
            TransformSpec {
                kind: TransformKind::AddEdge,
                param_domain: (0.0, 0.0),
                fill_value: 0.0,
            },
            TransformSpec {
                kind: TransformKind::NoisyNodeFeat,
                param_domain: (0.0, 0.0),
                fill_value: 0.0,
            },
        ])
        .unwrap();
        let mut model = moe(TaskKind::Node, &set, 8);
        clone_expert0_into_all(&mut model);
        let g = ring(10);
        let m = invariance_matrix(&model, &[&g], &set, 5, 0, NormMode::GlobalMax).unwrap();
        assert!(m.raw.iter().all(|&v| v == 0.0), "raw = {:?}", m.raw);
        assert!(m.normalized.iter().all(|&v| v == 0.0));
        assert_eq!(m.kind_names, vec!["drop_edge", "add_edge", "noisy_node_feat"]);
    }

    #[test]
    fn invariance_matrix_is_nonnegative_deterministic_and_normalized() {
        let set = TransformSet::from_kinds(&[
            TransformKind::DropEdge,
            TransformKind::NoisyNodeFeat,
        ])
        .unwrap();
        let model = moe(TaskKind::Node, &set, 2);
        let g = ring(12);
        let a = invariance_matrix(&model, &[&g], &set, 10, 4, NormMode::RowMinMax).unwrap();
        let b = invariance_matrix(&model, &[&g], &set, 10, 4, NormMode::RowMinMax).unwrap();
        assert_eq!(a.raw, b.raw);
        assert!(a.raw.iter().all(|&v| v >= 0.0));
        for row in a.normalized.rows() {
            for &v in row {
                assert!((0.0..=1.0).contains(&v));
            }
            // Min-max rows contain an exact 0 and (for non-constant rows) a 1.
            assert_eq!(row.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        }
        // Untrained experts differ, so some sensitivity is non-zero.
        assert!(a.raw.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn invariance_estimate_stabilizes_with_more_trials() {
        let set = TransformSet::from_kinds(&[
            TransformKind::DropEdge,
            TransformKind::MaskNodeFeat,
        ])
        .unwrap();
        let model = moe(TaskKind::Node, &set, 6);
        let g = ring(14);
        let coarse = invariance_matrix(&model, &[&g], &set, 100, 1, NormMode::GlobalMax).unwrap();
        let fine = invariance_matrix(&model, &[&g], &set, 200, 1, NormMode::GlobalMax).unwrap();
        for (c, f) in coarse.raw.iter().zip(fine.raw.iter()) {
            let rel = (c - f).abs() / f.max(1e-12);
            assert!(rel < 0.05, "doubling trials moved an entry by {rel}");
        }
    }

    #[test]
    fn discover_shifts_reports_probabilities_per_component() {
        let set = TransformSet::default_synthetic();
        let model = moe(TaskKind::Node, &set, 5);
        let g = ring(16);
        let report = discover_shifts(&model, &[&g]).unwrap();
        assert_eq!(report.mean_probs.len(), 6);
        assert_eq!(report.component_names[0], "identity");
        assert_eq!(report.component_names[3], "drop_edge");
        assert_eq!(report.num_instances, 16);
        assert!(report.mean_probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(report.gating_probe_accuracy.is_none());
        assert!(report.top_shift_component().unwrap() >= 1);
    }

    #[test]
    fn gating_probe_accuracy_is_a_valid_rate() {
        let set = TransformSet::from_kinds(&[TransformKind::DropEdge, TransformKind::DropNode])
            .unwrap();
        let split = node_split(20, 3);
        let DatasetSplit::NodeGraph { graph } = &split else {
            panic!()
        };
        let model = moe(TaskKind::Node, &set, 9);
        let acc = gating_probe_accuracy(&model, &[graph], &set, 17).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        // Deterministic under the same seed.
        let again = gating_probe_accuracy(&model, &[graph], &set, 17).unwrap();
        assert_eq!(acc.to_bits(), again.to_bits());
    }

    #[test]
    fn single_model_environment_evaluation_works() {
        let set = TransformSet::default_synthetic();
        let model = TrainedModel::Single(
            SingleModel::new(
                SingleModelConfig {
                    task_kind: TaskKind::Node,
                    feature_dim: 3,
                    num_classes: 2,
                    encoder: encoder_cfg(),
                    pooling: PoolMode::Add,
                },
                7,
            )
            .unwrap(),
        );
        let split = node_split(20, 9);
        let envs = set.enumerate_environments(1).unwrap();
        let results =
            evaluate_environments(&model, &split, &envs, Metric::Accuracy, &[1]).unwrap();
        assert_eq!(results.len(), 6);
    }

    #[test]
    fn normalization_modes_differ_in_shape_only() {
        let raw = array![[0.2, 0.4], [0.1, 0.8]];
        let row = normalize_matrix(&raw, NormMode::RowMinMax);
        assert_eq!(row, array![[0.0, 1.0], [0.0, 1.0]]);
        let global = normalize_matrix(&raw, NormMode::GlobalMax);
        assert_abs_diff_eq!(global[(0, 0)], 0.25, epsilon = 1e-15);
        assert_eq!(global[(1, 1)], 1.0);
    }
}
