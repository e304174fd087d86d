//! The mixture-of-aligned-experts model and its single-encoder baseline.
//!
//! The mixture model owns three parts:
//! - a *gate*: an encoder plus linear head scoring, per instance, how strongly
//!   each of the K+1 components (identity + K transform kinds) applies;
//! - *experts*: one representation function per component, either fully
//!   independent encoders or one shared trunk with per-component heads;
//! - a *classifier* consuming the aggregated representation.
//!
//! Aggregation mixes expert outputs with the gate's softmax weights (or picks
//! the argmax expert). Expert 0 doubles as the reference representation that
//! the training objective aligns the others to.
//!
//! Encoders consume node features and topology; edge features ride along in
//! the data model but are not fed to the network.
//!
//! Instance rows: node tasks produce one row per node, graph tasks pool node
//! rows per graph (so a batch of B graphs yields B rows).

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, PoolMode, TaskKind};
use crate::nn::layers::{Encoder, EncoderConfig, EdgeEndpoints, Linear};
use crate::nn::{sigmoid, ParamSet, Session, Var};
use crate::seed::stream_rng;
use crate::transforms::TransformSet;
use crate::{Error, Result};

/// How experts share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    /// One full encoder per component.
    IndependentEncoders,
    /// One shared encoder trunk with a linear head per component.
    SharedEncoderWithHeads,
}

/// How gate scores combine expert outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Convex combination under a row softmax of the gate scores.
    SoftmaxSum,
    /// Hard selection of the top-scoring expert per instance.
    ArgmaxSelect,
}

/// Architecture knobs shared by every training method; the trainer combines
/// them with the task shape (feature width, class count) to build a
/// [`MoEConfig`] or [`SingleModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub encoder: EncoderConfig,
    pub expert_mode: ExpertMode,
    pub aggregation: AggregationMode,
    pub pooling: PoolMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub task_kind: TaskKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub expert_mode: ExpertMode,
    pub aggregation: AggregationMode,
    /// Node-to-graph pooling (graph tasks only).
    pub pooling: PoolMode,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes = {} below 2",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// A graph (or disjoint union of graphs) laid out for the tape.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub features: Array2<f64>,
    pub edges: EdgeEndpoints,
    /// Graph id per node row.
    pub segments: Rc<Vec<usize>>,
    pub num_graphs: usize,
}

impl BatchGraph {
    pub fn single(g: &Graph) -> Result<Self> {
        Self::batch(&[g])
    }

    /// Disjoint union with node ids offset per graph.
    pub fn batch(graphs: &[&Graph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let d = graphs[0].feature_dim();
        let total_nodes: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut features = Array2::zeros((total_nodes, d));
        let mut edge_index = Vec::new();
        let mut segments = Vec::with_capacity(total_nodes);
        let mut offset = 0;
        for (gid, g) in graphs.iter().enumerate() {
            if g.feature_dim() != d {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes feature widths {d} and {}",
                    g.feature_dim()
                )));
            }
            if g.num_nodes() == 0 {
                return Err(Error::InvalidArgument(format!("graph {gid} has no nodes")));
            }
            features
                .slice_mut(ndarray::s![offset..offset + g.num_nodes(), ..])
                .assign(&g.node_features);
            for &(s, t) in &g.edge_index {
                edge_index.push((s + offset, t + offset));
            }
            segments.extend(std::iter::repeat(gid).take(g.num_nodes()));
            offset += g.num_nodes();
        }
        Ok(Self {
            features,
            edges: EdgeEndpoints::with_self_loops(&edge_index, total_nodes),
            segments: Rc::new(segments),
            num_graphs: graphs.len(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }
}

/// Gate output per instance row: raw scores, independent per-component
/// probabilities (sigmoid), and mixing weights (row softmax).
#[derive(Debug, Clone)]
pub struct GatingOutput {
    pub scores: Array2<f64>,
    pub probs: Array2<f64>,
    pub weights: Array2<f64>,
}

impl GatingOutput {
    pub fn from_scores(scores: Array2<f64>) -> Self {
        let probs = scores.mapv(sigmoid);
        let mut weights = scores.clone();
        for mut row in weights.rows_mut() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Self { scores, probs, weights }
    }

    pub fn num_instances(&self) -> usize {
        self.scores.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.scores.ncols()
    }
}

/// Expert representations per component, each `instances x hidden_dim`.
#[derive(Debug, Clone)]
pub struct ExpertOutputs {
    pub reps: Vec<Array2<f64>>,
}

/// Full forward pass output.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Array2<f64>,
    pub mixed_rep: Array2<f64>,
    pub gating: GatingOutput,
    pub experts: ExpertOutputs,
}

#[derive(Debug, Clone)]
enum ExpertBank {
    Independent(Vec<Encoder>),
    Shared { trunk: Encoder, heads: Vec<Linear> },
}

/// Gate + experts + classifier.
#[derive(Debug, Clone)]
pub struct MoEModel {
    pub config: MoEConfig,
    /// Kind names of components 1..=K (component 0 is identity).
    pub kind_names: Vec<String>,
    pub params: ParamSet,
    gate_encoder: Encoder,
    gate_head: Linear,
    experts: ExpertBank,
    classifier: Linear,
}

impl MoEModel {
    /// Initialize for the given transform set; parameter init is a pure
    /// function of the seed and shapes.
    pub fn new(config: MoEConfig, set: &TransformSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let kind_names: Vec<String> = set
            .specs()
            .iter()
            .map(|s| s.kind.name().to_string())
            .collect();
        let k1 = kind_names.len() + 1;
        let h = config.encoder.hidden_dim;
        let mut params = ParamSet::new();
        let mut rng = stream_rng(seed, "init", &[]);

        let gate_encoder = Encoder::new(&mut params, "gate.enc", config.feature_dim, config.encoder, &mut rng);
        let gate_head = Linear::new(&mut params, "gate.head", h, k1, &mut rng);
        let experts = match config.expert_mode {
            ExpertMode::IndependentEncoders => ExpertBank::Independent(
                (0..k1)
                    .map(|i| {
                        Encoder::new(
                            &mut params,
                            &format!("expert{i}.enc"),
                            config.feature_dim,
                            config.encoder,
                            &mut rng,
                        )
                    })
                    .collect(),
            ),
            ExpertMode::SharedEncoderWithHeads => ExpertBank::Shared {
                trunk: Encoder::new(&mut params, "trunk.enc", config.feature_dim, config.encoder, &mut rng),
                heads: (0..k1)
                    .map(|i| Linear::new(&mut params, &format!("expert{i}.head"), h, h, &mut rng))
                    .collect(),
            },
        };
        let classifier = Linear::new(&mut params, "classifier", h, config.num_classes, &mut rng);
        Ok(Self {
            config,
            kind_names,
            params,
            gate_encoder,
            gate_head,
            experts,
            classifier,
        })
    }

    pub fn num_components(&self) -> usize {
        self.kind_names.len() + 1
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.encoder.hidden_dim
    }

    /// Collapse node rows to instance rows (node task: identity; graph task:
    /// segment pooling).
    fn to_instance_rows(&self, s: &mut Session, node_reps: Var, b: &BatchGraph) -> Result<Var> {
        match self.config.task_kind {
            TaskKind::Node => Ok(node_reps),
            TaskKind::Graph => s.tape.segment_pool(
                node_reps,
                b.segments.clone(),
                b.num_graphs,
                self.config.pooling,
            ),
        }
    }

    /// Gate scores, `instances x (K+1)`, on an open tape.
    pub(crate) fn gate_scores_t(
        &self,
        s: &mut Session,
        b: &BatchGraph,
        dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var> {
        let x = s.tape.leaf(b.features.clone());
        let node_reps = self.gate_encoder.forward(s, x, &b.edges, dropout_rng)?;
        let inst = self.to_instance_rows(s, node_reps, b)?;
        self.gate_head.forward(s, inst)
    }

    /// Expert representations, one `instances x hidden` var per component, on
    /// an open tape. Dropout draws are consumed expert by expert.
    pub(crate) fn expert_reps_t(
        &self,
        s: &mut Session,
        b: &BatchGraph,
        mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let x = s.tape.leaf(b.features.clone());
        match &self.experts {
            ExpertBank::Independent(encs) => encs
                .iter()
                .map(|enc| {
                    let node_reps = enc.forward(s, x, &b.edges, dropout_rng.as_deref_mut())?;
                    self.to_instance_rows(s, node_reps, b)
                })
                .collect(),
            ExpertBank::Shared { trunk, heads } => {
                let node_reps = trunk.forward(s, x, &b.edges, dropout_rng.as_deref_mut())?;
                let shared = self.to_instance_rows(s, node_reps, b)?;
                heads.iter().map(|head| head.forward(s, shared)).collect()
            }
        }
    }

    /// Single expert's representation on an open tape.
    pub(crate) fn expert_rep_t(
        &self,
        s: &mut Session,
        b: &BatchGraph,
        component: usize,
    ) -> Result<Var> {
        if component >= self.num_components() {
            return Err(Error::InvalidArgument(format!(
                "component {component} outside 0..{}",
                self.num_components()
            )));
        }
        let x = s.tape.leaf(b.features.clone());
        match &self.experts {
            ExpertBank::Independent(encs) => {
                let node_reps = encs[component].forward(s, x, &b.edges, None)?;
                self.to_instance_rows(s, node_reps, b)
            }
            ExpertBank::Shared { trunk, heads } => {
                let node_reps = trunk.forward(s, x, &b.edges, None)?;
                let shared = self.to_instance_rows(s, node_reps, b)?;
                heads[component].forward(s, shared)
            }
        }
    }

    /// Mix expert vars under gate scores on an open tape. `scores` should be
    /// detached upstream if the gate must not receive gradients from the
    /// downstream loss.
    pub(crate) fn aggregate_t(
        &self,
        s: &mut Session,
        scores: Var,
        reps: &[Var],
    ) -> Result<Var> {
        let k1 = self.num_components();
        if reps.len() != k1 {
            return Err(Error::ShapeMismatch(format!(
                "{} expert outputs for {k1} components",
                reps.len()
            )));
        }
        let alpha = match self.config.aggregation {
            AggregationMode::SoftmaxSum => s.tape.row_softmax(scores),
            AggregationMode::ArgmaxSelect => {
                let sv = s.tape.value(scores);
                let mut hard = Array2::zeros(sv.dim());
                for (r, row) in sv.rows().into_iter().enumerate() {
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    hard[(r, best)] = 1.0;
                }
                s.tape.leaf(hard)
            }
        };
        let mut mixed: Option<Var> = None;
        for (i, &rep) in reps.iter().enumerate() {
            let col = s.tape.gather_cols(alpha, Rc::new(vec![i]))?;
            let term = s.tape.mul_col(rep, col)?;
            mixed = Some(match mixed {
                None => term,
                Some(acc) => s.tape.add(acc, term)?,
            });
        }
        Ok(mixed.expect("at least one component"))
    }

    pub(crate) fn classify_t(&self, s: &mut Session, h: Var) -> Result<Var> {
        self.classifier.forward(s, h)
    }

    /// Gate scores for one (possibly transformed) graph.
    pub fn gate_forward(&self, g: &Graph) -> Result<GatingOutput> {
        let b = BatchGraph::single(g)?;
        self.gate_forward_batch(&b)
    }

    pub fn gate_forward_batch(&self, b: &BatchGraph) -> Result<GatingOutput> {
        let mut s = Session::new(&self.params);
        let scores = self.gate_scores_t(&mut s, b, None)?;
        Ok(GatingOutput::from_scores(s.tape.value(scores).clone()))
    }

    /// All expert representations for one graph.
    pub fn experts_forward(&self, g: &Graph) -> Result<ExpertOutputs> {
        let b = BatchGraph::single(g)?;
        self.experts_forward_batch(&b)
    }

    pub fn experts_forward_batch(&self, b: &BatchGraph) -> Result<ExpertOutputs> {
        let mut s = Session::new(&self.params);
        let vars = self.expert_reps_t(&mut s, b, None)?;
        Ok(ExpertOutputs {
            reps: vars.into_iter().map(|v| s.tape.value(v).clone()).collect(),
        })
    }

    /// One expert's representation for one graph.
    pub fn expert_forward(&self, g: &Graph, component: usize) -> Result<Array2<f64>> {
        let b = BatchGraph::single(g)?;
        let mut s = Session::new(&self.params);
        let v = self.expert_rep_t(&mut s, &b, component)?;
        Ok(s.tape.value(v).clone())
    }

    /// Mix precomputed expert outputs under gate output.
    pub fn aggregate(&self, gating: &GatingOutput, experts: &ExpertOutputs) -> Result<Array2<f64>> {
        let k1 = self.num_components();
        if gating.num_components() != k1 || experts.reps.len() != k1 {
            return Err(Error::ShapeMismatch(format!(
                "aggregate: {} gate columns / {} experts for {k1} components",
                gating.num_components(),
                experts.reps.len()
            )));
        }
        let params = ParamSet::new();
        let mut s = Session::new(&params);
        let scores = s.tape.leaf(gating.scores.clone());
        let reps: Vec<Var> = experts
            .reps
            .iter()
            .map(|r| s.tape.leaf(r.clone()))
            .collect();
        let mixed = self.aggregate_t(&mut s, scores, &reps)?;
        Ok(s.tape.value(mixed).clone())
    }

    /// Class logits for representation rows.
    pub fn classify(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        if h.ncols() != self.hidden_dim() {
            return Err(Error::ShapeMismatch(format!(
                "classify: {} columns for hidden width {}",
                h.ncols(),
                self.hidden_dim()
            )));
        }
        let mut s = Session::new(&self.params);
        let hv = s.tape.leaf(h.clone());
        let logits = self.classify_t(&mut s, hv)?;
        Ok(s.tape.value(logits).clone())
    }

    /// Full pass: gate, experts, aggregation, classification, composed from
    /// the public pieces.
    pub fn model_forward(&self, g: &Graph) -> Result<ModelOutput> {
        let gating = self.gate_forward(g)?;
        let experts = self.experts_forward(g)?;
        let mixed_rep = self.aggregate(&gating, &experts)?;
        let logits = self.classify(&mixed_rep)?;
        Ok(ModelOutput {
            logits,
            mixed_rep,
            gating,
            experts,
        })
    }

    /// Class logits per instance row for a prepared batch.
    pub fn logits_batch(&self, b: &BatchGraph) -> Result<Array2<f64>> {
        let mut s = Session::new(&self.params);
        let scores = self.gate_scores_t(&mut s, b, None)?;
        let reps = self.expert_reps_t(&mut s, b, None)?;
        let mixed = self.aggregate_t(&mut s, scores, &reps)?;
        let logits = self.classify_t(&mut s, mixed)?;
        Ok(s.tape.value(logits).clone())
    }
}

/// Plain encoder + classifier used by the ERM baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleModelConfig {
    pub task_kind: TaskKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub pooling: PoolMode,
}

impl SingleModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.feature_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(
                "feature_dim must be positive and num_classes >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SingleModel {
    pub config: SingleModelConfig,
    pub params: ParamSet,
    encoder: Encoder,
    classifier: Linear,
}

impl SingleModel {
    pub fn new(config: SingleModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = stream_rng(seed, "init", &[]);
        let encoder = Encoder::new(&mut params, "enc", config.feature_dim, config.encoder, &mut rng);
        let classifier = Linear::new(
            &mut params,
            "classifier",
            config.encoder.hidden_dim,
            config.num_classes,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            encoder,
            classifier,
        })
    }

    pub(crate) fn logits_t(
        &self,
        s: &mut Session,
        b: &BatchGraph,
        dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var> {
        let x = s.tape.leaf(b.features.clone());
        let node_reps = self.encoder.forward(s, x, &b.edges, dropout_rng)?;
        let inst = match self.config.task_kind {
            TaskKind::Node => node_reps,
            TaskKind::Graph => s.tape.segment_pool(
                node_reps,
                b.segments.clone(),
                b.num_graphs,
                self.config.pooling,
            )?,
        };
        self.classifier.forward(s, inst)
    }

    pub fn logits_batch(&self, b: &BatchGraph) -> Result<Array2<f64>> {
        let mut s = Session::new(&self.params);
        let logits = self.logits_t(&mut s, b, None)?;
        Ok(s.tape.value(logits).clone())
    }
}

/// Either trained model, as produced by the trainer and stored in checkpoints.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Moe(MoEModel),
    Single(SingleModel),
}

impl TrainedModel {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            TrainedModel::Moe(m) => m.config.task_kind,
            TrainedModel::Single(m) => m.config.task_kind,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TrainedModel::Moe(m) => m.config.num_classes,
            TrainedModel::Single(m) => m.config.num_classes,
        }
    }

    /// Instance logits for a prepared batch.
    pub fn logits_batch(&self, b: &BatchGraph) -> Result<Array2<f64>> {
        match self {
            TrainedModel::Moe(m) => m.logits_batch(b),
            TrainedModel::Single(m) => m.logits_batch(b),
        }
    }

    pub fn as_moe(&self) -> Option<&MoEModel> {
        match self {
            TrainedModel::Moe(m) => Some(m),
            TrainedModel::Single(_) => None,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            TrainedModel::Moe(m) => &m.params,
            TrainedModel::Single(m) => &m.params,
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Which model a checkpoint stores, with enough config to rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointModel {
    Moe {
        config: MoEConfig,
        kind_names: Vec<String>,
    },
    Single { config: SingleModelConfig },
}

/// Serialized model plus run provenance.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Hash of the experiment config that produced the run (opaque here).
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub model: CheckpointModel,
    params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel, config_hash: &str, seed: u64, method: &str) -> Self {
        let model_spec = match model {
            TrainedModel::Moe(m) => CheckpointModel::Moe {
                config: m.config,
                kind_names: m.kind_names.clone(),
            },
            TrainedModel::Single(m) => CheckpointModel::Single { config: m.config },
        };
        let params = model
            .params()
            .iter()
            .map(|(name, v)| ParamRecord {
                name: name.to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
                values: v.iter().copied().collect(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            method: method.to_string(),
            model: model_spec,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the model, restoring every parameter by name with shape
    /// checks. `expected_set` cross-checks the active transform kinds the
    /// checkpointed gate was trained against.
    pub fn into_model(self, expected_set: Option<&TransformSet>) -> Result<TrainedModel> {
        let mut model = match &self.model {
            CheckpointModel::Moe { config, kind_names } => {
                if let Some(set) = expected_set {
                    let expected: Vec<String> = set
                        .specs()
                        .iter()
                        .map(|s| s.kind.name().to_string())
                        .collect();
                    if &expected != kind_names {
                        return Err(Error::CheckpointMismatch(format!(
                            "checkpoint components {kind_names:?} do not match active set {expected:?}"
                        )));
                    }
                }
                let set = TransformSet::new(
                    kind_names
                        .iter()
                        .map(|n| {
                            crate::transforms::TransformKind::parse(n)
                                .map(crate::transforms::TransformSpec::with_defaults)
                        })
                        .collect::<Result<Vec<_>>>()?,
                )?;
                TrainedModel::Moe(MoEModel::new(*config, &set, 0)?)
            }
            CheckpointModel::Single { config } => TrainedModel::Single(SingleModel::new(*config, 0)?),
        };
        let params = match &mut model {
            TrainedModel::Moe(m) => &mut m.params,
            TrainedModel::Single(m) => &mut m.params,
        };
        if params.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint stores {} tensors, model defines {}",
                self.params.len(),
                params.len()
            )));
        }
        for rec in &self.params {
            let id = params
                .ids()
                .find(|&id| params.name(id) == rec.name)
                .ok_or_else(|| {
                    Error::CheckpointMismatch(format!("unknown parameter {:?}", rec.name))
                })?;
            let target = params.get_mut(id);
            if target.dim() != (rec.rows, rec.cols) || rec.values.len() != rec.rows * rec.cols {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {:?}: stored {} x {}, model wants {:?}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    target.dim()
                )));
            }
            *target = Array2::from_shape_vec((rec.rows, rec.cols), rec.values.clone())
                .expect("shape checked");
        }
        Ok(model)
    }
}
