//! Experiment configuration: one TOML document describes the dataset, the
//! active transform set, the model, the training arms, and the evaluation
//! policy. Artifacts are stamped with a hash of the experiment-defining
//! sections so runs from different configs can never be joined by accident.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gmetro_core::eval::{Metric, NormMode};
use gmetro_core::graph::{PoolMode, TaskKind};
use gmetro_core::model::{AggregationMode, ArchSpec, ExpertMode};
use gmetro_core::nn::layers::EncoderConfig;
use gmetro_core::nn::Activation;
use gmetro_core::synth::LabelRule;
use gmetro_core::train::{Method, TrainConfig};
use gmetro_core::transforms::{TransformKind, TransformSet, TransformSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

/// Where the dataset comes from. Synthetic sources regenerate the same data
/// from their seed on every command, so no command depends on `gen-data`
/// having run first.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSection {
    /// A directory in the on-disk dataset format.
    Files { path: PathBuf },
    /// Stochastic block model, community labels, node task.
    Sbm {
        #[serde(default = "SbmDefaults::num_nodes")]
        num_nodes: usize,
        #[serde(default = "SbmDefaults::communities")]
        communities: usize,
        #[serde(default = "SbmDefaults::p_intra")]
        p_intra: f64,
        #[serde(default = "SbmDefaults::p_inter")]
        p_inter: f64,
        #[serde(default = "SbmDefaults::feature_dim")]
        feature_dim: usize,
        #[serde(default = "SbmDefaults::separation")]
        separation: f64,
        #[serde(default = "SbmDefaults::noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_split")]
        split: [f64; 3],
    },
    /// Independent-edge random graphs with structural or feature labels,
    /// graph task.
    ErdosRenyi {
        #[serde(default = "ErDefaults::num_graphs")]
        num_graphs: usize,
        #[serde(default = "ErDefaults::nodes_min")]
        nodes_min: usize,
        #[serde(default = "ErDefaults::nodes_max")]
        nodes_max: usize,
        #[serde(default = "ErDefaults::edge_prob")]
        edge_prob: f64,
        #[serde(default = "ErDefaults::feature_dim")]
        feature_dim: usize,
        label_rule: LabelRule,
        #[serde(default = "ErDefaults::shift")]
        shift: f64,
        #[serde(default = "ErDefaults::noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_split")]
        split: [f64; 3],
    },
}

struct SbmDefaults;
impl SbmDefaults {
    fn num_nodes() -> usize {
        1000
    }
    fn communities() -> usize {
        4
    }
    fn p_intra() -> f64 {
        0.05
    }
    fn p_inter() -> f64 {
        0.005
    }
    fn feature_dim() -> usize {
        8
    }
    fn separation() -> f64 {
        1.0
    }
    fn noise() -> f64 {
        0.5
    }
}

struct ErDefaults;
impl ErDefaults {
    fn num_graphs() -> usize {
        500
    }
    fn nodes_min() -> usize {
        10
    }
    fn nodes_max() -> usize {
        30
    }
    fn edge_prob() -> f64 {
        0.15
    }
    fn feature_dim() -> usize {
        8
    }
    fn shift() -> f64 {
        0.5
    }
    fn noise() -> f64 {
        0.5
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformsSection {
    pub kinds: Vec<TransformKind>,
    #[serde(default = "TransformsSection::default_max_composite_size")]
    pub max_composite_size: usize,
    /// Optional per-kind strength ranges, overriding the built-in defaults.
    #[serde(default)]
    pub domains: BTreeMap<String, [f64; 2]>,
}

impl TransformsSection {
    fn default_max_composite_size() -> usize {
        2
    }

    /// Build the active set with any domain overrides applied.
    pub fn build_set(&self) -> Result<TransformSet> {
        let mut specs = Vec::with_capacity(self.kinds.len());
        for &kind in &self.kinds {
            let mut spec = TransformSpec::with_defaults(kind);
            if let Some(&[lo, hi]) = self.domains.get(kind.name()) {
                spec.param_domain = (lo, hi);
            }
            specs.push(spec);
        }
        TransformSet::new(specs).context("building transform set")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "ModelSection::default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "ModelSection::default_layers")]
    pub layers: usize,
    #[serde(default = "ModelSection::default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "ModelSection::default_expert_mode")]
    pub expert_mode: ExpertMode,
    #[serde(default = "ModelSection::default_aggregation")]
    pub aggregation: AggregationMode,
    #[serde(default = "ModelSection::default_pooling")]
    pub pooling: PoolMode,
}

impl ModelSection {
    fn default_hidden_dim() -> usize {
        32
    }
    fn default_layers() -> usize {
        3
    }
    fn default_activation() -> Activation {
        Activation::Relu
    }
    fn default_expert_mode() -> ExpertMode {
        ExpertMode::SharedEncoderWithHeads
    }
    fn default_aggregation() -> AggregationMode {
        AggregationMode::SoftmaxSum
    }
    fn default_pooling() -> PoolMode {
        PoolMode::Mean
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            encoder: EncoderConfig {
                layers: self.layers,
                hidden_dim: self.hidden_dim,
                activation: self.activation,
                dropout: self.dropout,
            },
            expert_mode: self.expert_mode,
            aggregation: self.aggregation,
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Training arms compared by `report`; the first is the subject, the
    /// rest are baselines. Names: graphmetro, erm, erm_aug.
    pub methods: Vec<String>,
    #[serde(default = "TrainingSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TrainingSection::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainingSection::default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "TrainingSection::default_lambda")]
    pub lambda: f64,
    /// Probability a training step sees untransformed data; default is
    /// 1 / (K + 1).
    #[serde(default)]
    pub identity_rate: Option<f64>,
}

impl TrainingSection {
    fn default_epochs() -> usize {
        100
    }
    fn default_batch_size() -> usize {
        32
    }
    fn default_learning_rate() -> f64 {
        1e-3
    }
    fn default_lambda() -> f64 {
        1.0
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods
            .iter()
            .map(|m| Method::parse(m).context("parsing training methods"))
            .collect()
    }

    pub fn train_config(&self, method: Method, max_composite_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            max_composite_size,
            identity_rate: self.identity_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "EvaluationSection::default_metric")]
    pub metric: Metric,
    /// Transform draws per environment; results are averaged by `report`.
    #[serde(default = "EvaluationSection::default_eval_seeds")]
    pub eval_seeds: Vec<u64>,
    #[serde(default = "EvaluationSection::default_invariance_trials")]
    pub invariance_trials: usize,
    /// Upper bound on the number of test graphs fed to the invariance probe.
    #[serde(default = "EvaluationSection::default_invariance_sample")]
    pub invariance_sample: usize,
    #[serde(default = "EvaluationSection::default_norm_mode")]
    pub norm_mode: NormMode,
}

impl EvaluationSection {
    fn default_metric() -> Metric {
        Metric::Accuracy
    }
    fn default_eval_seeds() -> Vec<u64> {
        vec![101]
    }
    fn default_invariance_trials() -> usize {
        40
    }
    fn default_invariance_sample() -> usize {
        24
    }
    fn default_norm_mode() -> NormMode {
        NormMode::RowMinMax
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoverSection {
    /// Transform planted on the test data to form the discovery target.
    pub planted: TransformKind,
    #[serde(default = "DiscoverSection::default_planted_seed")]
    pub planted_seed: u64,
}

impl DiscoverSection {
    fn default_planted_seed() -> u64 {
        9001
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskKind,
    /// Root seeds for the training runs; `--seed` narrows to one.
    #[serde(default = "ExperimentConfig::default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub transforms: TransformsSection,
    #[serde(default = "ExperimentConfig::default_model")]
    pub model: ModelSection,
    pub training: TrainingSection,
    #[serde(default = "ExperimentConfig::default_evaluation")]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub discover: Option<DiscoverSection>,
}

/// The sections that define the experiment. Seeds, output location, and the
/// display name deliberately stay outside the hash: artifacts from different
/// seeds of one experiment must join, and renaming or relocating a run must
/// not orphan its artifacts.
#[derive(Serialize)]
struct HashedView<'a> {
    task: TaskKind,
    dataset: &'a DatasetSection,
    transforms: &'a TransformsSection,
    model: &'a ModelSection,
    training: &'a TrainingSection,
    evaluation: &'a EvaluationSection,
    discover: &'a Option<DiscoverSection>,
}

impl ExperimentConfig {
    fn default_seeds() -> Vec<u64> {
        vec![0]
    }
    fn default_model() -> ModelSection {
        ModelSection {
            hidden_dim: ModelSection::default_hidden_dim(),
            layers: ModelSection::default_layers(),
            activation: ModelSection::default_activation(),
            dropout: 0.0,
            expert_mode: ModelSection::default_expert_mode(),
            aggregation: ModelSection::default_aggregation(),
            pooling: ModelSection::default_pooling(),
        }
    }
    fn default_evaluation() -> EvaluationSection {
        EvaluationSection {
            metric: EvaluationSection::default_metric(),
            eval_seeds: EvaluationSection::default_eval_seeds(),
            invariance_trials: EvaluationSection::default_invariance_trials(),
            invariance_sample: EvaluationSection::default_invariance_sample(),
            norm_mode: EvaluationSection::default_norm_mode(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let problems = cfg.validate();
        if !problems.is_empty() {
            bail!("invalid config {}:\n  - {}", path.display(), problems.join("\n  - "));
        }
        Ok(cfg)
    }

    /// All validation problems at once, so a bad config is fixed in one pass.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();

        match &self.dataset {
            DatasetSection::Files { path } => {
                if !path.exists() {
                    problems.push(format!("dataset.path {} does not exist", path.display()));
                }
            }
            DatasetSection::Sbm {
                num_nodes,
                communities,
                split,
                ..
            } => {
                if self.task != TaskKind::Node {
                    problems.push("sbm datasets are node tasks; set task = \"node\"".into());
                }
                if *communities < 2 {
                    problems.push("dataset.communities must be at least 2".into());
                }
                if *num_nodes < 3 * communities {
                    problems.push(format!(
                        "dataset.num_nodes = {num_nodes} too small for {communities} communities"
                    ));
                }
                check_split(split, &mut problems);
            }
            DatasetSection::ErdosRenyi {
                num_graphs,
                nodes_min,
                nodes_max,
                split,
                ..
            } => {
                if self.task != TaskKind::Graph {
                    problems.push("erdos_renyi datasets are graph tasks; set task = \"graph\"".into());
                }
                if *num_graphs < 3 {
                    problems.push("dataset.num_graphs must allow three non-empty split parts".into());
                }
                if *nodes_min < 2 || nodes_max < nodes_min {
                    problems.push(format!(
                        "dataset nodes range [{nodes_min}, {nodes_max}] is degenerate"
                    ));
                }
                check_split(split, &mut problems);
            }
        }

        if self.transforms.kinds.is_empty() {
            // An empty set is legal (pure identity training) but composite
            // sizing then has nothing to bound.
            if self.transforms.max_composite_size > 1 {
                problems.push("transforms.max_composite_size set without any kinds".into());
            }
        } else {
            let mut seen = std::collections::HashSet::new();
            for k in &self.transforms.kinds {
                if !seen.insert(*k) {
                    problems.push(format!("transforms.kinds repeats {}", k.name()));
                }
            }
            if self.transforms.max_composite_size < 1
                || self.transforms.max_composite_size > self.transforms.kinds.len()
            {
                problems.push(format!(
                    "transforms.max_composite_size = {} outside 1..={}",
                    self.transforms.max_composite_size,
                    self.transforms.kinds.len()
                ));
            }
        }
        for (name, [lo, hi]) in &self.transforms.domains {
            if TransformKind::parse(name).is_err() {
                problems.push(format!("transforms.domains names unknown kind {name:?}"));
            }
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                problems.push(format!("transforms.domains.{name} = [{lo}, {hi}] is not a range"));
            }
        }

        if self.model.hidden_dim == 0 || self.model.layers == 0 {
            problems.push("model.hidden_dim and model.layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            problems.push(format!("model.dropout = {} outside [0, 1)", self.model.dropout));
        }

        if self.training.methods.is_empty() {
            problems.push("training.methods must name at least one method".into());
        }
        for m in &self.training.methods {
            if Method::parse(m).is_err() {
                problems.push(format!(
                    "training.methods contains unknown method {m:?} (expected graphmetro, erm, or erm_aug)"
                ));
            }
        }
        {
            let mut seen = std::collections::HashSet::new();
            for m in &self.training.methods {
                if !seen.insert(m.as_str()) {
                    problems.push(format!("training.methods repeats {m:?}"));
                }
            }
        }
        if self.training.epochs == 0 {
            problems.push("training.epochs must be positive".into());
        }
        if self.training.batch_size == 0 {
            problems.push("training.batch_size must be positive".into());
        }
        if !(self.training.learning_rate > 0.0) {
            problems.push(format!(
                "training.learning_rate = {} must be positive",
                self.training.learning_rate
            ));
        }
        if self.training.lambda < 0.0 {
            problems.push(format!("training.lambda = {} is negative", self.training.lambda));
        }
        if let Some(r) = self.training.identity_rate {
            if !(0.0..=1.0).contains(&r) {
                problems.push(format!("training.identity_rate = {r} outside [0, 1]"));
            }
        }

        if self.seeds.is_empty() {
            problems.push("seeds must list at least one seed".into());
        }
        if self.evaluation.eval_seeds.is_empty() {
            problems.push("evaluation.eval_seeds must list at least one seed".into());
        }
        if self.evaluation.invariance_trials == 0 || self.evaluation.invariance_sample == 0 {
            problems.push("evaluation.invariance_trials and invariance_sample must be positive".into());
        }
        if let Some(d) = &self.discover {
            if !self.transforms.kinds.contains(&d.planted) {
                problems.push(format!(
                    "discover.planted {} is not in transforms.kinds",
                    d.planted.name()
                ));
            }
        }

        problems
    }

    /// Hex digest identifying the experiment definition.
    pub fn hash(&self) -> String {
        let view = HashedView {
            task: self.task,
            dataset: &self.dataset,
            transforms: &self.transforms,
            model: &self.model,
            training: &self.training,
            evaluation: &self.evaluation,
            discover: &self.discover,
        };
        let canonical = toml::to_string(&view).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    /// Effective composite size bound (clamped to the set size; 1 for the
    /// empty set).
    pub fn max_composite_size(&self) -> usize {
        self.transforms
            .max_composite_size
            .clamp(1, self.transforms.kinds.len().max(1))
    }
}

fn check_split(split: &[f64; 3], problems: &mut Vec<String>) {
    let sum: f64 = split.iter().sum();
    if split.iter().any(|&f| !(f > 0.0 && f < 1.0)) || (sum - 1.0).abs() > 1e-9 {
        problems.push(format!("dataset.split = {split:?} must be three positive fractions summing to 1"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "demo"
task = "node"
out_dir = "runs/demo"

[dataset]
source = "sbm"
num_nodes = 120
communities = 2

[transforms]
kinds = ["drop_edge", "noisy_node_feat"]

[training]
methods = ["graphmetro", "erm"]
epochs = 5
"#;

    fn parse(text: &str) -> ExperimentConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse(MINIMAL);
        assert_eq!(cfg.name, "demo");
        assert_eq!(cfg.task, TaskKind::Node);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.model.hidden_dim, 32);
        assert_eq!(cfg.training.batch_size, 32);
        assert_eq!(cfg.evaluation.metric, Metric::Accuracy);
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
    }

    #[test]
    fn hash_ignores_seeds_name_and_out_dir() {
        let a = parse(MINIMAL);
        let mut b = parse(MINIMAL);
        b.name = "renamed".into();
        b.seeds = vec![5, 6, 7];
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn hash_tracks_experiment_definition() {
        let a = parse(MINIMAL);
        let mut b = parse(MINIMAL);
        b.training.learning_rate *= 2.0;
        assert_ne!(a.hash(), b.hash());

        let mut c = parse(MINIMAL);
        c.transforms.kinds.push(TransformKind::AddEdge);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn validation_collects_every_problem() {
        let mut cfg = parse(MINIMAL);
        cfg.training.methods = vec!["graphmetro".into(), "sgd".into()];
        cfg.training.epochs = 0;
        cfg.seeds.clear();
        cfg.transforms.max_composite_size = 7;
        let problems = cfg.validate();
        assert!(problems.len() >= 4, "{problems:?}");
        assert!(problems.iter().any(|p| p.contains("sgd")));
        assert!(problems.iter().any(|p| p.contains("epochs")));
    }

    #[test]
    fn task_and_generator_must_agree() {
        let mut cfg = parse(MINIMAL);
        cfg.task = TaskKind::Graph;
        let problems = cfg.validate();
        assert!(problems.iter().any(|p| p.contains("node")), "{problems:?}");
    }

    #[test]
    fn domain_overrides_reach_the_transform_set() {
        let mut cfg = parse(MINIMAL);
        cfg.transforms
            .domains
            .insert("drop_edge".into(), [0.4, 0.4]);
        let set = cfg.transforms.build_set().unwrap();
        let spec = set
            .specs()
            .iter()
            .find(|s| s.kind == TransformKind::DropEdge)
            .unwrap();
        assert_eq!(spec.param_domain, (0.4, 0.4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nunknown_key = 3\n");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }
}
