//! Turns the `[dataset]` section into an in-memory split, and builds the
//! planted-shift target used by `discover`. Synthetic sources are
//! regenerated from their seed on demand, so commands can run in any order.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gmetro_core::graph::{split_graphs, split_nodes, DatasetSplit, Graph};
use gmetro_core::io;
use gmetro_core::seed::stream_rng;
use gmetro_core::synth::{
    generate_graph_dataset, generate_sbm, GraphDatasetConfig, SbmConfig,
};
use gmetro_core::transforms::{apply_traced, CompositeTransform, TransformSpec};

use crate::config::{DatasetSection, DiscoverSection, ExperimentConfig};

/// A resolved dataset plus its class count.
pub struct LoadedData {
    pub split: DatasetSplit,
    pub num_classes: usize,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let loaded = match &cfg.dataset {
        DatasetSection::Files { path } => {
            let (split, meta) = io::read_dataset(path)
                .with_context(|| format!("reading dataset {}", path.display()))?;
            if meta.task_kind != cfg.task {
                bail!(
                    "dataset {} is a {:?} task but the config says {:?}",
                    path.display(),
                    meta.task_kind,
                    cfg.task
                );
            }
            LoadedData {
                split,
                num_classes: meta.num_classes,
            }
        }
        DatasetSection::Sbm {
            num_nodes,
            communities,
            p_intra,
            p_inter,
            feature_dim,
            separation,
            noise,
            seed,
            split,
        } => {
            let sbm = SbmConfig {
                num_nodes: *num_nodes,
                num_communities: *communities,
                p_intra: *p_intra,
                p_inter: *p_inter,
                feature_dim: *feature_dim,
                separation: *separation,
                noise: *noise,
            };
            let graph = generate_sbm(&sbm, *seed).context("generating sbm dataset")?;
            LoadedData {
                split: split_nodes(graph, (split[0], split[1], split[2]), *seed)?,
                num_classes: *communities,
            }
        }
        DatasetSection::ErdosRenyi {
            num_graphs,
            nodes_min,
            nodes_max,
            edge_prob,
            feature_dim,
            label_rule,
            shift,
            noise,
            seed,
            split,
        } => {
            let gen = GraphDatasetConfig {
                num_graphs: *num_graphs,
                nodes_range: (*nodes_min, *nodes_max),
                edge_prob: *edge_prob,
                feature_dim: *feature_dim,
                label_rule: *label_rule,
                shift: *shift,
                noise: *noise,
            };
            let graphs =
                generate_graph_dataset(&gen, *seed).context("generating graph dataset")?;
            LoadedData {
                split: split_graphs(graphs, (split[0], split[1], split[2]), *seed)?,
                num_classes: label_rule.num_classes(),
            }
        }
    };
    Ok(loaded)
}

/// Materialize the configured synthetic dataset into `dir` in the on-disk
/// format.
pub fn write_generated(cfg: &ExperimentConfig, dir: &Path) -> Result<LoadedData> {
    if let DatasetSection::Files { path } = &cfg.dataset {
        bail!(
            "dataset.source is files ({}); there is nothing to generate",
            path.display()
        );
    }
    let data = load_dataset(cfg)?;
    let mut meta = io::DatasetMeta::infer(&data.split)?;
    // The largest label present can undercount classes on tiny datasets.
    meta.num_classes = meta.num_classes.max(data.num_classes);
    io::write_dataset(dir, &data.split, &meta)
        .with_context(|| format!("writing dataset to {}", dir.display()))?;
    Ok(data)
}

/// Test-part graphs with the planted transform applied: the discovery target.
///
/// Node tasks shift the single graph as a whole; graph tasks shift every test
/// graph independently. Randomness is keyed by the planted seed and the graph
/// index, never by iteration order.
pub fn planted_target(
    split: &DatasetSplit,
    discover: &DiscoverSection,
) -> Result<Vec<Graph>> {
    let composite = CompositeTransform::single(TransformSpec::with_defaults(discover.planted));
    let sources: Vec<&Graph> = match split {
        DatasetSplit::NodeGraph { graph } => vec![graph],
        DatasetSplit::Graphs { test, .. } => test.iter().collect(),
    };
    sources
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let mut rng = stream_rng(discover.planted_seed, "target", &[gi as u64]);
            Ok(apply_traced(g, &composite, &mut rng, None)?.graph)
        })
        .collect()
}

/// Graphs whose gate scores the probe measures: the clean test part.
pub fn probe_sources(split: &DatasetSplit) -> Vec<&Graph> {
    match split {
        DatasetSplit::NodeGraph { graph } => vec![graph],
        DatasetSplit::Graphs { test, .. } => test.iter().collect(),
    }
}
