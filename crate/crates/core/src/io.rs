//! On-disk dataset formats.
//!
//! A dataset is a directory with a `meta.json` describing shapes plus either:
//! - node task: `nodes.csv` (`id,x0..x{d-1},label,split`) and `edges.csv`
//!   (`src,dst[,e0..e{d-1}]`), or
//! - graph task: `graphs.jsonl`, one JSON graph record per line.
//!
//! Node ids in the CSV files may be arbitrary integers; loaders re-index them
//! densely in row order. Writers always emit dense ids, full round-trip `f64`
//! precision, and records in a fixed order, so writing the same data twice
//! produces byte-identical files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::{DatasetSplit, Graph, NodeMasks, SplitPart, TaskKind, validate_graph};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Shape and task metadata stored as `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub task_kind: TaskKind,
    pub num_node_features: usize,
    #[serde(default)]
    pub num_edge_features: Option<usize>,
    pub num_classes: usize,
    pub directed: bool,
}

impl DatasetMeta {
    /// Derive metadata from a split; `num_classes` comes from the largest
    /// label present.
    pub fn infer(split: &DatasetSplit) -> Result<Self> {
        let (first, max_label) = match split {
            DatasetSplit::Graphs { train, val, test } => {
                let first = train
                    .first()
                    .or_else(|| val.first())
                    .or_else(|| test.first())
                    .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
                let max = train
                    .iter()
                    .chain(val)
                    .chain(test)
                    .filter_map(|g| g.graph_label)
                    .max()
                    .ok_or_else(|| Error::InvalidArgument("no graph labels present".into()))?;
                (first, max)
            }
            DatasetSplit::NodeGraph { graph } => {
                let labels = graph
                    .node_labels
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("no node labels present".into()))?;
                let max = labels
                    .iter()
                    .copied()
                    .max()
                    .ok_or_else(|| Error::InvalidArgument("graph has no nodes".into()))?;
                (graph, max)
            }
        };
        if max_label < 0 {
            return Err(Error::Format("negative class label".into()));
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            task_kind: split.task_kind(),
            num_node_features: first.feature_dim(),
            num_edge_features: first.edge_feature_dim(),
            num_classes: max_label as usize + 1,
            directed: first.directed,
        })
    }
}

fn split_name(p: SplitPart) -> &'static str {
    match p {
        SplitPart::Train => "train",
        SplitPart::Val => "val",
        SplitPart::Test => "test",
    }
}

fn parse_split(s: &str) -> Result<SplitPart> {
    match s {
        "train" => Ok(SplitPart::Train),
        "val" => Ok(SplitPart::Val),
        "test" => Ok(SplitPart::Test),
        other => Err(Error::Format(format!("unknown split value {other:?}"))),
    }
}

fn check_label(label: i64, meta: &DatasetMeta) -> Result<()> {
    if label < 0 || label as usize >= meta.num_classes {
        return Err(Error::Format(format!(
            "label {label} outside 0..{}",
            meta.num_classes
        )));
    }
    Ok(())
}

/// Write a dataset directory. The directory is created if needed.
pub fn write_dataset(dir: &Path, split: &DatasetSplit, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta_json = serde_json::to_string_pretty(meta)?;
    fs::write(dir.join("meta.json"), meta_json + "\n")?;
    match split {
        DatasetSplit::NodeGraph { graph } => write_node_files(dir, graph, meta),
        DatasetSplit::Graphs { train, val, test } => {
            let mut out = String::new();
            for (part, graphs) in [
                (SplitPart::Train, train),
                (SplitPart::Val, val),
                (SplitPart::Test, test),
            ] {
                for g in graphs {
                    let rec = GraphRecord::from_graph(g, Some(part));
                    out.push_str(&serde_json::to_string(&rec)?);
                    out.push('\n');
                }
            }
            fs::write(dir.join("graphs.jsonl"), out)?;
            Ok(())
        }
    }
}

/// Read a dataset directory written by [`write_dataset`] (or hand-authored in
/// the same format). Labels and split assignments are required.
pub fn read_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetMeta)> {
    let meta = read_meta(dir)?;
    let split = match meta.task_kind {
        TaskKind::Node => {
            let graph = read_node_files(dir, &meta, true)?;
            if graph.node_labels.is_none() {
                return Err(Error::Format("node dataset without labels".into()));
            }
            if graph.node_masks.is_none() {
                return Err(Error::Format("node dataset without split column".into()));
            }
            DatasetSplit::NodeGraph { graph }
        }
        TaskKind::Graph => {
            let mut parts: [Vec<Graph>; 3] = [vec![], vec![], vec![]];
            for (lineno, rec) in read_graph_records(dir)?.into_iter().enumerate() {
                let part = rec.split.ok_or_else(|| {
                    Error::Format(format!("graph record {lineno} missing split"))
                })?;
                let g = rec.into_graph(&meta, true)?;
                parts[match part {
                    SplitPart::Train => 0,
                    SplitPart::Val => 1,
                    SplitPart::Test => 2,
                }]
                .push(g);
            }
            let [train, val, test] = parts;
            if train.is_empty() || val.is_empty() || test.is_empty() {
                return Err(Error::Format("graph dataset with an empty split part".into()));
            }
            DatasetSplit::Graphs { train, val, test }
        }
    };
    Ok((split, meta))
}

/// Read a dataset as inference-only target data: labels and splits optional.
/// Returns the graphs (node task: the single graph) plus metadata.
pub fn read_target(dir: &Path) -> Result<(Vec<Graph>, DatasetMeta)> {
    let meta = read_meta(dir)?;
    let graphs = match meta.task_kind {
        TaskKind::Node => vec![read_node_files(dir, &meta, false)?],
        TaskKind::Graph => read_graph_records(dir)?
            .into_iter()
            .map(|r| r.into_graph(&meta, false))
            .collect::<Result<Vec<_>>>()?,
    };
    if graphs.is_empty() {
        return Err(Error::Format("target dataset has no graphs".into()));
    }
    Ok((graphs, meta))
}

fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format_version {} (supported: {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

fn write_node_files(dir: &Path, graph: &Graph, meta: &DatasetMeta) -> Result<()> {
    let d = meta.num_node_features;
    let mut w = csv::Writer::from_path(dir.join("nodes.csv"))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.push("label".into());
    header.push("split".into());
    w.write_record(&header)?;
    let masks = graph.node_masks.as_ref();
    for i in 0..graph.num_nodes() {
        let mut rec = vec![i.to_string()];
        rec.extend(graph.node_features.row(i).iter().map(|v| format_f64(*v)));
        rec.push(match &graph.node_labels {
            Some(l) => l[i].to_string(),
            None => String::new(),
        });
        rec.push(match masks {
            Some(m) if m.train[i] => split_name(SplitPart::Train).into(),
            Some(m) if m.val[i] => split_name(SplitPart::Val).into(),
            Some(m) if m.test[i] => split_name(SplitPart::Test).into(),
            _ => String::new(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;

    let de = meta.num_edge_features.unwrap_or(0);
    let mut w = csv::Writer::from_path(dir.join("edges.csv"))?;
    let mut header = vec!["src".to_string(), "dst".to_string()];
    header.extend((0..de).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (e, &(s, t)) in graph.edge_index.iter().enumerate() {
        let mut rec = vec![s.to_string(), t.to_string()];
        if let Some(ef) = &graph.edge_features {
            rec.extend(ef.row(e).iter().map(|v| format_f64(*v)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_node_files(dir: &Path, meta: &DatasetMeta, strict: bool) -> Result<Graph> {
    let d = meta.num_node_features;
    let mut reader = csv::Reader::from_path(dir.join("nodes.csv"))
        .map_err(|e| Error::Format(format!("nodes.csv: {e}")))?;
    expect_headers(
        reader.headers()?,
        &node_headers(d),
        "nodes.csv",
    )?;

    let mut id_map: HashMap<i64, usize> = HashMap::new();
    let mut features: Vec<f64> = Vec::new();
    let mut labels: Vec<Option<i64>> = Vec::new();
    let mut splits: Vec<Option<SplitPart>> = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 3 {
            return Err(Error::Format(format!(
                "nodes.csv row {row}: {} fields, expected {}",
                rec.len(),
                d + 3
            )));
        }
        let id: i64 = parse_num(&rec[0], "nodes.csv", row, "id")?;
        if id_map.insert(id, id_map.len()).is_some() {
            return Err(Error::Format(format!("nodes.csv row {row}: duplicate id {id}")));
        }
        for j in 0..d {
            features.push(parse_num(&rec[1 + j], "nodes.csv", row, "feature")?);
        }
        let label_field = &rec[1 + d];
        labels.push(if label_field.is_empty() {
            None
        } else {
            let l: i64 = parse_num(label_field, "nodes.csv", row, "label")?;
            check_label(l, meta)?;
            Some(l)
        });
        let split_field = &rec[2 + d];
        splits.push(if split_field.is_empty() {
            None
        } else {
            Some(parse_split(split_field)?)
        });
    }
    let n = id_map.len();
    if n == 0 {
        return Err(Error::Format("nodes.csv has no rows".into()));
    }

    // Labels and splits are all-or-nothing per file.
    let node_labels = if labels.iter().all(Option::is_some) {
        Some(labels.into_iter().map(Option::unwrap).collect())
    } else if labels.iter().all(Option::is_none) {
        None
    } else {
        return Err(Error::Format("nodes.csv mixes labeled and unlabeled rows".into()));
    };
    let node_masks = if splits.iter().all(Option::is_none) {
        None
    } else if strict && !splits.iter().all(Option::is_some) {
        return Err(Error::Format("nodes.csv mixes split and split-less rows".into()));
    } else {
        let mut masks = NodeMasks::empty(n);
        for (i, s) in splits.iter().enumerate() {
            match s {
                Some(SplitPart::Train) => masks.train[i] = true,
                Some(SplitPart::Val) => masks.val[i] = true,
                Some(SplitPart::Test) => masks.test[i] = true,
                None => {}
            }
        }
        Some(masks)
    };

    let mut reader = csv::Reader::from_path(dir.join("edges.csv"))
        .map_err(|e| Error::Format(format!("edges.csv: {e}")))?;
    let de = meta.num_edge_features.unwrap_or(0);
    expect_headers(reader.headers()?, &edge_headers(de), "edges.csv")?;
    let mut edge_index = Vec::new();
    let mut edge_feats: Vec<f64> = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 + de {
            return Err(Error::Format(format!(
                "edges.csv row {row}: {} fields, expected {}",
                rec.len(),
                2 + de
            )));
        }
        let src: i64 = parse_num(&rec[0], "edges.csv", row, "src")?;
        let dst: i64 = parse_num(&rec[1], "edges.csv", row, "dst")?;
        let lookup = |id: i64| {
            id_map.get(&id).copied().ok_or_else(|| {
                Error::Format(format!("edges.csv row {row}: unknown node id {id}"))
            })
        };
        edge_index.push((lookup(src)?, lookup(dst)?));
        for j in 0..de {
            edge_feats.push(parse_num(&rec[2 + j], "edges.csv", row, "feature")?);
        }
    }

    let graph = Graph {
        node_features: Array2::from_shape_vec((n, d), features)
            .map_err(|e| Error::Format(e.to_string()))?,
        edge_features: if de > 0 {
            Some(
                Array2::from_shape_vec((edge_index.len(), de), edge_feats)
                    .map_err(|e| Error::Format(e.to_string()))?,
            )
        } else {
            None
        },
        edge_index,
        node_labels,
        graph_label: None,
        node_masks,
        directed: meta.directed,
    };
    let problems = validate_graph(&graph);
    if !problems.is_empty() {
        return Err(Error::Format(format!("loaded graph invalid: {}", problems.join("; "))));
    }
    Ok(graph)
}

fn node_headers(d: usize) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    h.extend((0..d).map(|j| format!("x{j}")));
    h.push("label".into());
    h.push("split".into());
    h
}

fn edge_headers(de: usize) -> Vec<String> {
    let mut h = vec!["src".to_string(), "dst".to_string()];
    h.extend((0..de).map(|j| format!("e{j}")));
    h
}

fn expect_headers(got: &csv::StringRecord, want: &[String], file: &str) -> Result<()> {
    let got: Vec<&str> = got.iter().collect();
    if got != want.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Format(format!(
            "{file} headers {got:?} do not match expected {want:?}"
        )));
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(s: &str, file: &str, row: usize, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("{file} row {row}: bad {what} value {s:?}")))
}

/// Shortest round-trip decimal for an f64 (what serde_json emits).
fn format_f64(v: f64) -> String {
    let mut buf = ryu_format(v);
    // csv values like "1.0" stay readable; ryu emits "1.0" already.
    if buf == "-0.0" {
        buf = "0.0".into();
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // serde_json's f64 formatting round-trips exactly; reuse it.
    serde_json::to_string(&v).expect("finite f64 serializes")
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphRecord {
    node_features: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitPart>,
}

impl GraphRecord {
    fn from_graph(g: &Graph, split: Option<SplitPart>) -> Self {
        Self {
            node_features: g
                .node_features
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            edges: g.edge_index.clone(),
            edge_features: g
                .edge_features
                .as_ref()
                .map(|ef| ef.rows().into_iter().map(|r| r.to_vec()).collect()),
            label: g.graph_label,
            split,
        }
    }

    fn into_graph(self, meta: &DatasetMeta, strict: bool) -> Result<Graph> {
        let d = meta.num_node_features;
        let n = self.node_features.len();
        let mut features = Vec::with_capacity(n * d);
        for row in &self.node_features {
            if row.len() != d {
                return Err(Error::Format(format!(
                    "graph record node feature row has {} entries, expected {d}",
                    row.len()
                )));
            }
            features.extend_from_slice(row);
        }
        let edge_features = match (&self.edge_features, meta.num_edge_features) {
            (Some(rows), Some(de)) => {
                let mut flat = Vec::with_capacity(rows.len() * de);
                if rows.len() != self.edges.len() {
                    return Err(Error::Format(format!(
                        "{} edge feature rows for {} edges",
                        rows.len(),
                        self.edges.len()
                    )));
                }
                for row in rows {
                    if row.len() != de {
                        return Err(Error::Format(format!(
                            "edge feature row has {} entries, expected {de}",
                            row.len()
                        )));
                    }
                    flat.extend_from_slice(row);
                }
                Some(
                    Array2::from_shape_vec((self.edges.len(), de), flat)
                        .map_err(|e| Error::Format(e.to_string()))?,
                )
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::Format(
                    "graph record has edge features but meta.num_edge_features is null".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Format(
                    "meta.num_edge_features set but graph record has no edge features".into(),
                ))
            }
        };
        if strict {
            let label = self
                .label
                .ok_or_else(|| Error::Format("graph record missing label".into()))?;
            check_label(label, meta)?;
        } else if let Some(label) = self.label {
            check_label(label, meta)?;
        }
        let graph = Graph {
            node_features: Array2::from_shape_vec((n, d), features)
                .map_err(|e| Error::Format(e.to_string()))?,
            edge_index: self.edges,
            edge_features,
            node_labels: None,
            graph_label: self.label,
            node_masks: None,
            directed: meta.directed,
        };
        let problems = validate_graph(&graph);
        if !problems.is_empty() {
            return Err(Error::Format(format!(
                "loaded graph invalid: {}",
                problems.join("; ")
            )));
        }
        Ok(graph)
    }
}

fn read_graph_records(dir: &Path) -> Result<Vec<GraphRecord>> {
    let path = dir.join("graphs.jsonl");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("graphs.jsonl line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    Ok(records)
}
