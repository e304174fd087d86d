//! Artifact files and their schemas. Every file carries the config hash and
//! seed that produced it: CSVs in a leading `#` comment line, JSON as
//! top-level fields. Floats are written in shortest round-trip form, so
//! re-running a command reproduces files byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gmetro_core::eval::{EnvResult, InvarianceMatrix, ShiftReport, WelchResult};
use gmetro_core::train::EpochStats;
use gmetro_core::transforms::Environment;
use serde::{Deserialize, Serialize};

/// Identity of the run that wrote an artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    fn comment_line(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }

    fn parse_comment(line: &str) -> Result<Self> {
        let rest = line
            .strip_prefix("# ")
            .ok_or_else(|| anyhow::anyhow!("artifact missing identity comment line"))?;
        let mut config_hash = None;
        let mut seed = None;
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("config_hash=") {
                config_hash = Some(v.to_string());
            } else if let Some(v) = field.strip_prefix("seed=") {
                seed = Some(v.parse::<u64>().context("parsing artifact seed")?);
            }
        }
        match (config_hash, seed) {
            (Some(config_hash), Some(seed)) => Ok(Self { config_hash, seed }),
            _ => bail!("artifact identity line lacks config_hash or seed"),
        }
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_stamped(path: &Path) -> Result<(Stamp, String)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| anyhow::anyhow!("{} is empty", path.display()))?;
    let stamp = Stamp::parse_comment(first)
        .with_context(|| format!("reading identity of {}", path.display()))?;
    Ok((stamp, rest.to_string()))
}

// ---------------------------------------------------------------------------
// history.csv

pub const HISTORY_HEADER: &str = "epoch,l1,l2_task,l2_align,train_accuracy,val_accuracy";

pub fn write_history(path: &Path, stamp: &Stamp, history: &[EpochStats]) -> Result<()> {
    let mut out = stamp.comment_line();
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for e in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.gating_loss, e.task_loss, e.alignment_loss, e.train_accuracy, e.val_accuracy
        )
        .unwrap();
    }
    write_atomic(path, &out)
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l1: f64,
    pub l2_task: f64,
    pub l2_align: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

pub fn read_history(path: &Path) -> Result<(Stamp, Vec<HistoryRow>)> {
    let (stamp, body) = read_stamped(path)?;
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<HistoryRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok((stamp, rows))
}

// ---------------------------------------------------------------------------
// env_results.csv

pub fn write_env_results(path: &Path, stamp: &Stamp, results: &[EnvResult]) -> Result<()> {
    let mut out = stamp.comment_line();
    out.push_str("env_index,env_name,metric,value,eval_seed\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.env_index,
            r.env_name,
            r.metric.name(),
            r.value,
            r.seed
        )
        .unwrap();
    }
    write_atomic(path, &out)
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct EnvRow {
    pub env_index: usize,
    pub env_name: String,
    pub metric: String,
    pub value: f64,
    pub eval_seed: u64,
}

pub fn read_env_results(path: &Path) -> Result<(Stamp, Vec<EnvRow>)> {
    let (stamp, body) = read_stamped(path)?;
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<EnvRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok((stamp, rows))
}

// ---------------------------------------------------------------------------
// environments.json

#[derive(Debug, Serialize, Deserialize)]
pub struct EnvironmentsFile {
    pub config_hash: String,
    pub seed: u64,
    pub environments: Vec<Environment>,
}

pub fn write_environments(path: &Path, stamp: &Stamp, envs: &[Environment]) -> Result<()> {
    let file = EnvironmentsFile {
        config_hash: stamp.config_hash.clone(),
        seed: stamp.seed,
        environments: envs.to_vec(),
    };
    write_atomic(path, &(serde_json::to_string_pretty(&file)? + "\n"))
}

// ---------------------------------------------------------------------------
// invariance matrices

/// Square matrix CSV: `kind` label column then one column per source kind.
fn matrix_csv(stamp: &Stamp, names: &[String], m: &ndarray::Array2<f64>) -> String {
    let mut out = stamp.comment_line();
    out.push_str("kind");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, name) in names.iter().enumerate() {
        out.push_str(name);
        for j in 0..names.len() {
            write!(out, ",{}", m[(i, j)]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_invariance(dir: &Path, stamp: &Stamp, matrix: &InvarianceMatrix) -> Result<()> {
    write_atomic(
        &dir.join("invariance_raw.csv"),
        &matrix_csv(stamp, &matrix.kind_names, &matrix.raw),
    )?;
    write_atomic(
        &dir.join("invariance_normalized.csv"),
        &matrix_csv(stamp, &matrix.kind_names, &matrix.normalized),
    )
}

pub fn read_matrix(path: &Path) -> Result<(Stamp, Vec<String>, ndarray::Array2<f64>)> {
    let (stamp, body) = read_stamped(path)?;
    let mut lines = body.lines();
    let header = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("{} has no header", path.display()))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let k = names.len();
    let mut values = Vec::with_capacity(k * k);
    for line in lines {
        for cell in line.split(',').skip(1) {
            values.push(cell.parse::<f64>().context("parsing matrix cell")?);
        }
    }
    let m = ndarray::Array2::from_shape_vec((k, k), values)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok((stamp, names, m))
}

// ---------------------------------------------------------------------------
// shift_report.json

#[derive(Debug, Serialize, Deserialize)]
pub struct ShiftReportFile {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub planted: String,
    pub component_names: Vec<String>,
    pub mean_probs: Vec<f64>,
    pub num_instances: usize,
    pub gating_probe_accuracy: Option<f64>,
    /// Highest-probability non-identity component.
    pub top_component: Option<String>,
}

impl ShiftReportFile {
    pub fn new(stamp: &Stamp, method: &str, planted: &str, report: &ShiftReport) -> Self {
        Self {
            config_hash: stamp.config_hash.clone(),
            seed: stamp.seed,
            method: method.to_string(),
            planted: planted.to_string(),
            component_names: report.component_names.clone(),
            mean_probs: report.mean_probs.clone(),
            num_instances: report.num_instances,
            gating_probe_accuracy: report.gating_probe_accuracy,
            top_component: report
                .top_shift_component()
                .map(|i| report.component_names[i].clone()),
        }
    }
}

pub fn write_shift_report(path: &Path, report: &ShiftReportFile) -> Result<()> {
    write_atomic(path, &(serde_json::to_string_pretty(report)? + "\n"))
}

pub fn read_shift_report(path: &Path) -> Result<ShiftReportFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------------------
// report outputs

fn multi_seed_comment(config_hash: &str, seeds: &[u64]) -> String {
    let seed_list = seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join("|");
    format!("# config_hash={config_hash} seed={seed_list}\n")
}

/// Per-environment cross-seed statistics, one row per method and environment.
#[derive(Debug, Clone, Serialize)]
pub struct EnvMeanRow {
    pub method: String,
    pub env_index: usize,
    pub env_name: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

pub fn write_env_means(
    path: &Path,
    config_hash: &str,
    seeds: &[u64],
    rows: &[EnvMeanRow],
) -> Result<()> {
    let mut out = multi_seed_comment(config_hash, seeds);
    out.push_str("method,env_index,env_name,metric,mean,std,n_seeds\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method, r.env_index, r.env_name, r.metric, r.mean, r.std, r.n_seeds
        )
        .unwrap();
    }
    write_atomic(path, &out)
}

/// One row per method in the joined summary table. `subject_margin` is the
/// subject's shifted mean minus this row's (positive when the subject wins);
/// the contrast columns are empty on the subject's own row.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub n_seeds: usize,
    pub identity_mean: f64,
    pub shifted_mean: f64,
    pub shifted_std: f64,
    pub subject_margin: Option<f64>,
    pub welch_t: Option<f64>,
    pub welch_p: Option<f64>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary(
    path: &Path,
    config_hash: &str,
    seeds: &[u64],
    rows: &[SummaryRow],
) -> Result<()> {
    let mut out = multi_seed_comment(config_hash, seeds);
    out.push_str(
        "method,metric,n_seeds,identity_mean,shifted_mean,shifted_std,subject_margin,welch_t,welch_p\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.metric,
            r.n_seeds,
            r.identity_mean,
            r.shifted_mean,
            r.shifted_std,
            opt_cell(r.subject_margin),
            opt_cell(r.welch_t),
            opt_cell(r.welch_p),
        )
        .unwrap();
    }
    write_atomic(path, &out)
}

/// Per-method generalization aggregate: the mean metric over the shifted
/// (non-identity) environments, one entry per training seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub per_seed_shifted_mean: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub identity_mean: f64,
}

/// Subject-vs-baseline contrast across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodContrast {
    pub method: String,
    pub baseline: String,
    pub per_seed_margin: Vec<f64>,
    pub margin_mean: f64,
    pub positive_seeds: usize,
    pub welch: Option<WelchSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WelchSummary {
    pub t: f64,
    pub dof: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

impl From<&WelchResult> for WelchSummary {
    fn from(w: &WelchResult) -> Self {
        Self {
            t: w.t,
            dof: w.dof,
            p_value: w.p_value,
            degenerate: w.degenerate,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComparisonFile {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub metric: String,
    pub methods: Vec<MethodAggregate>,
    pub contrasts: Vec<MethodContrast>,
}

pub fn write_comparison(path: &Path, file: &ComparisonFile) -> Result<()> {
    write_atomic(path, &(serde_json::to_string_pretty(file)? + "\n"))
}

pub fn read_comparison(path: &Path) -> Result<ComparisonFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gmetro_core::eval::Metric;

    fn stamp() -> Stamp {
        Stamp {
            config_hash: "abc123".into(),
            seed: 7,
        }
    }

    #[test]
    fn history_round_trips_including_identity_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history = vec![
            EpochStats {
                epoch: 0,
                gating_loss: 0.6931471805599453,
                task_loss: 1.0986122886681098,
                alignment_loss: 0.1,
                train_accuracy: 0.5,
                val_accuracy: 0.4375,
            },
            EpochStats {
                epoch: 1,
                gating_loss: 0.5,
                task_loss: 0.9,
                alignment_loss: 0.05,
                train_accuracy: 0.75,
                val_accuracy: 0.5625,
            },
        ];
        write_history(&path, &stamp(), &history).unwrap();
        let (read_stamp, rows) = read_history(&path).unwrap();
        assert_eq!(read_stamp, stamp());
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].l1.to_bits(), history[0].gating_loss.to_bits());
        assert_eq!(rows[1].val_accuracy.to_bits(), history[1].val_accuracy.to_bits());
    }

    #[test]
    fn env_results_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env_results.csv");
        let results = vec![
            EnvResult {
                env_index: 0,
                env_name: "identity".into(),
                metric: Metric::Accuracy,
                value: 0.8125,
                seed: 101,
            },
            EnvResult {
                env_index: 3,
                env_name: "drop_edge".into(),
                metric: Metric::Accuracy,
                value: 0.1234567890123456789,
                seed: 101,
            },
        ];
        write_env_results(&path, &stamp(), &results).unwrap();
        let (read_stamp, rows) = read_env_results(&path).unwrap();
        assert_eq!(read_stamp, stamp());
        assert_eq!(rows[1].value.to_bits(), results[1].value.to_bits());
        assert_eq!(rows[1].env_name, "drop_edge");
    }

    #[test]
    fn matrix_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let names = vec!["drop_edge".to_string(), "add_edge".to_string()];
        let m = ndarray::array![[0.1, 1.0 / 3.0], [2.0_f64.sqrt(), 0.0]];
        write_atomic(&path, &matrix_csv(&stamp(), &names, &m)).unwrap();
        let (read_stamp, read_names, read_m) = read_matrix(&path).unwrap();
        assert_eq!(read_stamp, stamp());
        assert_eq!(read_names, names);
        for (a, b) in m.iter().zip(read_m.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_identity_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "epoch,l1\n0,1.0\n").unwrap();
        assert!(read_history(&path).is_err());
    }
}
