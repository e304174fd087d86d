//! The six commands behind the `gmetro` binary. Artifacts live under
//! `<out>/<method>/seed<seed>/`; `report` joins them across methods and
//! seeds. Every command appends one timestamped line to `<out>/run.log`,
//! which is the only place a timestamp ever lands.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use gmetro_core::eval::{
    discover_shifts, evaluate_environments, gating_probe_accuracy, invariance_matrix,
    welch_t_test,
};
use gmetro_core::graph::Graph;
use gmetro_core::model::{Checkpoint, TrainedModel};
use gmetro_core::train::{train, Method};
use gmetro_core::transforms::TransformSet;
use rayon::prelude::*;

use crate::artifacts::{
    self, ComparisonFile, EnvMeanRow, EnvRow, MethodAggregate, MethodContrast, ShiftReportFile,
    Stamp, SummaryRow, WelchSummary,
};
use crate::config::ExperimentConfig;
use crate::data;
use crate::plots::{self, PlotId};

/// A trained artifact the command needs is not on disk yet. Mapped to its
/// own exit code so scripts can distinguish "run train first" from bad input.
#[derive(Debug)]
pub struct CheckpointMissing(pub PathBuf);

impl std::fmt::Display for CheckpointMissing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "checkpoint not found: {} (run `gmetro train` first)",
            self.0.display()
        )
    }
}

impl std::error::Error for CheckpointMissing {}

/// A loaded experiment plus the effective seed list and output root.
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl Run {
    pub fn new(config: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        let seeds = match seed {
            Some(s) => vec![s],
            None => config.seeds.clone(),
        };
        let out = out.unwrap_or_else(|| config.out_dir.clone());
        Self { config, out, seeds }
    }

    fn seed_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.out.join(method.name()).join(format!("seed{seed}"))
    }

    fn pairs(&self) -> Result<Vec<(Method, u64)>> {
        let methods = self.config.training.methods()?;
        Ok(methods
            .iter()
            .flat_map(|&m| self.seeds.iter().map(move |&s| (m, s)))
            .collect())
    }

    /// One line per invocation; timestamps stay out of the numeric artifacts.
    fn log(&self, command: &str) {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let line = format!(
            "{ts} gmetro {command} config_hash={} seeds={:?}\n",
            self.config.hash(),
            self.seeds
        );
        if std::fs::create_dir_all(&self.out).is_ok() {
            if let Ok(mut f) = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.out.join("run.log"))
            {
                let _ = f.write_all(line.as_bytes());
            }
        }
    }
}

fn load_checkpoint(
    run: &Run,
    method: Method,
    seed: u64,
    hash: &str,
    set: &TransformSet,
) -> Result<TrainedModel> {
    let path = run.seed_dir(method, seed).join("checkpoint.json");
    if !path.exists() {
        return Err(CheckpointMissing(path).into());
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.config_hash != hash {
        bail!(
            "{} was trained under config {} but the current config hashes to {hash}",
            path.display(),
            ckpt.config_hash
        );
    }
    if ckpt.seed != seed || ckpt.method != method.name() {
        bail!(
            "{} records method {} seed {}, expected {} seed {seed}",
            path.display(),
            ckpt.method,
            ckpt.seed,
            method.name()
        );
    }
    Ok(ckpt.into_model(Some(set))?)
}

// ---------------------------------------------------------------------------
// train

pub fn train_cmd(run: &Run) -> Result<()> {
    run.log("train");
    let cfg = &run.config;
    let loaded = data::load_dataset(cfg)?;
    let set = cfg.transforms.build_set()?;
    let arch = cfg.model.arch();
    let hash = cfg.hash();
    let envs = set.enumerate_environments(cfg.max_composite_size())?;
    let pairs = run.pairs()?;

    // Runs are independent (each derives all randomness from its own seed),
    // so they can train in parallel; artifacts are written in listed order.
    let results: Vec<_> = pairs
        .par_iter()
        .map(|&(method, seed)| {
            let tc = cfg
                .training
                .train_config(method, cfg.max_composite_size(), seed);
            train(&loaded.split, loaded.num_classes, &set, &arch, &tc)
                .with_context(|| format!("training {} seed {seed}", method.name()))
        })
        .collect();

    for (&(method, seed), result) in pairs.iter().zip(results) {
        let result = result?;
        let dir = run.seed_dir(method, seed);
        let stamp = Stamp {
            config_hash: hash.clone(),
            seed,
        };
        Checkpoint::from_model(&result.model, &hash, seed, method.name())
            .save(&dir.join("checkpoint.json"))?;
        artifacts::write_history(&dir.join("history.csv"), &stamp, &result.history)?;
        artifacts::write_environments(&dir.join("environments.json"), &stamp, &envs)?;
        println!(
            "trained {} seed {seed}: best val accuracy {:.4} at epoch {}",
            method.name(),
            result.best_val_accuracy,
            result.best_epoch
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub fn evaluate_cmd(run: &Run) -> Result<()> {
    run.log("evaluate");
    let cfg = &run.config;
    let loaded = data::load_dataset(cfg)?;
    let set = cfg.transforms.build_set()?;
    let hash = cfg.hash();
    let envs = set.enumerate_environments(cfg.max_composite_size())?;
    for (method, seed) in run.pairs()? {
        let model = load_checkpoint(run, method, seed, &hash, &set)?;
        let results = evaluate_environments(
            &model,
            &loaded.split,
            &envs,
            cfg.evaluation.metric,
            &cfg.evaluation.eval_seeds,
        )?;
        let dir = run.seed_dir(method, seed);
        let stamp = Stamp {
            config_hash: hash.clone(),
            seed,
        };
        artifacts::write_env_results(&dir.join("env_results.csv"), &stamp, &results)?;
        let identity = mean(
            &results
                .iter()
                .filter(|r| r.env_index == 0)
                .map(|r| r.value)
                .collect::<Vec<_>>(),
        );
        let shifted = mean(
            &results
                .iter()
                .filter(|r| r.env_index > 0)
                .map(|r| r.value)
                .collect::<Vec<_>>(),
        );
        println!(
            "evaluated {} seed {seed}: identity {identity:.4}, shifted mean {shifted:.4} over {} environments",
            method.name(),
            envs.len() - 1
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// invariance

pub fn invariance_cmd(run: &Run) -> Result<()> {
    run.log("invariance");
    let cfg = &run.config;
    let loaded = data::load_dataset(cfg)?;
    let set = cfg.transforms.build_set()?;
    let hash = cfg.hash();
    for (method, seed) in run.pairs()? {
        let model = load_checkpoint(run, method, seed, &hash, &set)?;
        let Some(moe) = model.as_moe() else {
            println!(
                "invariance {} seed {seed}: skipped (single model, no per-component experts)",
                method.name()
            );
            continue;
        };
        let mut sample: Vec<&Graph> = data::probe_sources(&loaded.split);
        sample.truncate(cfg.evaluation.invariance_sample);
        let matrix = invariance_matrix(
            moe,
            &sample,
            &set,
            cfg.evaluation.invariance_trials,
            seed,
            cfg.evaluation.norm_mode,
        )?;
        let dir = run.seed_dir(method, seed);
        let stamp = Stamp {
            config_hash: hash.clone(),
            seed,
        };
        artifacts::write_invariance(&dir, &stamp, &matrix)?;
        println!(
            "invariance {} seed {seed}: {}/{} rows diagonal-dominant",
            method.name(),
            matrix.diagonal_dominant_rows(),
            matrix.kind_names.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// discover

pub fn discover_cmd(run: &Run) -> Result<()> {
    run.log("discover");
    let cfg = &run.config;
    let Some(disc) = &cfg.discover else {
        bail!("config has no [discover] section; set discover.planted to a transform kind");
    };
    let loaded = data::load_dataset(cfg)?;
    let set = cfg.transforms.build_set()?;
    let hash = cfg.hash();
    let target = data::planted_target(&loaded.split, disc)?;
    let target_refs: Vec<&Graph> = target.iter().collect();
    for (method, seed) in run.pairs()? {
        let model = load_checkpoint(run, method, seed, &hash, &set)?;
        let Some(moe) = model.as_moe() else {
            println!(
                "discover {} seed {seed}: skipped (single model has no gate)",
                method.name()
            );
            continue;
        };
        let mut report = discover_shifts(moe, &target_refs)?;
        report.gating_probe_accuracy = Some(gating_probe_accuracy(
            moe,
            &data::probe_sources(&loaded.split),
            &set,
            seed,
        )?);
        let stamp = Stamp {
            config_hash: hash.clone(),
            seed,
        };
        let file = ShiftReportFile::new(&stamp, method.name(), disc.planted.name(), &report);
        let dir = run.seed_dir(method, seed);
        artifacts::write_shift_report(&dir.join("shift_report.json"), &file)?;
        let top = file.top_component.clone().unwrap_or_else(|| "none".into());
        println!(
            "discover {} seed {seed}: top component {top}, probe accuracy {:.4}",
            method.name(),
            file.gating_probe_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report

/// One method and seed's evaluation, reduced to one value per environment
/// (the mean over the evaluation seeds). Entries follow `run.seeds` order.
struct SeedEval {
    env_means: BTreeMap<usize, f64>,
}

fn reduce_env_rows(rows: &[EnvRow]) -> (BTreeMap<usize, String>, BTreeMap<usize, f64>) {
    let mut names = BTreeMap::new();
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        names.entry(r.env_index).or_insert_with(|| r.env_name.clone());
        acc.entry(r.env_index).or_default().push(r.value);
    }
    let means = acc.into_iter().map(|(i, vs)| (i, mean(&vs))).collect();
    (names, means)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

fn shifted_mean(env_means: &BTreeMap<usize, f64>) -> f64 {
    let shifted: Vec<f64> = env_means
        .iter()
        .filter(|(&i, _)| i > 0)
        .map(|(_, &v)| v)
        .collect();
    mean(&shifted)
}

pub fn report_cmd(run: &Run) -> Result<()> {
    run.log("report");
    let cfg = &run.config;
    let hash = cfg.hash();
    let methods = cfg.training.methods()?;
    let metric = cfg.evaluation.metric.name();

    // Gather per-seed environment results, refusing artifacts from other
    // configs outright.
    let mut env_names: BTreeMap<usize, String> = BTreeMap::new();
    let mut per_method: Vec<(Method, Vec<SeedEval>)> = Vec::new();
    for &method in &methods {
        let mut evals = Vec::new();
        for &seed in &run.seeds {
            let path = run.seed_dir(method, seed).join("env_results.csv");
            if !path.exists() {
                bail!(
                    "{} is missing; run `gmetro evaluate` for {} seed {seed} first",
                    path.display(),
                    method.name()
                );
            }
            let (stamp, rows) = artifacts::read_env_results(&path)?;
            if stamp.config_hash != hash {
                bail!(
                    "{} was produced under config {} but the current config hashes to {hash}; refusing to join",
                    path.display(),
                    stamp.config_hash
                );
            }
            if stamp.seed != seed {
                bail!("{} is stamped seed {}, expected {seed}", path.display(), stamp.seed);
            }
            let (names, env_means) = reduce_env_rows(&rows);
            for (i, n) in names {
                let prev = env_names.insert(i, n.clone());
                if let Some(prev) = prev {
                    if prev != n {
                        bail!(
                            "environment {i} is named {prev:?} in one artifact and {n:?} in another"
                        );
                    }
                }
            }
            evals.push(SeedEval { env_means });
        }
        per_method.push((method, evals));
    }

    // Per-environment cross-seed table.
    let mut env_rows = Vec::new();
    for (method, evals) in &per_method {
        for (&i, name) in &env_names {
            let vals: Vec<f64> = evals.iter().filter_map(|e| e.env_means.get(&i).copied()).collect();
            if vals.is_empty() {
                continue;
            }
            let (m, s) = mean_std(&vals);
            env_rows.push(EnvMeanRow {
                method: method.name().to_string(),
                env_index: i,
                env_name: name.clone(),
                metric: metric.to_string(),
                mean: m,
                std: s,
                n_seeds: vals.len(),
            });
        }
    }
    artifacts::write_env_means(&run.out.join("env_means.csv"), &hash, &run.seeds, &env_rows)?;

    // Method aggregates over the shifted (non-identity) environments.
    let aggregates: Vec<MethodAggregate> = per_method
        .iter()
        .map(|(method, evals)| {
            let per_seed: Vec<f64> = evals.iter().map(|e| shifted_mean(&e.env_means)).collect();
            let (m, s) = mean_std(&per_seed);
            let identity: Vec<f64> = evals
                .iter()
                .filter_map(|e| e.env_means.get(&0).copied())
                .collect();
            MethodAggregate {
                method: method.name().to_string(),
                per_seed_shifted_mean: per_seed,
                mean: m,
                std: s,
                identity_mean: mean(&identity),
            }
        })
        .collect();

    // Contrast every baseline against the subject (the first method).
    let subject = &aggregates[0];
    let mut contrasts = Vec::new();
    for agg in &aggregates[1..] {
        let margins: Vec<f64> = subject
            .per_seed_shifted_mean
            .iter()
            .zip(&agg.per_seed_shifted_mean)
            .map(|(a, b)| a - b)
            .collect();
        let welch = if subject.per_seed_shifted_mean.len() >= 2 && agg.per_seed_shifted_mean.len() >= 2
        {
            Some(WelchSummary::from(&welch_t_test(
                &subject.per_seed_shifted_mean,
                &agg.per_seed_shifted_mean,
            )?))
        } else {
            None
        };
        contrasts.push(MethodContrast {
            method: subject.method.clone(),
            baseline: agg.method.clone(),
            margin_mean: mean(&margins),
            positive_seeds: margins.iter().filter(|&&m| m > 0.0).count(),
            per_seed_margin: margins,
            welch,
        });
    }

    let summary_rows: Vec<SummaryRow> = aggregates
        .iter()
        .enumerate()
        .map(|(i, agg)| {
            let contrast = (i > 0).then(|| &contrasts[i - 1]);
            SummaryRow {
                method: agg.method.clone(),
                metric: metric.to_string(),
                n_seeds: agg.per_seed_shifted_mean.len(),
                identity_mean: agg.identity_mean,
                shifted_mean: agg.mean,
                shifted_std: agg.std,
                subject_margin: contrast.map(|c| c.margin_mean),
                welch_t: contrast.and_then(|c| c.welch.as_ref()).map(|w| w.t),
                welch_p: contrast.and_then(|c| c.welch.as_ref()).map(|w| w.p_value),
            }
        })
        .collect();
    artifacts::write_summary(&run.out.join("summary.csv"), &hash, &run.seeds, &summary_rows)?;
    artifacts::write_comparison(
        &run.out.join("comparison.json"),
        &ComparisonFile {
            config_hash: hash.clone(),
            seeds: run.seeds.clone(),
            metric: metric.to_string(),
            methods: aggregates,
            contrasts,
        },
    )?;

    write_report_plots(run, &hash, metric, &env_names, &per_method, &env_rows)?;
    print_summary(metric, &summary_rows);
    Ok(())
}

fn write_report_plots(
    run: &Run,
    hash: &str,
    metric: &str,
    env_names: &BTreeMap<usize, String>,
    per_method: &[(Method, Vec<SeedEval>)],
    env_rows: &[EnvMeanRow],
) -> Result<()> {
    let plot_dir = run.out.join("plots");
    std::fs::create_dir_all(&plot_dir)
        .with_context(|| format!("creating {}", plot_dir.display()))?;
    let names: Vec<String> = env_names.values().cloned().collect();
    let series: Vec<(String, Vec<f64>)> = per_method
        .iter()
        .map(|(method, _)| {
            let values = env_names
                .keys()
                .map(|i| {
                    env_rows
                        .iter()
                        .find(|r| r.method == method.name() && r.env_index == *i)
                        .map(|r| r.mean)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            (method.name().to_string(), values)
        })
        .collect();
    plots::env_bars(
        &plot_dir.join("env_results.svg"),
        &PlotId::seeds(hash, &run.seeds),
        metric,
        &names,
        &series,
    )?;

    // Single-run figures come from the subject's first seed.
    let subject = per_method[0].0;
    let seed = run.seeds[0];
    let dir = run.seed_dir(subject, seed);

    let history_path = dir.join("history.csv");
    if history_path.exists() {
        let (stamp, rows) = artifacts::read_history(&history_path)?;
        plots::history_curves(&plot_dir.join("history.svg"), &PlotId::single(&stamp), &rows)?;
    }
    let inv_path = dir.join("invariance_normalized.csv");
    if inv_path.exists() {
        let (stamp, kind_names, matrix) = artifacts::read_matrix(&inv_path)?;
        plots::invariance_heatmap(
            &plot_dir.join("invariance.svg"),
            &PlotId::single(&stamp),
            &kind_names,
            &matrix,
        )?;
    }
    let shift_path = dir.join("shift_report.json");
    if shift_path.exists() {
        let file = artifacts::read_shift_report(&shift_path)?;
        plots::shift_probabilities(
            &plot_dir.join("shift_report.svg"),
            &PlotId::single(&Stamp {
                config_hash: file.config_hash.clone(),
                seed: file.seed,
            }),
            &file.component_names,
            &file.mean_probs,
        )?;
    }
    Ok(())
}

fn print_summary(metric: &str, rows: &[SummaryRow]) {
    println!(
        "{:<12} {:>3}  {:>14}  {:>22}  {:>9}  {:>9}",
        "method", "n", format!("identity {metric}"), format!("shifted {metric} (mean±std)"), "margin", "p-value"
    );
    for r in rows {
        let margin = r
            .subject_margin
            .map(|m| format!("{m:+.4}"))
            .unwrap_or_else(|| "-".into());
        let p = r
            .welch_p
            .map(|p| format!("{p:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:>3}  {:>14.4}  {:>15.4} ± {:.4}  {:>9}  {:>9}",
            r.method, r.n_seeds, r.identity_mean, r.shifted_mean, r.shifted_std, margin, p
        );
    }
}

// ---------------------------------------------------------------------------
// gen-data

pub fn gen_data_cmd(run: &Run) -> Result<()> {
    run.log("gen-data");
    let dir = run.out.join("dataset");
    let loaded = data::write_generated(&run.config, &dir)?;
    let split = &loaded.split;
    println!(
        "wrote {} dataset ({} train / {} val / {} test, {} classes) to {}",
        run.config.task,
        split.part_len(gmetro_core::graph::SplitPart::Train),
        split.part_len(gmetro_core::graph::SplitPart::Val),
        split.part_len(gmetro_core::graph::SplitPart::Test),
        loaded.num_classes,
        dir.display()
    );
    Ok(())
}
