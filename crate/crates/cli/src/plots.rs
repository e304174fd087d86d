//! Static SVG figures for `report`. Every figure embeds the identity comment
//! right after the opening tag, like the CSV artifacts do.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use ndarray::Array2;
use plotters::prelude::*;

use crate::artifacts::{HistoryRow, Stamp};

/// Identity written into a figure. `seed_label` may name one seed or a
/// `|`-joined list when the figure aggregates across seeds.
pub struct PlotId {
    pub config_hash: String,
    pub seed_label: String,
}

impl PlotId {
    pub fn single(stamp: &Stamp) -> Self {
        Self {
            config_hash: stamp.config_hash.clone(),
            seed_label: stamp.seed.to_string(),
        }
    }

    pub fn seeds(config_hash: &str, seeds: &[u64]) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seed_label: seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join("|"),
        }
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Insert the identity comment after the first tag of the SVG.
fn stamp_svg(path: &Path, id: &PlotId) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cut = text
        .find('>')
        .map(|i| i + 1)
        .ok_or_else(|| anyhow!("{} is not an SVG document", path.display()))?;
    let stamped = format!(
        "{}\n<!-- config_hash={} seed={} -->{}",
        &text[..cut],
        id.config_hash,
        id.seed_label,
        &text[cut..]
    );
    std::fs::write(path, stamped).with_context(|| format!("writing {}", path.display()))
}

/// Grouped bars: one group per environment, one bar per method.
pub fn env_bars(
    path: &Path,
    id: &PlotId,
    metric: &str,
    env_names: &[String],
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    if env_names.is_empty() || series.is_empty() {
        return Err(anyhow!("nothing to plot"));
    }
    let n = env_names.len();
    let m = series.len();
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    {
        let root = SVGBackend::new(path, (1000, 520)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("plot: {e}"))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .caption(format!("{metric} per environment"), ("sans-serif", 22))
            .x_label_area_size(130)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..n as f64, 0f64..y_max)
            .map_err(|e| anyhow!("plot: {e}"))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if i < n && (x - i as f64 - 0.5).abs() < 0.5 {
                    env_names[i].clone()
                } else {
                    String::new()
                }
            })
            .x_label_style(("sans-serif", 12).into_font().transform(FontTransform::Rotate90))
            .y_desc(metric)
            .draw()
            .map_err(|e| anyhow!("plot: {e}"))?;
        let slot = 0.8 / m as f64;
        for (si, (name, values)) in series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            chart
                .draw_series(values.iter().enumerate().map(|(i, &v)| {
                    let x0 = i as f64 + 0.1 + si as f64 * slot;
                    Rectangle::new([(x0, 0.0), (x0 + slot * 0.9, v)], color.filled())
                }))
                .map_err(|e| anyhow!("plot: {e}"))?
                .label(name.clone())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(|e| anyhow!("plot: {e}"))?;
        root.present().map_err(|e| anyhow!("plot: {e}"))?;
    }
    stamp_svg(path, id)
}

/// Loss components and accuracies over epochs, two stacked panels.
pub fn history_curves(path: &Path, id: &PlotId, rows: &[HistoryRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(anyhow!("empty history"));
    }
    let epochs = rows.len();
    {
        let root = SVGBackend::new(path, (900, 640)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("plot: {e}"))?;
        let (top, bottom) = root.split_vertically(320);

        let loss_max = rows
            .iter()
            .flat_map(|r| [r.l1, r.l2_task, r.l2_align])
            .fold(0.0f64, f64::max)
            .max(1e-9)
            * 1.05;
        let mut losses = ChartBuilder::on(&top)
            .margin(12)
            .caption("training losses", ("sans-serif", 20))
            .x_label_area_size(28)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..(epochs.max(2) - 1) as f64, 0f64..loss_max)
            .map_err(|e| anyhow!("plot: {e}"))?;
        losses
            .configure_mesh()
            .y_desc("loss")
            .draw()
            .map_err(|e| anyhow!("plot: {e}"))?;
        for (idx, (name, pick)) in [
            ("gating", (|r: &HistoryRow| r.l1) as fn(&HistoryRow) -> f64),
            ("task", |r| r.l2_task),
            ("alignment", |r| r.l2_align),
        ]
        .into_iter()
        .enumerate()
        {
            let color = PALETTE[idx];
            losses
                .draw_series(LineSeries::new(
                    rows.iter().map(|r| (r.epoch as f64, pick(r))),
                    &color,
                ))
                .map_err(|e| anyhow!("plot: {e}"))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        losses
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(|e| anyhow!("plot: {e}"))?;

        let mut acc = ChartBuilder::on(&bottom)
            .margin(12)
            .caption("accuracy", ("sans-serif", 20))
            .x_label_area_size(28)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..(epochs.max(2) - 1) as f64, 0f64..1f64)
            .map_err(|e| anyhow!("plot: {e}"))?;
        acc.configure_mesh()
            .x_desc("epoch")
            .y_desc("accuracy")
            .draw()
            .map_err(|e| anyhow!("plot: {e}"))?;
        for (idx, (name, pick)) in [
            ("train", (|r: &HistoryRow| r.train_accuracy) as fn(&HistoryRow) -> f64),
            ("val", |r| r.val_accuracy),
        ]
        .into_iter()
        .enumerate()
        {
            let color = PALETTE[idx + 3];
            acc.draw_series(LineSeries::new(
                rows.iter().map(|r| (r.epoch as f64, pick(r))),
                &color,
            ))
            .map_err(|e| anyhow!("plot: {e}"))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        acc.configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(|e| anyhow!("plot: {e}"))?;
        root.present().map_err(|e| anyhow!("plot: {e}"))?;
    }
    stamp_svg(path, id)
}

/// Expert sensitivity heatmap: rows are transform kinds, columns experts.
pub fn invariance_heatmap(
    path: &Path,
    id: &PlotId,
    names: &[String],
    normalized: &Array2<f64>,
) -> Result<()> {
    let k = names.len();
    if k == 0 {
        return Err(anyhow!("empty matrix"));
    }
    {
        let root = SVGBackend::new(path, (640, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("plot: {e}"))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .caption("expert sensitivity to applied transforms", ("sans-serif", 18))
            .x_label_area_size(120)
            .y_label_area_size(120)
            .build_cartesian_2d(0f64..k as f64, 0f64..k as f64)
            .map_err(|e| anyhow!("plot: {e}"))?;
        chart
            .configure_mesh()
            .disable_mesh()
            .x_labels(k)
            .y_labels(k)
            .x_label_formatter(&|x| label_at(names, *x))
            .y_label_formatter(&|y| label_at(names, *y))
            .x_desc("expert")
            .y_desc("applied transform")
            .x_label_style(("sans-serif", 12).into_font().transform(FontTransform::Rotate90))
            .draw()
            .map_err(|e| anyhow!("plot: {e}"))?;
        chart
            .draw_series((0..k).flat_map(|i| {
                (0..k).map(move |j| {
                    let v = normalized[(i, j)].clamp(0.0, 1.0);
                    let c = heat_color(v);
                    // Row 0 at the top: flip the y coordinate.
                    let y0 = (k - 1 - i) as f64;
                    Rectangle::new([(j as f64, y0), (j as f64 + 1.0, y0 + 1.0)], c.filled())
                })
            }))
            .map_err(|e| anyhow!("plot: {e}"))?;
        root.present().map_err(|e| anyhow!("plot: {e}"))?;
    }
    stamp_svg(path, id)
}

/// Mean per-component gate probabilities on a target dataset.
pub fn shift_probabilities(
    path: &Path,
    id: &PlotId,
    names: &[String],
    probs: &[f64],
) -> Result<()> {
    if names.is_empty() || names.len() != probs.len() {
        return Err(anyhow!("component names and probabilities disagree"));
    }
    {
        let root = SVGBackend::new(path, (760, 440)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("plot: {e}"))?;
        let n = names.len();
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .caption("mean gate probability per component", ("sans-serif", 20))
            .x_label_area_size(120)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..n as f64, 0f64..1f64)
            .map_err(|e| anyhow!("plot: {e}"))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| label_at(names, *x))
            .x_label_style(("sans-serif", 12).into_font().transform(FontTransform::Rotate90))
            .y_desc("probability")
            .draw()
            .map_err(|e| anyhow!("plot: {e}"))?;
        chart
            .draw_series(probs.iter().enumerate().map(|(i, &p)| {
                Rectangle::new(
                    [(i as f64 + 0.15, 0.0), (i as f64 + 0.85, p.clamp(0.0, 1.0))],
                    PALETTE[0].filled(),
                )
            }))
            .map_err(|e| anyhow!("plot: {e}"))?;
        root.present().map_err(|e| anyhow!("plot: {e}"))?;
    }
    stamp_svg(path, id)
}

fn label_at(names: &[String], x: f64) -> String {
    let i = x.floor() as usize;
    if i < names.len() && (x - i as f64 - 0.5).abs() < 0.5 {
        names[i].clone()
    } else {
        String::new()
    }
}

/// White (0) to deep blue (1).
fn heat_color(v: f64) -> RGBColor {
    let t = v.clamp(0.0, 1.0);
    let r = 255.0 - t * (255.0 - 31.0);
    let g = 255.0 - t * (255.0 - 80.0);
    let b = 255.0 - t * (255.0 - 160.0);
    RGBColor(r as u8, g as u8, b as u8)
}
