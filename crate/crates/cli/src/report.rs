//! `report`: a machine-readable summary and plots for a finished run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{MaskRecord, EVAL_TABLE, MASK_INDEX};
use crate::plot;
use crate::run::{read_json, write_json, RunManifest, METRICS, RUN_MANIFEST};

pub const SUMMARY: &str = "report/summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub first: f64,
    pub last: f64,
    pub min: f64,
    /// Mean over the last tenth of the trace.
    pub tail_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaeSummary {
    pub items: usize,
    pub baseline_mean: f64,
    pub trained_mean: Option<f64>,
    pub wins: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub masks: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Counts over 10 equal bins of `[0, 1]`.
    pub bins: Vec<usize>,
    pub base_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub subcommand: String,
    pub root_seed: u64,
    pub config_hash: String,
    pub complete: bool,
    pub seeds: BTreeMap<String, u64>,
    pub losses: BTreeMap<String, LossSummary>,
    pub gae: Option<GaeSummary>,
    pub mask_ratios: Option<RatioSummary>,
    pub metrics: Value,
    /// Plot files, relative to the run directory.
    pub plots: Vec<String>,
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn loss_summary(values: &[f64]) -> Option<LossSummary> {
    let first = *values.first()?;
    let tail = &values[values.len() - (values.len() / 10).max(1)..];
    Some(LossSummary {
        steps: values.len(),
        first,
        last: *values.last()?,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        tail_mean: tail.iter().sum::<f64>() / tail.len() as f64,
    })
}

/// Reads `run_dir`, writes `report/summary.json` and `report/plots/`, and
/// returns the summary. Nothing time-dependent goes into the output.
pub fn report(run_dir: &Path) -> Result<Summary> {
    let manifest: RunManifest = read_json(&run_dir.join(RUN_MANIFEST))?;
    let metrics: Value = if run_dir.join(METRICS).exists() { read_json(&run_dir.join(METRICS))? } else { Value::Null };
    let plot_dir = run_dir.join("report/plots");
    fs::create_dir_all(&plot_dir)?;
    let mut plots = Vec::new();

    let mut losses = BTreeMap::new();
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let loss_dir = run_dir.join("losses");
    if loss_dir.is_dir() {
        let mut files: Vec<_> = fs::read_dir(&loss_dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        files.sort();
        for f in files.iter().filter(|p| p.extension().is_some_and(|e| e == "csv")) {
            let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let rows = read_csv(f)?;
            let values: Vec<f64> = rows.iter().filter_map(|r| r.get(1)?.parse().ok()).collect();
            if let Some(s) = loss_summary(&values) {
                losses.insert(name.clone(), s);
                curves.push((name, values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect()));
            }
        }
    }
    for (name, pts) in &curves {
        let rel = format!("report/plots/{name}_loss.svg");
        plot::lines(&run_dir.join(&rel), &format!("{name} loss"), "loss", &[(name.as_str(), pts.clone())])?;
        plots.push(rel);
    }

    let gae = if run_dir.join(EVAL_TABLE).exists() {
        let rows = read_csv(&run_dir.join(EVAL_TABLE))?;
        let base: Vec<f64> = rows.iter().filter_map(|r| r.get(1)?.parse().ok()).collect();
        let trained: Vec<f64> = rows.iter().filter_map(|r| r.get(2)?.parse().ok()).collect();
        let n = base.len();
        let has_trained = trained.len() == n && n > 0;
        let rel = "report/plots/gae_hist.svg".to_string();
        let mut series: Vec<(&str, &[f64])> = vec![("baseline decoder", &base)];
        if has_trained {
            series.push(("conditional decoder", &trained));
        }
        plot::histogram(&run_dir.join(&rel), "G@e on the color-shift set", "G@e", &series, 24)?;
        plots.push(rel);
        Some(GaeSummary {
            items: n,
            baseline_mean: base.iter().sum::<f64>() / n.max(1) as f64,
            trained_mean: has_trained.then(|| trained.iter().sum::<f64>() / n as f64),
            wins: has_trained.then(|| base.iter().zip(&trained).filter(|(b, t)| t < b).count()),
        })
    } else {
        None
    };

    let mask_ratios = if run_dir.join(MASK_INDEX).exists() {
        let text = fs::read_to_string(run_dir.join(MASK_INDEX))?;
        let recs: Vec<MaskRecord> = text.lines().map(serde_json::from_str).collect::<Result<_, _>>()?;
        let ratios: Vec<f64> = recs.iter().map(|r| r.ratio).collect();
        let mut base_counts = BTreeMap::new();
        for r in &recs {
            *base_counts.entry(r.base.as_str().to_string()).or_default() += 1;
        }
        let rel = "report/plots/mask_ratio_hist.svg".to_string();
        plot::histogram(&run_dir.join(&rel), "mask ratio", "ratio", &[("masks", &ratios)], 20)?;
        plots.push(rel);
        Some(RatioSummary {
            masks: ratios.len(),
            mean: ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
            min: ratios.iter().copied().reduce(f64::min).unwrap_or(0.0),
            max: ratios.iter().copied().reduce(f64::max).unwrap_or(0.0),
            bins: plot::bin_counts(&ratios, 10, 0.0, 1.0),
            base_counts,
        })
    } else {
        None
    };

    let summary = Summary {
        subcommand: manifest.subcommand,
        root_seed: manifest.root_seed,
        config_hash: manifest.config_hash,
        complete: manifest.complete,
        seeds: manifest.seeds,
        losses,
        gae,
        mask_ratios,
        metrics,
        plots,
    };
    write_json(&run_dir.join(SUMMARY), &summary)?;
    Ok(summary)
}

pub fn parse_summary(text: &str) -> Result<Summary> {
    Ok(serde_json::from_str(text)?)
}
