//! Consolidated reporting across finished experiments: reads run manifests,
//! merges their per-run CSV artifacts, and emits a consolidated CSV, a text
//! summary, a log-scale gradient-norm chart, and grouped metric bars.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::manifest::{ManifestError, RunManifest};
use crate::plot::{self, BarGroup, Series};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: line {line}: {msg}")]
    BadCsv { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Plot(#[from] plot::PlotError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One row of a per-run metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: u64,
    pub balanced_ratio: f64,
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub fid: Option<f64>,
}

pub const METRICS_HEADER: &str = "variant,seed,balanced_ratio,class,precision,recall,f_score,fid";

/// One repetition's artifacts, loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub method: String,
    pub seed: u64,
    pub balanced_ratio: f64,
    pub metrics: Vec<MetricsRow>,
    /// (epoch, generator gradient norm) pairs from the training log.
    pub grad_norms: Vec<(f64, f64)>,
}

fn bad(path: &Path, line: usize, msg: impl Into<String>) -> ReportError {
    ReportError::BadCsv { path: path.to_path_buf(), line, msg: msg.into() }
}

fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, ReportError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        other => {
            return Err(bad(path, 1, format!("unexpected header {:?}", other.map(|x| x.1))))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(bad(path, i + 1, format!("expected 8 cells, got {}", cells.len())));
        }
        let num = |j: usize| -> Result<f64, ReportError> {
            cells[j].parse().map_err(|_| bad(path, i + 1, format!("bad number `{}`", cells[j])))
        };
        rows.push(MetricsRow {
            variant: cells[0].to_string(),
            seed: cells[1].parse().map_err(|_| bad(path, i + 1, "bad seed"))?,
            balanced_ratio: num(2)?,
            class: cells[3].parse().map_err(|_| bad(path, i + 1, "bad class"))?,
            precision: num(4)?,
            recall: num(5)?,
            f_score: num(6)?,
            fid: if cells[7].is_empty() { None } else { Some(num(7)?) },
        });
    }
    Ok(rows)
}

/// Pulls (epoch, grad_norm_g) out of a training log CSV, skipping rows
/// where the norm column is empty.
fn parse_grad_norms(path: &Path) -> Result<Vec<(f64, f64)>, ReportError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or("");
    let cols: Vec<&str> = header.split(',').collect();
    let epoch_at = cols.iter().position(|c| *c == "epoch").ok_or_else(|| {
        bad(path, 1, "missing `epoch` column")
    })?;
    let norm_at = cols.iter().position(|c| *c == "grad_norm_g").ok_or_else(|| {
        bad(path, 1, "missing `grad_norm_g` column")
    })?;
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let epoch: f64 = cells
            .get(epoch_at)
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(path, i + 1, "bad epoch"))?;
        let cell = cells.get(norm_at).copied().unwrap_or("");
        if cell.is_empty() {
            continue;
        }
        let norm: f64 =
            cell.parse().map_err(|_| bad(path, i + 1, format!("bad norm `{cell}`")))?;
        out.push((epoch, norm));
    }
    Ok(out)
}

/// Loads every run a manifest references; paths resolve relative to the
/// manifest file's directory.
pub fn load_manifest_runs(manifest_path: &Path) -> Result<Vec<LoadedRun>, ReportError> {
    let manifest = RunManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .runs
        .iter()
        .map(|run| {
            Ok(LoadedRun {
                method: manifest.method.clone(),
                seed: run.seed,
                balanced_ratio: manifest.balanced_ratio,
                metrics: parse_metrics_csv(&base.join(&run.metrics_csv))?,
                grad_norms: parse_grad_norms(&base.join(&run.training_log_csv))?,
            })
        })
        .collect()
}

/// Macro average over the per-class rows of one run.
fn macro_f(rows: &[MetricsRow]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().map(|r| r.f_score).sum::<f64>() / rows.len() as f64
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Files a report emits.
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub consolidated_csv: PathBuf,
    pub summary_txt: PathBuf,
    pub gradient_plot: PathBuf,
    pub metric_bars: PathBuf,
}

/// Merges the given manifests into one report directory. The consolidated
/// CSV holds exactly one row per run and class; the gradient chart overlays
/// one mean curve per method; the bar chart groups mean macro F by
/// balanced ratio.
pub fn write_report(out_dir: &Path, manifest_paths: &[PathBuf]) -> Result<ReportPaths, ReportError> {
    std::fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    for path in manifest_paths {
        runs.extend(load_manifest_runs(path)?);
    }

    let paths = ReportPaths {
        consolidated_csv: out_dir.join("consolidated.csv"),
        summary_txt: out_dir.join("summary.txt"),
        gradient_plot: out_dir.join("gradient_norms.png"),
        metric_bars: out_dir.join("metric_bars.png"),
    };

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for run in &runs {
        for r in &run.metrics {
            let fid = r.fid.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                r.variant, r.seed, r.balanced_ratio, r.class, r.precision, r.recall, r.f_score, fid
            );
        }
    }
    std::fs::write(&paths.consolidated_csv, csv)?;

    // method -> runs, in first-seen order for stable output
    let mut by_method: Vec<(String, Vec<&LoadedRun>)> = Vec::new();
    for run in &runs {
        match by_method.iter_mut().find(|(m, _)| *m == run.method) {
            Some((_, v)) => v.push(run),
            None => by_method.push((run.method.clone(), vec![run])),
        }
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "{} runs from {} manifests", runs.len(), manifest_paths.len());
    for (method, method_runs) in &by_method {
        let f = mean(method_runs.iter().map(|r| macro_f(&r.metrics)));
        let p = mean(method_runs.iter().flat_map(|r| r.metrics.iter().map(|m| m.precision)));
        let rc = mean(method_runs.iter().flat_map(|r| r.metrics.iter().map(|m| m.recall)));
        let fid = mean(
            method_runs.iter().flat_map(|r| r.metrics.iter().filter_map(|m| m.fid)),
        );
        let _ = write!(
            summary,
            "{method}: {} runs, macro precision {:.4}, macro recall {:.4}, macro f {:.4}",
            method_runs.len(),
            p.unwrap_or(f64::NAN),
            rc.unwrap_or(f64::NAN),
            f.unwrap_or(f64::NAN),
        );
        match fid {
            Some(d) => {
                let _ = writeln!(summary, ", mean feature distance {d:.4}");
            }
            None => {
                let _ = writeln!(summary);
            }
        }
    }
    std::fs::write(&paths.summary_txt, &summary)?;

    // mean gradient-norm curve per method, skipping methods that log none
    let mut grad_series = Vec::new();
    for (method, method_runs) in &by_method {
        let mut by_epoch: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for run in method_runs {
            for &(epoch, norm) in &run.grad_norms {
                by_epoch.entry(epoch as u64).or_default().push(norm);
            }
        }
        let points: Vec<(f64, f64)> = by_epoch
            .into_iter()
            .map(|(e, v)| (e as f64, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        if points.iter().any(|(_, n)| *n > 0.0) {
            grad_series.push(Series { label: method.clone(), points });
        }
    }
    plot::line_chart(
        &paths.gradient_plot,
        "generator gradient norm by epoch",
        "epoch",
        "norm",
        &grad_series,
        true,
    )?;

    // grouped bars: one group per balanced ratio, one bar per method
    let mut ratios: Vec<f64> = runs.iter().map(|r| r.balanced_ratio).collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ratios.dedup();
    let names: Vec<String> = by_method.iter().map(|(m, _)| m.clone()).collect();
    let groups: Vec<BarGroup> = ratios
        .iter()
        .map(|&ratio| BarGroup {
            label: format!("{ratio}"),
            values: by_method
                .iter()
                .map(|(_, method_runs)| {
                    mean(
                        method_runs
                            .iter()
                            .filter(|r| r.balanced_ratio == ratio)
                            .map(|r| macro_f(&r.metrics)),
                    )
                    .unwrap_or(f64::NAN)
                })
                .collect(),
        })
        .collect();
    plot::bar_chart(&paths.metric_bars, "macro f by balanced ratio", "macro f", &names, &groups)?;

    Ok(paths)
}
