//! Report bundles: one JSON with everything, per-report metric JSONs, CSVs
//! of curves and deltas, and a markdown summary laid out like the usual
//! comparison tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vegecast_core::{MetricsReport, Target};

use crate::ablation::AblationReport;
use crate::error::{Error, Result};
use crate::scoring::Evaluation;
use crate::whatif::WhatIfSummary;

pub const BANNER: &str = "Desk-scale results on a synthetic corpus. Absolute values are not \
comparable to numbers published for real satellite benchmarks; only relative comparisons \
within this report are meaningful.";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub what_if: Vec<WhatIfSummary>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writes the bundle into `dir` (created if needed) and returns the paths
/// written, in a stable order.
pub fn write_bundle(dir: &Path, bundle: &ReportBundle) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("report.json");
    write(&path, &json(bundle))?;
    written.push(path);

    if let Some(ev) = &bundle.evaluation {
        let mdir = dir.join("metrics");
        std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        for f in &ev.forecasters {
            for r in &f.reports {
                let path = mdir.join(format!("{}_{}.json", f.name, r.target.name()));
                write(&path, &json(r))?;
                written.push(path);
            }
        }
        let path = dir.join("lead_time.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["forecaster", "target", "masked", "lead", "rmse", "stderr"])
            .map_err(|e| csv_err(&path, e))?;
        for c in ev.forecasters.iter().filter_map(|f| f.lead_curve.as_ref()) {
            for (i, (r, se)) in c.rmse.iter().zip(&c.stderr).enumerate() {
                w.write_record([
                    c.forecaster.clone(),
                    c.target.name().to_string(),
                    c.masked.to_string(),
                    (i + 1).to_string(),
                    format!("{r:.6}"),
                    format!("{se:.6}"),
                ])
                .map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    if let Some(ab) = &bundle.ablation {
        let path = dir.join("ablation.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["config", "seed", "num_params", "ndvi_rmse"])
            .map_err(|e| csv_err(&path, e))?;
        for r in &ab.runs {
            w.write_record([
                r.name.clone(),
                r.seed.to_string(),
                r.num_params.to_string(),
                format!("{:.6}", r.ndvi_rmse),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    if !bundle.what_if.is_empty() {
        let path = dir.join("what_if.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["variable", "scale", "lead", "mean_ndvi_delta"])
            .map_err(|e| csv_err(&path, e))?;
        for s in &bundle.what_if {
            for (i, d) in s.mean_delta_per_lead.iter().enumerate() {
                w.write_record([s.variable.clone(), s.scale.to_string(), (i + 1).to_string(), format!("{d:.6}")])
                    .map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let path = dir.join("summary.md");
    write(&path, &render_markdown(bundle))?;
    written.push(path);
    Ok(written)
}

fn cell(reports: &[MetricsReport], target: Target) -> (String, String) {
    match reports.iter().find(|r| r.target == target) {
        Some(r) => (format!("{:.4}", r.aggregate.rmse), format!("{:.4}", r.aggregate.ssim)),
        None => ("n/a".into(), "n/a".into()),
    }
}

fn table_header(out: &mut String, first: &str) {
    let mut cols = vec![first.to_string()];
    for t in Target::TABLE {
        let n = t.name().to_uppercase();
        cols.push(format!("{n} RMSE"));
        cols.push(format!("{n} SSIM"));
    }
    let _ = writeln!(out, "| {} |", cols.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
}

fn table_row(out: &mut String, name: &str, reports: &[MetricsReport]) {
    let mut cols = vec![name.to_string()];
    for t in Target::TABLE {
        let (r, s) = cell(reports, t);
        cols.push(r);
        cols.push(s);
    }
    let _ = writeln!(out, "| {} |", cols.join(" | "));
}

pub fn render_markdown(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Forecast evaluation\n\n> {BANNER}\n");
    if let Some(ev) = &bundle.evaluation {
        let _ = writeln!(
            out,
            "## Overall comparison\n\n{} test cubes, {} pixels.\n",
            ev.num_cubes,
            if ev.masked { "vegetated" } else { "all" }
        );
        table_header(&mut out, "Forecaster");
        for f in &ev.forecasters {
            if f.reports.is_empty() {
                let _ = writeln!(out, "| {} | unavailable |{}", f.name, " |".repeat(5));
            } else {
                table_row(&mut out, &f.name, &f.reports);
            }
        }
        let curves: Vec<_> = ev.forecasters.iter().filter_map(|f| f.lead_curve.as_ref()).collect();
        if let Some(first) = curves.first() {
            let _ = writeln!(out, "\n## {} RMSE by lead time\n", ev.curve_target.name().to_uppercase());
            let names: Vec<&str> = curves.iter().map(|c| c.forecaster.as_str()).collect();
            let _ = writeln!(out, "| Lead | {} |", names.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(names.len() + 1));
            for lead in 0..first.rmse.len() {
                let vals: Vec<String> = curves
                    .iter()
                    .map(|c| c.rmse.get(lead).map_or("n/a".into(), |v| format!("{v:.4}")))
                    .collect();
                let _ = writeln!(out, "| {} | {} |", lead + 1, vals.join(" | "));
            }
        }
    }
    if let Some(ab) = &bundle.ablation {
        let _ = writeln!(out, "\n## Ablations\n\nSeeds: {:?}. NDVI RMSE is the mean over seeds ± one standard error.\n", ab.seeds);
        let _ = writeln!(out, "| Configuration | Parameters | NDVI RMSE |\n|---|---|---|");
        for s in &ab.summary {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} ± {:.4} |",
                s.name, s.num_params, s.ndvi_rmse_mean, s.ndvi_rmse_stderr
            );
        }
        if let Some(first_seed) = ab.seeds.first() {
            let _ = writeln!(out, "\nPer-configuration tables (seed {first_seed}):\n");
            table_header(&mut out, "Configuration");
            for r in ab.runs.iter().filter(|r| r.seed == *first_seed) {
                table_row(&mut out, &r.name, &r.reports);
            }
        }
    }
    if !bundle.what_if.is_empty() {
        let _ = writeln!(
            out,
            "\n## What-if\n\n| Variable | Scale | Final-lead mean NDVI delta | + / − | p (+) | p (−) | max abs delta |\n|---|---|---|---|---|---|---|"
        );
        for s in &bundle.what_if {
            let _ = writeln!(
                out,
                "| {} | {} | {:+.5} | {} / {} | {:.2e} | {:.2e} | {:.5} |",
                s.variable, s.scale, s.final_lead_mean, s.sign.positive, s.sign.negative, s.sign.p_positive, s.sign.p_negative, s.max_abs_delta
            );
        }
    }
    out
}
