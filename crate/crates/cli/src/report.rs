//! Report artifacts: aggregate JSON/text, per-run loss-curve CSVs, and SVG
//! plots, all derived from the run logs under one root directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use iclbench::eval::{build_report, render_report_table, CiMode, EvalReport};
use iclbench::training::{read_log, RunLog};
use iclbench::{Error, Result};

use crate::plots::{curve_svg, robustness_svg};

/// Completed run logs under `run_root`, keyed by directory basename.
fn collect_logs(run_root: &Path) -> Result<BTreeMap<String, RunLog>> {
    let mut logs = BTreeMap::new();
    let entries = fs::read_dir(run_root)
        .map_err(|e| Error::io(run_root.display().to_string(), e))?;
    for entry in entries.flatten() {
        let dir = entry.path();
        let log_path = dir.join("log.jsonl");
        if !log_path.is_file() {
            continue;
        }
        let log = read_log(&log_path)?;
        if log.done.is_none() {
            continue;
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        logs.insert(name, log);
    }
    if logs.is_empty() {
        return Err(Error::MissingRun {
            path: run_root.display().to_string(),
        });
    }
    Ok(logs)
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_curve_csv(path: &Path, log: &RunLog) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Format {
            kind: "csv",
            reason: e.to_string(),
        })?;
    writer
        .write_record(["step", "samples_seen", "train_loss", "test_loss", "aniso_test_loss"])
        .map_err(|e| Error::Format {
            kind: "csv",
            reason: e.to_string(),
        })?;
    for r in &log.records {
        writer
            .write_record([
                r.step.to_string(),
                r.samples_seen.to_string(),
                r.train_loss.map_or(String::new(), |v| v.to_string()),
                r.test_loss.to_string(),
                r.aniso_test_loss.to_string(),
            ])
            .map_err(|e| Error::Format {
                kind: "csv",
                reason: e.to_string(),
            })?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Emits every report artifact under `out_dir` and returns the rendered
/// summary table (also written to `report.txt`).
pub fn emit_report(
    run_root: &Path,
    out_dir: &Path,
    mode: CiMode,
    fraction: f64,
) -> Result<(EvalReport, String)> {
    let report = build_report(run_root, mode, fraction)?;
    let logs = collect_logs(run_root)?;

    let table = render_report_table(&report);
    write_text(&out_dir.join("report.txt"), &table)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_text(&out_dir.join("report.json"), &(json + "\n"))?;

    for (name, log) in &logs {
        write_curve_csv(&out_dir.join("curves").join(format!("{name}.csv")), log)?;
    }

    // One curve plot per configuration, seeds overlaid as a band.
    let mut groups: BTreeMap<(String, usize, usize), Vec<&RunLog>> = BTreeMap::new();
    for log in logs.values() {
        groups
            .entry((log.meta.attention.clone(), log.meta.layers, log.meta.d_model))
            .or_default()
            .push(log);
    }
    for ((attention, layers, d_model), group_logs) in &groups {
        let mut seeds: Vec<u64> = group_logs.iter().map(|l| l.meta.seed).collect();
        seeds.sort_unstable();
        let title = format!("{attention} L{layers} d{d_model}");
        let provenance = format!(
            "config={attention}-l{layers}-d{d_model} seeds={seeds:?} records={}",
            group_logs.iter().map(|l| l.records.len()).sum::<usize>()
        );
        let svg = curve_svg(&title, &provenance, group_logs);
        write_text(
            &out_dir
                .join("plots")
                .join(format!("curves-{attention}-l{layers}-d{d_model}.svg")),
            &svg,
        )?;
    }

    let provenance = format!(
        "ci_mode={} convergence_fraction={} configs={}",
        report.ci_mode,
        report.convergence_fraction,
        report.configs.len()
    );
    let bars = robustness_svg(
        "isotropic vs anisotropic test loss",
        &provenance,
        &report.configs,
    );
    write_text(&out_dir.join("plots").join("robustness.svg"), &bars)?;

    Ok((report, table))
}

