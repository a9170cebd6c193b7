//! Per-group aggregates of run records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::runner::ExperimentRecord;

/// Aggregate of the runs sharing (dataset, batch size, attack, defense).
/// Means and sample standard deviations cover successful runs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub batch_size: usize,
    pub attack: String,
    pub defense: String,
    pub runs: usize,
    pub failed: usize,
    pub psnr_mean: Option<f64>,
    pub psnr_std: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    /// First failure reason in the group.
    pub failure: Option<String>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// Groups in order of first appearance.
pub fn summarize(records: &[ExperimentRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(HarnessError::Summary("no records to summarize".into()));
    }
    let mut groups: Vec<(SummaryRow, Vec<f64>, Vec<f64>)> = Vec::new();
    for r in records {
        let key = (&r.dataset, r.batch_size, &r.attack, &r.defense);
        let pos = groups
            .iter()
            .position(|(g, _, _)| (&g.dataset, g.batch_size, &g.attack, &g.defense) == key);
        let idx = pos.unwrap_or_else(|| {
            groups.push((
                SummaryRow {
                    dataset: r.dataset.clone(),
                    batch_size: r.batch_size,
                    attack: r.attack.clone(),
                    defense: r.defense.clone(),
                    runs: 0,
                    failed: 0,
                    psnr_mean: None,
                    psnr_std: None,
                    ssim_mean: None,
                    ssim_std: None,
                    failure: None,
                },
                Vec::new(),
                Vec::new(),
            ));
            groups.len() - 1
        });
        let (row, psnr, ssim) = &mut groups[idx];
        row.runs += 1;
        match (&r.error, &r.metrics) {
            (None, Some(m)) => {
                psnr.push(m.mean_psnr_db);
                ssim.push(m.mean_ssim);
            }
            (err, _) => {
                row.failed += 1;
                if row.failure.is_none() {
                    row.failure = Some(err.clone().unwrap_or_else(|| "no metrics recorded".into()));
                }
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(mut row, psnr, ssim)| {
            (row.psnr_mean, row.psnr_std) = mean_std(&psnr);
            (row.ssim_mean, row.ssim_std) = mean_std(&ssim);
            row
        })
        .collect())
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Summary(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn pm(mean: Option<f64>, std: Option<f64>, digits: usize) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.digits$} ± {s:.digits$}"),
        _ => "-".into(),
    }
}

/// Fixed-width table: one line per group plus a header.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let header = ["dataset", "batch", "attack", "defense", "runs", "failed", "psnr_db", "ssim"];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.batch_size.to_string(),
                r.attack.clone(),
                r.defense.clone(),
                r.runs.to_string(),
                r.failed.to_string(),
                pm(r.psnr_mean, r.psnr_std, 2),
                pm(r.ssim_mean, r.ssim_std, 3),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |items: &[String]| {
        let padded: Vec<String> = items
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).expect("writing to a String");
    };
    line(&header.map(String::from));
    for row in &cells {
        line(row);
    }
    for r in rows.iter().filter(|r| r.failure.is_some()) {
        let _ = writeln!(
            out,
            "failed: b{} {} {}: {}",
            r.batch_size,
            r.attack,
            r.defense,
            r.failure.as_deref().unwrap_or_default()
        );
    }
    out
}

/// Writes `summary.csv` and `summary.txt` into `dir`.
pub fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    let csv_path = dir.join("summary.csv");
    fs::write(&csv_path, summary_csv(rows)?).map_err(HarnessError::io(&csv_path))?;
    let txt_path = dir.join("summary.txt");
    fs::write(&txt_path, format_summary(rows)).map_err(HarnessError::io(&txt_path))?;
    Ok(())
}

/// Reads every `*/record.json` under `dir`, ordered by run id.
pub fn load_records(dir: &Path) -> Result<Vec<ExperimentRecord>> {
    let entries = fs::read_dir(dir).map_err(HarnessError::io(dir))?;
    let mut records = Vec::new();
    for entry in entries {
        let entry = entry.map_err(HarnessError::io(dir))?;
        let path = entry.path().join("record.json");
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
            let record: ExperimentRecord = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Summary(format!("{}: {e}", path.display())))?;
            records.push(record);
        }
    }
    records.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(records)
}
