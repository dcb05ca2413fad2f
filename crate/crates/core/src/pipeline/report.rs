//! Cross-run comparison tables built from `metrics/*.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, MANIFEST};
use crate::metrics::MetricReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub task: String,
    pub mode: String,
    pub template: String,
    pub n_records: usize,
    pub n_empty: usize,
    pub bleu: f64,
    /// ROUGE-L F1, the headline ROUGE column.
    pub rouge: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub bertscore: f64,
    pub sbert: f64,
}

impl ReportRow {
    pub fn new(run: &str, r: &MetricReport) -> Self {
        ReportRow {
            run: run.to_string(),
            method: r.method.as_str().to_string(),
            task: r.task.as_str().to_string(),
            mode: r.mode.as_str().to_string(),
            template: r.template.clone(),
            n_records: r.n_records,
            n_empty: r.n_empty,
            bleu: r.bleu,
            rouge: r.rouge.rouge_l,
            rouge1: r.rouge.rouge1,
            rouge2: r.rouge.rouge2,
            bertscore: r.bertscore_f1,
            sbert: r.sbert_cosine,
        }
    }
}

pub fn rows_for_run(run: &str, reports: &[MetricReport]) -> Vec<ReportRow> {
    reports.iter().map(|r| ReportRow::new(run, r)).collect()
}

/// Reads `metrics/*.json` of a run in the method order of its manifest.
pub fn load_reports(run_dir: &Path) -> Result<Vec<MetricReport>, PipelineError> {
    let manifest = run_dir.join(MANIFEST);
    let raw = fs::read(&manifest)
        .map_err(|e| PipelineError::Report(format!("{}: {e}", manifest.display())))?;
    let m: super::Manifest = serde_json::from_slice(&raw)
        .map_err(|e| PipelineError::Report(format!("{}: {e}", manifest.display())))?;
    let mut out = Vec::new();
    for method in &m.config.methods {
        let p = run_dir.join(format!("metrics/{method}.json"));
        if !p.is_file() {
            continue;
        }
        let raw =
            fs::read(&p).map_err(|e| PipelineError::Report(format!("{}: {e}", p.display())))?;
        out.push(
            serde_json::from_slice(&raw)
                .map_err(|e| PipelineError::Report(format!("{}: {e}", p.display())))?,
        );
    }
    if out.is_empty() {
        return Err(PipelineError::Report(format!(
            "{}: no metrics",
            run_dir.display()
        )));
    }
    Ok(out)
}

/// Rows of several runs, in the given order. Runs of different tasks are
/// not comparable and are rejected.
pub fn collect_rows<P: AsRef<Path>>(run_dirs: &[P]) -> Result<Vec<ReportRow>, PipelineError> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for d in run_dirs {
        let d = d.as_ref();
        let label = d
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| d.display().to_string());
        rows.extend(rows_for_run(&label, &load_reports(d)?));
    }
    if let Some(first) = rows.first() {
        if let Some(other) = rows.iter().find(|r| r.task != first.task) {
            return Err(PipelineError::Report(format!(
                "runs mix tasks {} ({}) and {} ({})",
                first.task, first.run, other.task, other.run
            )));
        }
    }
    Ok(rows)
}

const HEADER: [&str; 10] = [
    "run",
    "method",
    "mode",
    "template",
    "n",
    "BLEU",
    "ROUGE",
    "BERTScore",
    "S-BERT",
    "empty",
];

/// Aligned table, scores with two decimals.
pub fn render_text(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                r.method.clone(),
                r.mode.clone(),
                r.template.clone(),
                r.n_records.to_string(),
                format!("{:.2}", r.bleu),
                format!("{:.2}", r.rouge),
                format!("{:.2}", r.bertscore),
                format!("{:.2}", r.sbert),
                r.n_empty.to_string(),
            ]
        })
        .collect();
    let mut width: Vec<usize> = HEADER.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[String]| {
        let parts: Vec<String> = row
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, w))| {
                if i < 4 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&HEADER.map(String::from));
    for row in &cells {
        out.push_str(&line(row));
    }
    out
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<(), PipelineError> {
    let err = |e: csv::Error| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>, PipelineError> {
    let err = |e: csv::Error| PipelineError::Report(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(err)
}
