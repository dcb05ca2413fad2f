//! Automatic evaluation of explanation records against their references.

pub mod overlap;
pub mod semantic;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::explain::{ExplanationRecord, Method, Mode};
use crate::gateway::Gateway;

pub use overlap::{bleu, bleu_from_stats, rouge, BleuStats, RougeScores, BLEU_MAX_N};
pub use semantic::{bertscore_f1, sbert_cosine};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    Empty,
    #[error("records mix {0}")]
    Mixed(String),
    #[error("{0}: no references")]
    NoReferences(String),
    #[error("{source_id}: {source}")]
    Semantic {
        source_id: String,
        source: semantic::SemanticError,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub source_id: String,
    pub bleu_stats: BleuStats,
    pub rouge: RougeScores<f64>,
    pub bertscore_f1: f64,
    pub sbert_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub task: Task,
    pub mode: Mode,
    pub template: String,
    pub n_records: usize,
    pub n_empty: usize,
    pub bleu: f64,
    pub rouge: RougeScores<f64>,
    pub bertscore_f1: f64,
    pub sbert_cosine: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_record: Option<Vec<RecordScores>>,
}

fn score_record(r: &ExplanationRecord, gateway: &Gateway) -> Result<RecordScores, MetricsError> {
    if r.references.is_empty() {
        return Err(MetricsError::NoReferences(r.source_id.clone()));
    }
    let sem = |source| MetricsError::Semantic {
        source_id: r.source_id.clone(),
        source,
    };
    Ok(RecordScores {
        source_id: r.source_id.clone(),
        bleu_stats: BleuStats::compute(&r.explanation, &r.references, BLEU_MAX_N),
        rouge: rouge(&r.explanation, &r.references),
        bertscore_f1: bertscore_f1(&r.explanation, &r.references, gateway).map_err(sem)?,
        sbert_cosine: sbert_cosine(&r.explanation, &r.references, gateway).map_err(sem)?,
    })
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Aggregates per-record rows: corpus BLEU from the summed statistics, the
/// other metrics as plain means.
pub fn aggregate(rows: &[RecordScores]) -> (f64, RougeScores<f64>, f64, f64) {
    let n = rows.len();
    let stats: Vec<BleuStats> = rows.iter().map(|r| r.bleu_stats.clone()).collect();
    (
        bleu_from_stats(&stats),
        RougeScores {
            rouge1: mean(rows.iter().map(|r| r.rouge.rouge1), n),
            rouge2: mean(rows.iter().map(|r| r.rouge.rouge2), n),
            rouge_l: mean(rows.iter().map(|r| r.rouge.rouge_l), n),
        },
        mean(rows.iter().map(|r| r.bertscore_f1), n),
        mean(rows.iter().map(|r| r.sbert_cosine), n),
    )
}

pub fn evaluate_run(
    records: &[ExplanationRecord],
    gateway: &Gateway,
    keep_rows: bool,
) -> Result<MetricReport, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    if let Some(r) = records.iter().find(|r| r.method != first.method) {
        return Err(MetricsError::Mixed(format!(
            "methods {} and {}",
            first.method, r.method
        )));
    }
    if let Some(r) = records.iter().find(|r| r.template != first.template) {
        return Err(MetricsError::Mixed(format!(
            "templates {} and {}",
            first.template, r.template
        )));
    }
    let rows = records
        .par_iter()
        .map(|r| score_record(r, gateway))
        .collect::<Result<Vec<_>, _>>()?;
    let (bleu, rouge, bertscore_f1, sbert_cosine) = aggregate(&rows);
    Ok(MetricReport {
        method: first.method,
        task: first.template.task,
        mode: first.template.mode,
        template: first.template.to_string(),
        n_records: records.len(),
        n_empty: records.iter().filter(|r| r.explanation.is_empty()).count(),
        bleu,
        rouge,
        bertscore_f1,
        sbert_cosine,
        per_record: keep_rows.then_some(rows),
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    source_id: &'a str,
    bleu: f64,
    rouge1: f64,
    rouge2: f64,
    #[serde(rename = "rougeL")]
    rouge_l: f64,
    bertscore_f1: f64,
    sbert_cosine: f64,
}

/// Per-record rows as CSV; the `bleu` column is sentence-level BLEU.
pub fn write_rows_csv(path: &Path, rows: &[RecordScores]) -> Result<(), MetricsError> {
    let err = |e: &dyn std::fmt::Display| MetricsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    for r in rows {
        w.serialize(CsvRow {
            source_id: &r.source_id,
            bleu: bleu_from_stats(std::slice::from_ref(&r.bleu_stats)),
            rouge1: r.rouge.rouge1,
            rouge2: r.rouge.rouge2,
            rouge_l: r.rouge.rouge_l,
            bertscore_f1: r.bertscore_f1,
            sbert_cosine: r.sbert_cosine,
        })
        .map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}
