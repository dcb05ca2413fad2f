//! Drops instantiations a correctness classifier does not believe in.

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::gateway::{Gateway, GatewayError};
use crate::instantiation::Instantiation;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_KEPT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub threshold: f64,
    /// Kept instantiations a source needs to stay usable as an ensemble.
    pub min_kept: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            threshold: DEFAULT_THRESHOLD,
            min_kept: DEFAULT_MIN_KEPT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub sources: usize,
    pub inputs: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Sources with at least one kept instantiation.
    pub top1_survivors: usize,
    /// Sources with at least `min_kept` kept instantiations.
    pub ensemble_survivors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FilterOutcome {
    /// The backend has no classifier; nothing was filtered.
    Skipped { reason: String },
    Filtered {
        sets: Vec<Vec<Instantiation>>,
        summary: FilterSummary,
    },
}

/// Scores every instantiation and keeps those with probability at least
/// `config.threshold`, recording the probability on each kept item.
pub fn filter_by_classifier(
    sets: &[Vec<Instantiation>],
    task: Task,
    gateway: &Gateway,
    config: FilterConfig,
) -> Result<FilterOutcome, GatewayError> {
    let mut out = Vec::with_capacity(sets.len());
    let mut summary = FilterSummary {
        sources: sets.len(),
        inputs: 0,
        kept: 0,
        dropped: 0,
        top1_survivors: 0,
        ensemble_survivors: 0,
    };
    for set in sets {
        let mut kept = Vec::new();
        for inst in set {
            let prob = match gateway.classify(&inst.text, task) {
                Ok(p) => p,
                Err(GatewayError::CapabilityNotConfigured(c)) => {
                    return Ok(FilterOutcome::Skipped {
                        reason: format!("capability `{c}` is not configured"),
                    })
                }
                Err(e) => return Err(e),
            };
            summary.inputs += 1;
            if prob >= config.threshold {
                let mut inst = inst.clone();
                inst.classifier_prob = Some(prob);
                kept.push(inst);
            }
        }
        summary.kept += kept.len();
        summary.top1_survivors += usize::from(!kept.is_empty());
        summary.ensemble_survivors += usize::from(kept.len() >= config.min_kept);
        out.push(kept);
    }
    summary.dropped = summary.inputs - summary.kept;
    Ok(FilterOutcome::Filtered { sets: out, summary })
}
