//! Aggregation of stored submissions. Every (item, annotator) vote counts
//! once; agreement is computed over items rated by all annotators.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kappa::{fleiss_kappa, RatingMatrix};
use super::store::SubmissionEvent;
use super::{
    Answer, EvalError, EvalSession, Payload, Protocol, ACCEPTABILITY, ASPECTS, CRITERIA, LIKERT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteShare {
    pub label: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectReport {
    pub aspect: String,
    pub n_votes: usize,
    pub votes: Vec<VoteShare>,
    /// Mean score, for Likert criteria.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    pub kappa: Option<f64>,
    /// Items that entered the kappa computation.
    pub kappa_items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub session_id: String,
    pub protocol: Protocol,
    pub systems: Vec<String>,
    pub partial: bool,
    pub completed: usize,
    pub total: usize,
    pub aspects: Vec<AspectReport>,
}

/// Category index of one vote on `aspect`.
fn category(session: &EvalSession, item: usize, aspect: &str, answer: &Answer) -> Option<usize> {
    match (&session.items[item].payload, answer) {
        (
            Payload::HeadToHead {
                hidden_assignment, ..
            },
            Answer::Label(side),
        ) => {
            let system = match side.as_str() {
                "left" => &hidden_assignment.left,
                "right" => &hidden_assignment.right,
                "tie" => return Some(1),
                _ => return None,
            };
            match session.systems.iter().position(|s| s == system)? {
                0 => Some(0),
                _ => Some(2),
            }
        }
        (Payload::InstantiationQuality { .. }, Answer::Label(l)) if aspect == "acceptability" => {
            ACCEPTABILITY.iter().position(|a| a == l)
        }
        (Payload::InstantiationQuality { .. }, Answer::Score(s)) => {
            LIKERT.iter().position(|x| x == s)
        }
        _ => None,
    }
}

fn labels(session: &EvalSession, aspect: &str) -> Vec<String> {
    match session.protocol {
        Protocol::HeadToHead => vec![
            session.systems[0].clone(),
            "tie".to_string(),
            session.systems[1].clone(),
        ],
        Protocol::InstantiationQuality if aspect == "acceptability" => {
            ACCEPTABILITY.iter().map(|s| s.to_string()).collect()
        }
        Protocol::InstantiationQuality => LIKERT.iter().map(|s| s.to_string()).collect(),
    }
}

fn aspect_report(
    session: &EvalSession,
    events: &[&SubmissionEvent],
    aspect: &str,
) -> Result<AspectReport, EvalError> {
    let names = labels(session, aspect);
    let mut counts = vec![0usize; names.len()];
    let mut per_item: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for ev in events {
        let item = session
            .item_index(&ev.item)
            .ok_or_else(|| EvalError::UnknownItem {
                session: session.session_id.clone(),
                item: ev.item.clone(),
            })?;
        let answer = ev
            .responses
            .get(aspect)
            .ok_or_else(|| EvalError::InvalidResponse(format!("{} lacks {aspect}", ev.item)))?;
        let c = category(session, item, aspect, answer)
            .ok_or_else(|| EvalError::InvalidResponse(format!("{}: {aspect}={answer}", ev.item)))?;
        counts[c] += 1;
        per_item.entry(item).or_default().push(c);
    }
    let n_votes: usize = counts.iter().sum();
    let votes = names
        .iter()
        .zip(&counts)
        .map(|(label, &count)| VoteShare {
            label: label.clone(),
            count,
            percent: 100.0 * count as f64 / n_votes as f64,
        })
        .collect();
    let mean = (session.protocol == Protocol::InstantiationQuality && aspect != "acceptability")
        .then(|| {
            let total: usize = counts
                .iter()
                .enumerate()
                .map(|(i, c)| LIKERT[i] as usize * c)
                .sum();
            total as f64 / n_votes as f64
        });
    let full: Vec<Vec<usize>> = per_item
        .into_values()
        .filter(|v| v.len() == session.annotators.len())
        .collect();
    let (kappa, kappa_note) = if full.is_empty() {
        (None, Some("no item rated by every annotator".to_string()))
    } else {
        match RatingMatrix::from_labels(&full, names.len()).and_then(|m| fleiss_kappa::<f64>(&m)) {
            Ok(k) => (Some(k), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Ok(AspectReport {
        aspect: aspect.to_string(),
        n_votes,
        votes,
        mean,
        kappa,
        kappa_items: full.len(),
        kappa_note,
    })
}

pub fn build_report(
    session: &EvalSession,
    events: &[&SubmissionEvent],
    partial: bool,
) -> Result<Report, EvalError> {
    if events.is_empty() {
        return Err(EvalError::EmptySession(session.session_id.clone()));
    }
    let total = session.total_assignments();
    if events.len() < total && !partial {
        return Err(EvalError::Incomplete {
            session: session.session_id.clone(),
            completed: events.len(),
            total,
        });
    }
    let aspects: &[&str] = match session.protocol {
        Protocol::HeadToHead => &ASPECTS,
        Protocol::InstantiationQuality => &CRITERIA,
    };
    Ok(Report {
        session_id: session.session_id.clone(),
        protocol: session.protocol,
        systems: session.systems.clone(),
        partial: events.len() < total,
        completed: events.len(),
        total,
        aspects: aspects
            .iter()
            .map(|a| aspect_report(session, events, a))
            .collect::<Result<_, _>>()?,
    })
}

impl Report {
    /// Plain-text rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "session {} ({:?}){}: {}/{} votes\n",
            self.session_id,
            self.protocol,
            if self.partial { " PARTIAL" } else { "" },
            self.completed,
            self.total
        );
        for a in &self.aspects {
            let shares: Vec<String> = a
                .votes
                .iter()
                .map(|v| format!("{} {:.2}%", v.label, v.percent))
                .collect();
            out.push_str(&format!("  {:<15} {}", a.aspect, shares.join(" / ")));
            if let Some(m) = a.mean {
                out.push_str(&format!("  mean {m:.2}"));
            }
            match (a.kappa, &a.kappa_note) {
                (Some(k), _) => out.push_str(&format!("  kappa {k:.3}\n")),
                (None, Some(n)) => out.push_str(&format!("  kappa n/a ({n})\n")),
                (None, None) => out.push('\n'),
            }
        }
        out
    }
}
