//! Human evaluation: blind head-to-head comparison of explanations and
//! 5-criteria rating of instantiation sets.
//!
//! A session fixes its items, per-annotator order and left/right sides at
//! creation. The server keeps the side assignment to itself; annotators
//! only ever see [`ServedItem`]s.

pub mod filter;
pub mod http;
pub mod kappa;
pub mod report;
pub mod store;

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::explain::ExplanationRecord;
use crate::text;

pub use filter::{filter_by_classifier, FilterConfig, FilterOutcome, FilterSummary};
pub use kappa::{fleiss_kappa, KappaError, RatingMatrix};
pub use report::{build_report, AspectReport, Report, VoteShare};
pub use store::{EvalStore, NextResponse, SubmissionEvent, SubmitAck};

pub const DEFAULT_ITEMS: usize = 100;
pub const DEFAULT_ANNOTATORS: usize = 3;
pub const ASPECTS: [&str; 2] = ["preferred", "conflict_point"];
pub const SIDES: [&str; 3] = ["left", "tie", "right"];
pub const CRITERIA: [&str; 5] = [
    "acceptability",
    "grammaticality",
    "factuality",
    "diversity",
    "commonality",
];
pub const ACCEPTABILITY: [&str; 2] = ["accept", "reject"];
pub const LIKERT: [u8; 3] = [1, 2, 3];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("annotator {annotator} is not registered in session {session}")]
    UnknownAnnotator { session: String, annotator: String },
    #[error("session {session} has no item {item}")]
    UnknownItem { session: String, item: String },
    #[error("{annotator} already submitted {item}")]
    Duplicate { annotator: String, item: String },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("record sets are misaligned: {0}")]
    Misaligned(String),
    #[error("asked for {requested} items but only {available} are available")]
    NotEnoughItems { requested: usize, available: usize },
    #[error("invalid session: {0}")]
    InvalidSession(String),
    #[error("session {session} is incomplete ({completed}/{total}); pass the partial flag")]
    Incomplete {
        session: String,
        completed: usize,
        total: usize,
    },
    #[error("session {0} has no submissions")]
    EmptySession(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::UnknownSession(_) => "unknown_session",
            EvalError::UnknownAnnotator { .. } => "unknown_annotator",
            EvalError::UnknownItem { .. } => "unknown_item",
            EvalError::Duplicate { .. } => "duplicate_submission",
            EvalError::InvalidResponse(_) => "invalid_category",
            EvalError::Misaligned(_) => "misaligned_records",
            EvalError::NotEnoughItems { .. } => "not_enough_items",
            EvalError::InvalidSession(_) => "invalid_session",
            EvalError::Incomplete { .. } => "incomplete_session",
            EvalError::EmptySession(_) => "empty_session",
            EvalError::Io { .. } => "io_error",
            EvalError::Corrupt { .. } => "corrupt_log",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    HeadToHead,
    InstantiationQuality,
}

/// Which system's explanation is shown on each side. Server-side only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenAssignment {
    pub left: String,
    pub right: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    HeadToHead {
        explanation_left: String,
        explanation_right: String,
        hidden_assignment: HiddenAssignment,
    },
    InstantiationQuality {
        instantiations: Vec<String>,
        hidden_system: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub item_id: String,
    pub source_id: String,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    pub payload: Payload,
}

/// One instantiation set to be rated as a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantiationSet {
    pub source_id: String,
    pub statement: String,
    #[serde(default)]
    pub premise: Option<String>,
    /// System label, hidden from annotators.
    pub system: String,
    pub instantiations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum SessionInput {
    HeadToHead {
        records_a: Vec<ExplanationRecord>,
        records_b: Vec<ExplanationRecord>,
    },
    InstantiationQuality {
        sets: Vec<InstantiationSet>,
    },
}

fn default_items() -> usize {
    DEFAULT_ITEMS
}

pub fn default_annotators() -> Vec<String> {
    (1..=DEFAULT_ANNOTATORS)
        .map(|i| format!("annotator_{i}"))
        .collect()
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(flatten)]
    pub input: SessionInput,
    #[serde(default = "default_items")]
    pub n_items: usize,
    #[serde(default = "default_annotators")]
    pub annotators: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSession {
    pub session_id: String,
    pub protocol: Protocol,
    pub seed: u64,
    /// For head-to-head: `[A, B]`; for quality rating: the distinct set labels.
    pub systems: Vec<String>,
    pub annotators: Vec<String>,
    pub items: Vec<AnnotationTask>,
    /// Item indices in serving order, per annotator.
    pub orders: BTreeMap<String, Vec<usize>>,
}

impl EvalSession {
    pub fn total_assignments(&self) -> usize {
        self.items.len() * self.annotators.len()
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.items.iter().position(|t| t.item_id == item_id)
    }

    pub fn questions(&self) -> Vec<Question> {
        questions(self.protocol)
    }
}

/// An answer value: a category label or a Likert score.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Score(u8),
    Label(String),
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Answer::Score(s) => write!(f, "{s}"),
            Answer::Label(l) => f.write_str(l),
        }
    }
}

pub type Responses = BTreeMap<String, Answer>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub name: String,
    pub options: Vec<Answer>,
}

pub fn questions(protocol: Protocol) -> Vec<Question> {
    let labels = |xs: &[&str]| xs.iter().map(|s| Answer::Label(s.to_string())).collect();
    match protocol {
        Protocol::HeadToHead => ASPECTS
            .iter()
            .map(|a| Question {
                name: a.to_string(),
                options: labels(&SIDES),
            })
            .collect(),
        Protocol::InstantiationQuality => CRITERIA
            .iter()
            .map(|c| Question {
                name: c.to_string(),
                options: if *c == "acceptability" {
                    labels(&ACCEPTABILITY)
                } else {
                    LIKERT.iter().map(|&s| Answer::Score(s)).collect()
                },
            })
            .collect(),
    }
}

/// Checks that `raw` answers exactly the protocol's questions with allowed
/// values.
pub fn validate_responses(protocol: Protocol, raw: &Value) -> Result<Responses, EvalError> {
    let obj = raw
        .as_object()
        .ok_or_else(|| EvalError::InvalidResponse("responses must be an object".into()))?;
    let qs = questions(protocol);
    if let Some(k) = obj.keys().find(|k| !qs.iter().any(|q| &q.name == *k)) {
        return Err(EvalError::InvalidResponse(format!("unexpected field {k}")));
    }
    let mut out = Responses::new();
    for q in qs {
        let v = obj
            .get(&q.name)
            .ok_or_else(|| EvalError::InvalidResponse(format!("missing {}", q.name)))?;
        let answer: Answer = serde_json::from_value(v.clone())
            .map_err(|_| EvalError::InvalidResponse(format!("{}: {v}", q.name)))?;
        if !q.options.contains(&answer) {
            return Err(EvalError::InvalidResponse(format!(
                "{} does not accept {v}",
                q.name
            )));
        }
        out.insert(q.name, answer);
    }
    Ok(out)
}

/// What an annotator is shown. Built field by field from the task so that
/// nothing identifying a system can leak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedItem {
    pub session_id: String,
    pub item_id: String,
    pub protocol: Protocol,
    /// 1-based position in this annotator's queue.
    pub position: usize,
    pub total: usize,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation_left: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation_right: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instantiations: Option<Vec<String>>,
    pub questions: Vec<Question>,
}

impl ServedItem {
    pub fn new(session: &EvalSession, index: usize, position: usize) -> Self {
        let task = &session.items[index];
        let (left, right, insts) = match &task.payload {
            Payload::HeadToHead {
                explanation_left,
                explanation_right,
                ..
            } => (
                Some(explanation_left.clone()),
                Some(explanation_right.clone()),
                None,
            ),
            Payload::InstantiationQuality { instantiations, .. } => {
                (None, None, Some(instantiations.clone()))
            }
        };
        ServedItem {
            session_id: session.session_id.clone(),
            item_id: task.item_id.clone(),
            protocol: session.protocol,
            position,
            total: session.items.len(),
            statement: task.statement.clone(),
            premise: task.premise.clone(),
            explanation_left: left,
            explanation_right: right,
            instantiations: insts,
            questions: session.questions(),
        }
    }
}

fn system_label(records: &[ExplanationRecord], side: &str) -> Result<String, EvalError> {
    let first = records
        .first()
        .ok_or_else(|| EvalError::Misaligned(format!("records_{side} is empty")))?;
    if records
        .iter()
        .any(|r| r.method != first.method || r.template != first.template)
    {
        return Err(EvalError::Misaligned(format!(
            "records_{side} mixes methods or templates"
        )));
    }
    Ok(first.method.to_string())
}

struct Candidate {
    source_id: String,
    statement: String,
    premise: Option<String>,
    content: CandidateContent,
}

enum CandidateContent {
    Pair(String, String),
    Set(String, Vec<String>),
}

fn head_to_head_candidates(
    a: &[ExplanationRecord],
    b: &[ExplanationRecord],
) -> Result<(Vec<String>, Vec<Candidate>), EvalError> {
    let mut la = system_label(a, "a")?;
    let mut lb = system_label(b, "b")?;
    if la == lb {
        la = format!("{la}@{}", a[0].template);
        lb = format!("{lb}@{}", b[0].template);
        if la == lb {
            return Err(EvalError::Misaligned(
                "both sides are the same system".into(),
            ));
        }
    }
    let mut by_id: HashMap<&str, &ExplanationRecord> = HashMap::new();
    for r in b {
        if by_id.insert(&r.source_id, r).is_some() {
            return Err(EvalError::Misaligned(format!(
                "duplicate source {} in records_b",
                r.source_id
            )));
        }
    }
    if a.len() != b.len() {
        return Err(EvalError::Misaligned(format!(
            "{} vs {} records",
            a.len(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(a.len());
    for r in a {
        let other = by_id.remove(r.source_id.as_str()).ok_or_else(|| {
            EvalError::Misaligned(format!("{} missing from records_b", r.source_id))
        })?;
        out.push(Candidate {
            source_id: r.source_id.clone(),
            statement: r.statement.clone(),
            premise: None,
            content: CandidateContent::Pair(r.explanation.clone(), other.explanation.clone()),
        });
    }
    Ok((vec![la, lb], out))
}

fn quality_candidates(
    sets: &[InstantiationSet],
) -> Result<(Vec<String>, Vec<Candidate>), EvalError> {
    let mut systems: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(sets.len());
    for s in sets {
        if s.instantiations.is_empty() {
            return Err(EvalError::InvalidSession(format!(
                "{}: empty instantiation set",
                s.source_id
            )));
        }
        if !systems.contains(&s.system) {
            systems.push(s.system.clone());
        }
        out.push(Candidate {
            source_id: s.source_id.clone(),
            statement: s.statement.clone(),
            premise: s.premise.clone(),
            content: CandidateContent::Set(s.system.clone(), s.instantiations.clone()),
        });
    }
    Ok((systems, out))
}

/// Samples items, sides and per-annotator orders from `req.seed`.
pub fn create_session(req: &CreateSession) -> Result<EvalSession, EvalError> {
    let (protocol, (systems, candidates)) = match &req.input {
        SessionInput::HeadToHead {
            records_a,
            records_b,
        } => (
            Protocol::HeadToHead,
            head_to_head_candidates(records_a, records_b)?,
        ),
        SessionInput::InstantiationQuality { sets } => {
            (Protocol::InstantiationQuality, quality_candidates(sets)?)
        }
    };
    if req.n_items == 0 {
        return Err(EvalError::InvalidSession("n_items must be positive".into()));
    }
    if req.n_items > candidates.len() {
        return Err(EvalError::NotEnoughItems {
            requested: req.n_items,
            available: candidates.len(),
        });
    }
    if req.annotators.is_empty() {
        return Err(EvalError::InvalidSession("no annotators".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(a) = req
        .annotators
        .iter()
        .find(|a| a.is_empty() || !seen.insert(a.as_str()))
    {
        return Err(EvalError::InvalidSession(format!(
            "bad or repeated annotator id {a:?}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(text::derive_seed(req.seed, "evalsvc/items"));
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), req.n_items).into_vec();
    let mut sides = ChaCha8Rng::seed_from_u64(text::derive_seed(req.seed, "evalsvc/sides"));
    let mut candidates: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    let items: Vec<AnnotationTask> = picked
        .iter()
        .enumerate()
        .map(|(n, &i)| {
            let c = candidates[i].take().expect("sampled without replacement");
            let payload = match c.content {
                CandidateContent::Pair(ea, eb) => {
                    let a_left = sides.gen_bool(0.5);
                    let (l, r) = if a_left { (0, 1) } else { (1, 0) };
                    let texts = [ea, eb];
                    Payload::HeadToHead {
                        explanation_left: texts[l].clone(),
                        explanation_right: texts[r].clone(),
                        hidden_assignment: HiddenAssignment {
                            left: systems[l].clone(),
                            right: systems[r].clone(),
                        },
                    }
                }
                CandidateContent::Set(system, instantiations) => Payload::InstantiationQuality {
                    instantiations,
                    hidden_system: system,
                },
            };
            AnnotationTask {
                item_id: format!("item-{:03}", n + 1),
                source_id: c.source_id,
                statement: c.statement,
                premise: c.premise,
                payload,
            }
        })
        .collect();
    let orders = req
        .annotators
        .iter()
        .map(|a| {
            let mut order: Vec<usize> = (0..items.len()).collect();
            let mut r = ChaCha8Rng::seed_from_u64(text::derive_seed(
                req.seed,
                &format!("evalsvc/order/{a}"),
            ));
            order.shuffle(&mut r);
            (a.clone(), order)
        })
        .collect();
    let mut session = EvalSession {
        session_id: String::new(),
        protocol,
        seed: req.seed,
        systems,
        annotators: req.annotators.clone(),
        items,
        orders,
    };
    let digest = serde_json::to_vec(&session).expect("session serializes");
    session.session_id = format!("s{}", &text::sha256_hex(digest)[..12]);
    Ok(session)
}
