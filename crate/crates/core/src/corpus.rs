//! Dataset ingestion: ComVE and e-SNLI statement pairs, the OMCS knowledge
//! corpus, and the seeded exemplar pool used for few-shot prompts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text;

/// Exemplar pool size drawn from the training split.
pub const POOL_SIZE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Comve,
    Esnli,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Comve => "comve",
            Task::Esnli => "esnli",
        }
    }

    /// Generation budget for phase-I instantiations.
    pub fn instantiation_max_tokens(self) -> usize {
        match self {
            Task::Comve => 25,
            Task::Esnli => 40,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "comve" => Ok(Task::Comve),
            "esnli" | "e-snli" => Ok(Task::Esnli),
            other => Err(format!("unknown task `{other}` (expected comve or esnli)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One dataset instance: a correct (entailment) and an incorrect
/// (contradiction) statement with reference explanations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementPair {
    pub id: String,
    pub task: Task,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    pub correct: String,
    pub incorrect: String,
    pub refs_incorrect: Vec<String>,
    #[serde(default)]
    pub refs_correct: Vec<String>,
}

impl StatementPair {
    pub fn validate(&self) -> Result<(), String> {
        if self.correct.trim().is_empty() || self.incorrect.trim().is_empty() {
            return Err("empty statement".into());
        }
        if self.correct == self.incorrect {
            return Err("correct and incorrect statements are identical".into());
        }
        match self.task {
            Task::Comve => {
                if self.premise.is_some() {
                    return Err("comve pairs carry no premise".into());
                }
                if self.refs_incorrect.len() != 3 {
                    return Err(format!(
                        "comve pairs need 3 references, found {}",
                        self.refs_incorrect.len()
                    ));
                }
            }
            Task::Esnli => {
                if self.premise.as_deref().is_none_or(|p| p.trim().is_empty()) {
                    return Err("e-SNLI pairs need a premise".into());
                }
                if self.refs_incorrect.is_empty() || self.refs_incorrect.len() > 3 {
                    return Err(format!(
                        "e-SNLI pairs need 1-3 references, found {}",
                        self.refs_incorrect.len()
                    ));
                }
            }
        }
        if self.refs_correct.len() > 3 {
            return Err("more than 3 correct-statement references".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: row {row}: {message}")]
    BadRow {
        path: String,
        row: usize,
        message: String,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("cannot sample from an empty pair list")]
    EmptyInput,
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file))
}

const COMVE_COLUMNS: [&str; 6] = ["id", "correct", "incorrect", "ref1", "ref2", "ref3"];

/// Loads one ComVE split from the canonical six-column CSV
/// (`id, correct, incorrect, ref1, ref2, ref3`). A header row is optional.
pub fn load_comve(path: &Path, split: Split) -> Result<Vec<StatementPair>, CorpusError> {
    let p = path.display().to_string();
    let mut reader = open_csv(path)?;
    let mut pairs = Vec::new();
    let mut row = 0usize;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|source| CorpusError::Csv {
            path: p.clone(),
            source,
        })?;
        if i == 0
            && rec
                .get(0)
                .is_some_and(|f| f.trim().eq_ignore_ascii_case("id"))
        {
            continue;
        }
        row += 1;
        let bad = |message: String| CorpusError::BadRow {
            path: p.clone(),
            row,
            message,
        };
        if rec.len() != COMVE_COLUMNS.len() {
            return Err(bad(format!(
                "expected {} columns, found {}",
                COMVE_COLUMNS.len(),
                rec.len()
            )));
        }
        let field = |j: usize| rec.get(j).unwrap_or("").trim().to_string();
        for (j, name) in COMVE_COLUMNS.iter().enumerate() {
            if field(j).is_empty() {
                return Err(bad(format!("empty `{name}` field")));
            }
        }
        let pair = StatementPair {
            id: field(0),
            task: Task::Comve,
            split,
            premise: None,
            correct: field(1),
            incorrect: field(2),
            refs_incorrect: vec![field(3), field(4), field(5)],
            refs_correct: Vec::new(),
        };
        pair.validate().map_err(bad)?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

/// Result of e-SNLI ingestion.
#[derive(Debug, Clone)]
pub struct EsnliLoad {
    pub pairs: Vec<StatementPair>,
    /// Premises lacking an entailment or a contradiction hypothesis.
    pub dropped_premises: usize,
    /// Explanation columns found in the file, in column order. Every
    /// non-empty one is exposed as a reference.
    pub explanation_columns: Vec<String>,
}

struct PremiseGroup {
    premise: String,
    entailment: Option<(String, Vec<String>)>,
    contradiction: Option<(String, Vec<String>, Option<String>)>,
}

/// Loads e-SNLI from CSV with a header row. Recognized columns
/// (case-insensitive): `premise`/`sentence1`, `hypothesis`/`sentence2`,
/// `label`/`gold_label`, optional `pairid`, and every `explanation`,
/// `explanations` or `explanation_<n>` column.
///
/// Rows are grouped by exact premise text; a premise yields a pair from its
/// first entailment and first contradiction hypothesis in file order.
pub fn load_esnli(path: &Path, split: Split) -> Result<EsnliLoad, CorpusError> {
    let p = path.display().to_string();
    let mut reader = open_csv(path)?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h.map_err(|source| CorpusError::Csv {
            path: p.clone(),
            source,
        })?,
        None => {
            return Ok(EsnliLoad {
                pairs: Vec::new(),
                dropped_premises: 0,
                explanation_columns: Vec::new(),
            })
        }
    };
    let names: Vec<String> = header
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let find = |candidates: &[&str]| names.iter().position(|n| candidates.contains(&n.as_str()));
    let missing = |column: &str| CorpusError::MissingColumn {
        path: p.clone(),
        column: column.to_string(),
    };
    let premise_col = find(&["premise", "sentence1"]).ok_or_else(|| missing("premise"))?;
    let hyp_col = find(&["hypothesis", "sentence2"]).ok_or_else(|| missing("hypothesis"))?;
    let label_col = find(&["label", "gold_label"]).ok_or_else(|| missing("label"))?;
    let id_col = find(&["pairid", "pair_id", "id"]);
    let expl_cols: Vec<usize> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| {
            *n == "explanation"
                || *n == "explanations"
                || n.strip_prefix("explanation_").is_some_and(|rest| {
                    !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit())
                })
        })
        .map(|(i, _)| i)
        .collect();

    let mut groups: Vec<PremiseGroup> = Vec::new();
    let mut by_premise: HashMap<String, usize> = HashMap::new();
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|source| CorpusError::Csv {
            path: p.clone(),
            source,
        })?;
        let field = |j: usize| rec.get(j).unwrap_or("").trim().to_string();
        let label = match field(label_col).to_ascii_lowercase().as_str() {
            "entailment" => NliLabel::Entailment,
            "neutral" => NliLabel::Neutral,
            "contradiction" => NliLabel::Contradiction,
            other => {
                return Err(CorpusError::BadRow {
                    path: p.clone(),
                    row,
                    message: format!("unparseable label `{other}`"),
                })
            }
        };
        if label == NliLabel::Neutral {
            continue;
        }
        let premise = field(premise_col);
        let hypothesis = field(hyp_col);
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(CorpusError::BadRow {
                path: p.clone(),
                row,
                message: "empty premise or hypothesis".into(),
            });
        }
        let explanations: Vec<String> = expl_cols
            .iter()
            .map(|&j| field(j))
            .filter(|e| !e.is_empty())
            .take(3)
            .collect();
        let gi = *by_premise.entry(premise.clone()).or_insert_with(|| {
            groups.push(PremiseGroup {
                premise: premise.clone(),
                entailment: None,
                contradiction: None,
            });
            groups.len() - 1
        });
        let group = &mut groups[gi];
        match label {
            NliLabel::Entailment if group.entailment.is_none() => {
                group.entailment = Some((hypothesis, explanations));
            }
            NliLabel::Contradiction if group.contradiction.is_none() => {
                let id = id_col.map(field).filter(|s| !s.is_empty());
                group.contradiction = Some((hypothesis, explanations, id));
            }
            _ => {}
        }
    }

    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (gi, g) in groups.into_iter().enumerate() {
        match (g.entailment, g.contradiction) {
            (Some((correct, refs_correct)), Some((incorrect, refs_incorrect, id)))
                if !refs_incorrect.is_empty() && correct != incorrect =>
            {
                pairs.push(StatementPair {
                    id: id.unwrap_or_else(|| format!("esnli-{}-{gi}", split.as_str())),
                    task: Task::Esnli,
                    split,
                    premise: Some(g.premise),
                    correct,
                    incorrect,
                    refs_incorrect,
                    refs_correct,
                });
            }
            _ => dropped += 1,
        }
    }
    Ok(EsnliLoad {
        pairs,
        dropped_premises: dropped,
        explanation_columns: expl_cols.iter().map(|&i| names[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Doc {
    pub id: usize,
    pub text: String,
}

/// Term statistics over the [`text::terms`] tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_freq: BTreeMap<String, usize>,
    pub doc_len: Vec<usize>,
    pub avg_len: f64,
}

impl CorpusStats {
    pub fn compute(docs: &[Doc]) -> Self {
        let mut doc_freq = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for doc in docs {
            let terms = text::terms(&doc.text);
            doc_len.push(terms.len());
            let mut seen: Vec<&String> = terms.iter().collect();
            seen.sort();
            seen.dedup();
            for t in seen {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        CorpusStats {
            doc_freq,
            doc_len,
            avg_len,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn df(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }
}

/// The retrieval corpus. Duplicate statements are kept as distinct docs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeCorpus {
    pub docs: Vec<Doc>,
    pub stats: CorpusStats,
}

impl KnowledgeCorpus {
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let docs: Vec<Doc> = texts
            .into_iter()
            .map(Into::into)
            .filter(|t: &String| !t.trim().is_empty())
            .enumerate()
            .map(|(id, text)| Doc {
                id,
                text: text.trim().to_string(),
            })
            .collect();
        let stats = CorpusStats::compute(&docs);
        KnowledgeCorpus { docs, stats }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Content hash over the ordered documents.
    pub fn content_hash(&self) -> String {
        let mut buf = String::new();
        for d in &self.docs {
            buf.push_str(&d.id.to_string());
            buf.push('\t');
            buf.push_str(&d.text);
            buf.push('\n');
        }
        text::sha256_hex(buf)
    }
}

/// Loads OMCS-style plain text: one statement per line, blank lines skipped.
pub fn load_omcs(path: &Path) -> Result<KnowledgeCorpus, CorpusError> {
    let content = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(KnowledgeCorpus::from_texts(content.lines()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarPool {
    pub items: Vec<StatementPair>,
    pub seed: u64,
}

/// Samples up to [`POOL_SIZE`] pairs without replacement; the sampled order
/// is kept.
pub fn sample_exemplar_pool(
    pairs: &[StatementPair],
    seed: u64,
) -> Result<ExemplarPool, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = POOL_SIZE.min(pairs.len());
    let items = index::sample(&mut rng, pairs.len(), amount)
        .into_iter()
        .map(|i| pairs[i].clone())
        .collect();
    Ok(ExemplarPool { items, seed })
}
