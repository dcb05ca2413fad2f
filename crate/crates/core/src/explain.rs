//! Phase II: zero-shot explanation prompts for every method and the
//! collection of the resulting explanations.
//!
//! Template text lives in `templates/{task}/{mode}/{name}.txt` and is
//! compiled in. Placeholders: `{statement}`, `{hints}`, `{premise}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{StatementPair, Task};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::text;

pub const EXPLANATION_MAX_TOKENS: usize = 30;
pub const DEFAULT_ENSEMBLE: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("no hints given")]
    EmptyHints,
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template {template} {problem}")]
    TemplateMismatch { template: String, problem: String },
    #[error("{0}: premise required")]
    MissingPremise(String),
    #[error("unknown placeholder `{{{0}}}` in template")]
    UnknownPlaceholder(String),
    #[error("{source_id}: method {method} {problem}")]
    Invariant {
        source_id: String,
        method: String,
        problem: String,
    },
    #[error("{source_id} (prompt {prompt_hash}): {source}")]
    Gateway {
        source_id: String,
        prompt_hash: String,
        source: GatewayError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateName {
    /// The hint-free form used by the Original baseline.
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "default_A")]
    DefaultA,
    #[serde(rename = "annotator_B")]
    AnnotatorB,
    #[serde(rename = "annotator_C")]
    AnnotatorC,
    #[serde(rename = "instruction")]
    Instruction,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::Original,
        TemplateName::DefaultA,
        TemplateName::AnnotatorB,
        TemplateName::AnnotatorC,
        TemplateName::Instruction,
    ];

    /// The four hint-bearing variants swept in the robustness study.
    pub const WITH_HINTS: [TemplateName; 4] = [
        TemplateName::DefaultA,
        TemplateName::AnnotatorB,
        TemplateName::AnnotatorC,
        TemplateName::Instruction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Original => "original",
            TemplateName::DefaultA => "default_A",
            TemplateName::AnnotatorB => "annotator_B",
            TemplateName::AnnotatorC => "annotator_C",
            TemplateName::Instruction => "instruction",
        }
    }

    pub fn uses_hints(self) -> bool {
        self != TemplateName::Original
    }
}

impl FromStr for TemplateName {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self, ExplainError> {
        TemplateName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ExplainError::UnknownTemplate(s.to_string()))
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ExplainFalse,
    ExplainCorrect,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ExplainFalse => "explain_false",
            Mode::ExplainCorrect => "explain_correct",
        }
    }
}

impl FromStr for Mode {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self, ExplainError> {
        match s {
            "explain_false" => Ok(Mode::ExplainFalse),
            "explain_correct" => Ok(Mode::ExplainCorrect),
            _ => Err(ExplainError::UnknownTemplate(s.to_string())),
        }
    }
}

/// `{task}/{mode}/{name}`, e.g. `comve/explain_false/default_A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TemplateId {
    pub task: Task,
    pub mode: Mode,
    pub name: TemplateName,
}

impl TemplateId {
    pub fn new(task: Task, mode: Mode, name: TemplateName) -> Self {
        TemplateId { task, mode, name }
    }

    pub fn all() -> Vec<TemplateId> {
        let mut out = Vec::new();
        for task in [Task::Comve, Task::Esnli] {
            for mode in [Mode::ExplainFalse, Mode::ExplainCorrect] {
                for name in TemplateName::ALL {
                    out.push(TemplateId::new(task, mode, name));
                }
            }
        }
        out
    }

    /// The registered template text, without its trailing newline.
    pub fn text(&self) -> &'static str {
        registry(*self).trim_end_matches('\n')
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.task, self.mode.as_str(), self.name)
    }
}

impl FromStr for TemplateId {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self, ExplainError> {
        let unknown = || ExplainError::UnknownTemplate(s.to_string());
        let parts: Vec<&str> = s.split('/').collect();
        let [task, mode, name] = parts.as_slice() else {
            return Err(unknown());
        };
        Ok(TemplateId {
            task: task.parse().map_err(|_| unknown())?,
            mode: mode.parse()?,
            name: name.parse()?,
        })
    }
}

impl Serialize for TemplateId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TemplateId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

macro_rules! templates {
    ($($task:ident / $mode:ident / $name:ident => $path:literal,)*) => {
        fn registry(id: TemplateId) -> &'static str {
            match (id.task, id.mode, id.name) {
                $((Task::$task, Mode::$mode, TemplateName::$name) => include_str!(concat!("../templates/", $path)),)*
            }
        }
    };
}

templates! {
    Comve / ExplainFalse / Original => "comve/explain_false/original.txt",
    Comve / ExplainFalse / DefaultA => "comve/explain_false/default_A.txt",
    Comve / ExplainFalse / AnnotatorB => "comve/explain_false/annotator_B.txt",
    Comve / ExplainFalse / AnnotatorC => "comve/explain_false/annotator_C.txt",
    Comve / ExplainFalse / Instruction => "comve/explain_false/instruction.txt",
    Comve / ExplainCorrect / Original => "comve/explain_correct/original.txt",
    Comve / ExplainCorrect / DefaultA => "comve/explain_correct/default_A.txt",
    Comve / ExplainCorrect / AnnotatorB => "comve/explain_correct/annotator_B.txt",
    Comve / ExplainCorrect / AnnotatorC => "comve/explain_correct/annotator_C.txt",
    Comve / ExplainCorrect / Instruction => "comve/explain_correct/instruction.txt",
    Esnli / ExplainFalse / Original => "esnli/explain_false/original.txt",
    Esnli / ExplainFalse / DefaultA => "esnli/explain_false/default_A.txt",
    Esnli / ExplainFalse / AnnotatorB => "esnli/explain_false/annotator_B.txt",
    Esnli / ExplainFalse / AnnotatorC => "esnli/explain_false/annotator_C.txt",
    Esnli / ExplainFalse / Instruction => "esnli/explain_false/instruction.txt",
    Esnli / ExplainCorrect / Original => "esnli/explain_correct/original.txt",
    Esnli / ExplainCorrect / DefaultA => "esnli/explain_correct/default_A.txt",
    Esnli / ExplainCorrect / AnnotatorB => "esnli/explain_correct/annotator_B.txt",
    Esnli / ExplainCorrect / AnnotatorC => "esnli/explain_correct/annotator_C.txt",
    Esnli / ExplainCorrect / Instruction => "esnli/explain_correct/instruction.txt",
}

/// Explanation methods: the baselines and the two phase I variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Original,
    Random,
    RetrievalBm25,
    RetrievalEmbed,
    GroundTruth,
    Top1,
    NeonIcl,
    NeonCgmh,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Original,
        Method::Random,
        Method::RetrievalBm25,
        Method::RetrievalEmbed,
        Method::GroundTruth,
        Method::Top1,
        Method::NeonIcl,
        Method::NeonCgmh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Random => "random",
            Method::RetrievalBm25 => "retrieval_bm25",
            Method::RetrievalEmbed => "retrieval_embed",
            Method::GroundTruth => "ground_truth",
            Method::Top1 => "top1",
            Method::NeonIcl => "neon_icl",
            Method::NeonCgmh => "neon_cgmh",
        }
    }

    /// Required hint count, when the method fixes one.
    pub fn hint_count(self, ensemble: usize) -> Option<usize> {
        match self {
            Method::Original => Some(0),
            Method::Random | Method::GroundTruth | Method::Top1 => Some(1),
            Method::NeonIcl | Method::NeonCgmh => Some(ensemble),
            Method::RetrievalBm25 | Method::RetrievalEmbed => None,
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `"1. h1, 2. h2, ..."` with trailing periods of each hint removed.
pub fn format_hints<S: AsRef<str>>(hints: &[S]) -> Result<String, ExplainError> {
    if hints.is_empty() {
        return Err(ExplainError::EmptyHints);
    }
    Ok(hints
        .iter()
        .enumerate()
        .map(|(i, h)| {
            format!(
                "{}. {}",
                i + 1,
                text::strip_terminal_period(h.as_ref().trim())
            )
        })
        .collect::<Vec<_>>()
        .join(", "))
}

/// Single-pass placeholder substitution; substituted values are never
/// rescanned.
pub fn fill(template: &str, values: &[(&str, &str)]) -> Result<String, ExplainError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            return Ok(out);
        };
        let key = &after[..close];
        let value = values
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| ExplainError::UnknownPlaceholder(key.to_string()))?;
        out.push_str(value.1);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// A fully rendered phase II prompt plus decoding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template: TemplateId,
    /// The statement being explained, as it appears in the pair.
    pub statement: String,
    pub prompt: String,
    pub max_tokens: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl PromptSpec {
    pub fn request(&self) -> CompletionRequest {
        CompletionRequest {
            prompt: self.prompt.clone(),
            max_tokens: self.max_tokens,
            top_p: self.top_p,
            temperature: self.temperature,
            stop: self.stop.clone(),
            n_samples: 1,
            seed: 0,
        }
    }
}

/// Renders `template` for `pair`: the incorrect statement in
/// `explain_false` mode, the correct one in `explain_correct` mode.
pub fn build_explain_prompt<S: AsRef<str>>(
    pair: &StatementPair,
    hints: &[S],
    template: TemplateId,
) -> Result<PromptSpec, ExplainError> {
    if template.task != pair.task {
        return Err(ExplainError::TemplateMismatch {
            template: template.to_string(),
            problem: format!("does not apply to a {} pair", pair.task),
        });
    }
    if template.name.uses_hints() == hints.is_empty() {
        return Err(ExplainError::TemplateMismatch {
            template: template.to_string(),
            problem: format!("given {} hints", hints.len()),
        });
    }
    let raw_statement = match template.mode {
        Mode::ExplainFalse => &pair.incorrect,
        Mode::ExplainCorrect => &pair.correct,
    };
    let statement = text::strip_terminal_period(raw_statement.trim());
    let premise = match (pair.task, &pair.premise) {
        (Task::Esnli, Some(p)) => text::decapitalize(text::strip_terminal_period(p.trim())),
        (Task::Esnli, None) => return Err(ExplainError::MissingPremise(pair.id.clone())),
        (Task::Comve, _) => String::new(),
    };
    let hints = if hints.is_empty() {
        String::new()
    } else {
        format_hints(hints)?
    };
    let prompt = fill(
        template.text(),
        &[
            ("statement", statement),
            ("hints", &hints),
            ("premise", &premise),
        ],
    )?;
    Ok(PromptSpec {
        template,
        statement: raw_statement.clone(),
        prompt,
        max_tokens: EXPLANATION_MAX_TOKENS,
        top_p: 0.9,
        temperature: 0.0,
        stop: vec!["\n\n".to_string()],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub source_id: String,
    pub method: Method,
    pub template: TemplateId,
    #[serde(default)]
    pub statement: String,
    pub hints: Vec<String>,
    pub prompt: String,
    pub prompt_sha256: String,
    pub explanation: String,
    pub references: Vec<String>,
    /// Set when the model produced nothing.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

impl ExplanationRecord {
    /// Hint-cardinality contract of each method.
    pub fn check(&self, ensemble: usize) -> Result<(), ExplainError> {
        if let Some(n) = self.method.hint_count(ensemble) {
            if self.hints.len() != n {
                return Err(ExplainError::Invariant {
                    source_id: self.source_id.clone(),
                    method: self.method.to_string(),
                    problem: format!("needs {n} hints, has {}", self.hints.len()),
                });
            }
        }
        if self.method == Method::Original && self.template.name != TemplateName::Original {
            return Err(ExplainError::Invariant {
                source_id: self.source_id.clone(),
                method: self.method.to_string(),
                problem: format!("rendered with {}", self.template),
            });
        }
        Ok(())
    }
}

/// Cuts at the first blank line and trims.
pub fn clean_explanation(raw: &str) -> String {
    let cut = raw.find("\n\n").unwrap_or(raw.len());
    raw[..cut].trim().to_string()
}

/// One greedy completion for `spec`, packaged with its provenance.
pub fn generate_explanation(
    spec: &PromptSpec,
    source_id: &str,
    method: Method,
    hints: Vec<String>,
    references: Vec<String>,
    gateway: &Gateway,
) -> Result<ExplanationRecord, ExplainError> {
    let prompt_sha256 = text::sha256_hex(&spec.prompt);
    let raw = gateway
        .complete(&spec.request())
        .map_err(|source| ExplainError::Gateway {
            source_id: source_id.to_string(),
            prompt_hash: prompt_sha256[..16].to_string(),
            source,
        })?;
    let explanation = clean_explanation(raw.first().map(String::as_str).unwrap_or_default());
    if explanation.is_empty() {
        log::warn!("{source_id}: empty explanation for {method}");
    }
    Ok(ExplanationRecord {
        source_id: source_id.to_string(),
        method,
        template: spec.template,
        statement: spec.statement.clone(),
        hints,
        prompt: spec.prompt.clone(),
        prompt_sha256,
        empty: explanation.is_empty(),
        explanation,
        references,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn comve_pair() -> StatementPair {
        StatementPair {
            id: "c1".into(),
            task: Task::Comve,
            split: Split::Test,
            premise: None,
            correct: "John put a turkey into the fridge.".into(),
            incorrect: "John put an elephant into the fridge.".into(),
            refs_incorrect: vec!["a".into(), "b".into(), "c".into()],
            refs_correct: vec![],
        }
    }

    #[test]
    fn every_template_resolves_and_has_known_placeholders() {
        for id in TemplateId::all() {
            let t = id.text();
            assert!(!t.is_empty(), "{id}");
            assert!(!t.ends_with('\n'));
            let filled = fill(t, &[("statement", "S"), ("hints", "H"), ("premise", "P")]).unwrap();
            assert!(!filled.contains('{') && !filled.contains('}'), "{id}");
            assert_eq!(id.to_string().parse::<TemplateId>().unwrap(), id);
            assert_eq!(t.contains("{premise}"), id.task == Task::Esnli, "{id}");
        }
    }

    #[test]
    fn hints_format() {
        assert_eq!(
            format_hints(&[
                "John put a turkey into the fridge.",
                "John put a peach into the fridge."
            ])
            .unwrap(),
            "1. John put a turkey into the fridge, 2. John put a peach into the fridge"
        );
        assert_eq!(format_hints(&["h1"]).unwrap(), "1. h1");
        assert_eq!(format_hints(&["a, b."]).unwrap(), "1. a, b");
        assert!(format_hints::<&str>(&[]).is_err());
    }

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(
            fill("{a}-{b}", &[("a", "{b}"), ("b", "x")]).unwrap(),
            "{b}-x"
        );
        assert!(matches!(
            fill("{zzz}", &[]),
            Err(ExplainError::UnknownPlaceholder(_))
        ));
    }

    #[test]
    fn original_rejects_hints_and_others_need_them() {
        let p = comve_pair();
        let orig = TemplateId::new(Task::Comve, Mode::ExplainFalse, TemplateName::Original);
        assert!(build_explain_prompt(&p, &["x"], orig).is_err());
        let a = TemplateId::new(Task::Comve, Mode::ExplainFalse, TemplateName::DefaultA);
        assert!(build_explain_prompt::<&str>(&p, &[], a).is_err());
        let e = TemplateId::new(Task::Esnli, Mode::ExplainFalse, TemplateName::DefaultA);
        assert!(build_explain_prompt(&p, &["x"], e).is_err());
    }

    #[test]
    fn record_invariants() {
        let mut r = ExplanationRecord {
            source_id: "s".into(),
            method: Method::Top1,
            template: TemplateId::new(Task::Comve, Mode::ExplainFalse, TemplateName::DefaultA),
            statement: String::new(),
            hints: vec!["a".into(), "b".into()],
            prompt: String::new(),
            prompt_sha256: String::new(),
            explanation: String::new(),
            references: vec![],
            empty: true,
        };
        assert!(r.check(5).is_err());
        r.hints.truncate(1);
        r.check(5).unwrap();
        r.method = Method::NeonIcl;
        assert!(r.check(5).is_err());
        r.check(1).unwrap();
    }
}
