//! Phase I by in-context learning: few-shot correction prompts and the
//! parsing of their completions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ExemplarPool, StatementPair, Task};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::instantiation::{dedup_normalized, Instantiation, InstantiationMethod};
use crate::text;

pub const DEFAULT_K: usize = 16;
pub const DEFAULT_SAMPLES: usize = 10;
/// Tokens reserved on top of `max_tokens` when fitting a prompt.
pub const GENERATION_SLACK: usize = 8;

const COMVE_HEADER: &str =
    "Task: Based on the incorrect statement, generate the correct statement.";
const ESNLI_HEADER: &str =
    "Task: Given the premise and the incorrect statement, generate the correct statement.";
const INCORRECT: &str = "Incorrect statement:";
const CORRECT: &str = "Correct statement:";
const PREMISE: &str = "Premise:";

#[derive(Debug, thiserror::Error)]
pub enum IclError {
    #[error("exemplar pool is empty")]
    EmptyPool,
    #[error("K={k} exceeds the {available} usable exemplars")]
    NotEnoughExemplars { k: usize, available: usize },
    #[error("{id}: {field} missing")]
    MissingField { id: String, field: &'static str },
    #[error("{id}: prompt needs {needed} tokens even with K=0, budget is {budget}")]
    PromptTooLong {
        id: String,
        needed: usize,
        budget: usize,
    },
    #[error("{source_id} (prompt {prompt_hash}): {source}")]
    Gateway {
        source_id: String,
        prompt_hash: String,
        source: GatewayError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    pub incorrect: String,
    pub correct: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPrompt {
    pub task: Task,
    pub source_id: String,
    pub exemplars: Vec<Exemplar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    pub target: String,
    pub rendered: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IclConfig {
    pub k: usize,
    pub n_samples: usize,
    /// Sampling temperature for the `n_samples` draws. Several distinct
    /// instantiations cannot come out of greedy decoding, so this defaults
    /// to 1.0 rather than the greedy setting used for explanations.
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for IclConfig {
    fn default() -> Self {
        IclConfig {
            k: DEFAULT_K,
            n_samples: DEFAULT_SAMPLES,
            temperature: 1.0,
            top_p: 0.9,
        }
    }
}

fn block(task: Task, premise: Option<&str>, incorrect: &str, correct: Option<&str>) -> String {
    let mut out = String::new();
    if task == Task::Esnli {
        out.push_str(&format!("{PREMISE} {}\n", premise.unwrap_or_default()));
    }
    out.push_str(&format!("{INCORRECT} {incorrect}\n{CORRECT}"));
    if let Some(c) = correct {
        out.push(' ');
        out.push_str(c);
    }
    out
}

/// Renders the header, the exemplar blocks and the unanswered target block.
pub fn render(task: Task, exemplars: &[Exemplar], premise: Option<&str>, target: &str) -> String {
    let header = match task {
        Task::Comve => COMVE_HEADER,
        Task::Esnli => ESNLI_HEADER,
    };
    let mut parts = vec![header.to_string()];
    for ex in exemplars {
        parts.push(block(
            task,
            ex.premise.as_deref(),
            &ex.incorrect,
            Some(&ex.correct),
        ));
    }
    parts.push(block(task, premise, target, None));
    parts.join("\n\n")
}

fn exemplar_of(pair: &StatementPair, task: Task) -> Result<Exemplar, IclError> {
    if task == Task::Esnli && pair.premise.is_none() {
        return Err(IclError::MissingField {
            id: pair.id.clone(),
            field: "premise",
        });
    }
    Ok(Exemplar {
        premise: pair.premise.clone(),
        incorrect: pair.incorrect.clone(),
        correct: pair.correct.clone(),
    })
}

/// Picks `k` exemplars from `pool` (never the target pair itself), renders
/// the prompt and drops trailing exemplars until prompt plus
/// `max_tokens + GENERATION_SLACK` fits `budget`.
pub fn build_fewshot_prompt(
    pool: &ExemplarPool,
    pair: &StatementPair,
    k: usize,
    seed: u64,
    budget: usize,
) -> Result<FewShotPrompt, IclError> {
    if pool.items.is_empty() {
        return Err(IclError::EmptyPool);
    }
    let task = pair.task;
    if pair.incorrect.trim().is_empty() {
        return Err(IclError::MissingField {
            id: pair.id.clone(),
            field: "incorrect",
        });
    }
    if task == Task::Esnli && pair.premise.is_none() {
        return Err(IclError::MissingField {
            id: pair.id.clone(),
            field: "premise",
        });
    }
    let target_norm = text::normalize(&pair.incorrect);
    let eligible: Vec<&StatementPair> = pool
        .items
        .iter()
        .filter(|p| {
            p.id != pair.id
                && text::normalize(&p.incorrect) != target_norm
                && text::normalize(&p.correct) != target_norm
        })
        .collect();
    if k > eligible.len() {
        return Err(IclError::NotEnoughExemplars {
            k,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(text::mix64(seed ^ text::fnv1a(pair.id.as_bytes())));
    let mut exemplars = rand::seq::index::sample(&mut rng, eligible.len(), k)
        .into_iter()
        .map(|i| exemplar_of(eligible[i], task))
        .collect::<Result<Vec<_>, _>>()?;

    let allowance = task.instantiation_max_tokens() + GENERATION_SLACK;
    loop {
        let rendered = render(task, &exemplars, pair.premise.as_deref(), &pair.incorrect);
        let needed = text::tokenize(&rendered).len() + allowance;
        if needed <= budget {
            return Ok(FewShotPrompt {
                task,
                source_id: pair.id.clone(),
                k: exemplars.len(),
                exemplars,
                premise: pair.premise.clone(),
                target: pair.incorrect.clone(),
                rendered,
            });
        }
        if exemplars.pop().is_none() {
            return Err(IclError::PromptTooLong {
                id: pair.id.clone(),
                needed,
                budget,
            });
        }
    }
}

/// Cuts a raw completion at the first newline or echoed block marker,
/// trims it and ensures terminal punctuation.
pub fn parse_completion(raw: &str) -> Option<String> {
    let mut cut = raw.len();
    for marker in ["\n", INCORRECT] {
        if let Some(i) = raw.find(marker) {
            cut = cut.min(i);
        }
    }
    let s = raw[..cut].trim();
    if s.is_empty() {
        return None;
    }
    if s.ends_with(['.', '!', '?']) {
        Some(s.to_string())
    } else {
        Some(format!("{s}."))
    }
}

/// Samples `config.n_samples` completions and keeps the usable, distinct
/// ones in sample order.
pub fn generate_instantiations(
    prompt: &FewShotPrompt,
    config: &IclConfig,
    gateway: &Gateway,
    seed: u64,
) -> Result<Vec<Instantiation>, IclError> {
    let req = CompletionRequest {
        prompt: prompt.rendered.clone(),
        max_tokens: prompt.task.instantiation_max_tokens(),
        top_p: config.top_p,
        temperature: config.temperature,
        stop: vec!["\n".to_string()],
        n_samples: config.n_samples,
        seed,
    };
    let outputs = gateway.complete(&req).map_err(|source| IclError::Gateway {
        source_id: prompt.source_id.clone(),
        prompt_hash: text::prompt_hash(&prompt.rendered),
        source,
    })?;
    let source_norm = text::normalize(&prompt.target);
    let parsed = outputs
        .iter()
        .enumerate()
        .filter_map(|(i, raw)| {
            let t = parse_completion(raw)?;
            (text::normalize(&t) != source_norm)
                .then(|| Instantiation::new(&prompt.source_id, InstantiationMethod::Icl, i, t))
        })
        .collect();
    Ok(dedup_normalized(parsed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn pair(id: &str, incorrect: &str, correct: &str) -> StatementPair {
        StatementPair {
            id: id.into(),
            task: Task::Comve,
            split: Split::Train,
            premise: None,
            correct: correct.into(),
            incorrect: incorrect.into(),
            refs_incorrect: vec!["r1".into(), "r2".into(), "r3".into()],
            refs_correct: vec![],
        }
    }

    #[test]
    fn parse_rules() {
        assert_eq!(
            parse_completion("He drinks milk.\nIncorrect statement: ...").as_deref(),
            Some("He drinks milk.")
        );
        assert_eq!(parse_completion("   "), None);
        assert_eq!(
            parse_completion("A home is a place for safety").as_deref(),
            Some("A home is a place for safety.")
        );
        assert_eq!(
            parse_completion(" Fish swim. Incorrect statement: x").as_deref(),
            Some("Fish swim.")
        );
    }

    #[test]
    fn zero_shot_prompt_has_header_and_target_only() {
        let pool = ExemplarPool {
            items: vec![pair("a", "He drinks apple.", "He drinks milk.")],
            seed: 0,
        };
        let target = pair("t", "John put an elephant into the fridge.", "x");
        let p = build_fewshot_prompt(&pool, &target, 0, 1, 2048).unwrap();
        assert_eq!(
            p.rendered,
            "Task: Based on the incorrect statement, generate the correct statement.\n\n\
             Incorrect statement: John put an elephant into the fridge.\nCorrect statement:"
        );
    }

    #[test]
    fn target_never_used_as_exemplar() {
        let items = (0..5)
            .map(|i| {
                pair(
                    &format!("p{i}"),
                    &format!("bad {i}."),
                    &format!("good {i}."),
                )
            })
            .collect::<Vec<_>>();
        let pool = ExemplarPool {
            items: items.clone(),
            seed: 0,
        };
        let p = build_fewshot_prompt(&pool, &items[2], 4, 9, 2048).unwrap();
        assert_eq!(p.k, 4);
        assert!(p.exemplars.iter().all(|e| e.incorrect != "bad 2."));
        assert!(matches!(
            build_fewshot_prompt(&pool, &items[2], 5, 9, 2048),
            Err(IclError::NotEnoughExemplars { .. })
        ));
    }

    #[test]
    fn esnli_requires_premise() {
        let mut t = pair("t", "The woman has been shot.", "The woman is smiling.");
        t.task = Task::Esnli;
        let pool = ExemplarPool {
            items: vec![pair("a", "x.", "y.")],
            seed: 0,
        };
        assert!(matches!(
            build_fewshot_prompt(&pool, &t, 0, 0, 2048),
            Err(IclError::MissingField {
                field: "premise",
                ..
            })
        ));
    }
}
