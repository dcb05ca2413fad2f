//! Phase I without supervision: Metropolis-Hastings editing of the false
//! statement.
//!
//! Each step samples a position in proportion to its masked-LM anomaly
//! score, samples an edit action, proposes the edited sentence and accepts
//! it with probability `min(1, fluency(proposal) / fluency(current))`.

use std::collections::HashMap;

use num_rational::Ratio;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{StatementPair, Task};
use crate::gateway::{Gateway, GatewayError};
use crate::instantiation::{dedup_normalized, Instantiation, InstantiationMethod};
use crate::text;

/// Probability used for the original token when the masked model does not
/// report it.
pub const PROB_FLOOR: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum CgmhError {
    #[error("action probabilities must be non-negative and sum to exactly 1, got {0}")]
    InvalidDistribution(String),
    #[error("cannot edit an empty statement")]
    EmptyStatement,
    #[error("position scores need at least 2 tokens")]
    TooShort,
    #[error("position {position}: {source}")]
    AtPosition {
        position: usize,
        source: GatewayError,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Replace,
    Insert,
    Delete,
}

/// Categorical distribution over edit actions with exact rational weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ActionWeights", into = "ActionWeights")]
pub struct ActionDistribution {
    p_replace: Ratio<u64>,
    p_insert: Ratio<u64>,
    p_delete: Ratio<u64>,
}

/// Decimal form used in configuration files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ActionWeights {
    pub replace: f64,
    pub insert: f64,
    pub delete: f64,
}

impl ActionDistribution {
    pub fn new(
        p_replace: Ratio<u64>,
        p_insert: Ratio<u64>,
        p_delete: Ratio<u64>,
    ) -> Result<Self, CgmhError> {
        if p_replace + p_insert + p_delete != Ratio::from_integer(1) {
            return Err(CgmhError::InvalidDistribution(format!(
                "{p_replace} + {p_insert} + {p_delete}"
            )));
        }
        Ok(ActionDistribution {
            p_replace,
            p_insert,
            p_delete,
        })
    }

    pub fn replace_only() -> Self {
        Self::new(
            Ratio::from_integer(1),
            Ratio::from_integer(0),
            Ratio::from_integer(0),
        )
        .expect("valid")
    }

    pub fn probabilities(&self) -> [Ratio<u64>; 3] {
        [self.p_replace, self.p_insert, self.p_delete]
    }

    /// Exact draw: a uniform integer below the common denominator compared
    /// against the cumulative numerators.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let denom = self
            .probabilities()
            .iter()
            .fold(1u64, |acc, p| num_integer_lcm(acc, *p.denom()));
        let scaled = self
            .probabilities()
            .map(|p| p.numer() * (denom / p.denom()));
        let u = rng.gen_range(0..denom);
        if u < scaled[0] {
            Action::Replace
        } else if u < scaled[0] + scaled[1] {
            Action::Insert
        } else {
            Action::Delete
        }
    }
}

fn num_integer_lcm(a: u64, b: u64) -> u64 {
    fn gcd(mut a: u64, mut b: u64) -> u64 {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }
    a / gcd(a, b) * b
}

impl Default for ActionDistribution {
    fn default() -> Self {
        Self::new(Ratio::new(7, 10), Ratio::new(2, 10), Ratio::new(1, 10)).expect("valid")
    }
}

fn to_ratio(x: f64) -> Result<Ratio<u64>, CgmhError> {
    if x.is_nan() || x < 0.0 {
        return Err(CgmhError::InvalidDistribution(format!(
            "negative weight {x}"
        )));
    }
    let r: Ratio<i64> = Ratio::approximate_float(x)
        .ok_or_else(|| CgmhError::InvalidDistribution(format!("unrepresentable weight {x}")))?;
    Ok(Ratio::new(*r.numer() as u64, *r.denom() as u64))
}

impl TryFrom<ActionWeights> for ActionDistribution {
    type Error = CgmhError;

    fn try_from(w: ActionWeights) -> Result<Self, CgmhError> {
        Self::new(
            to_ratio(w.replace)?,
            to_ratio(w.insert)?,
            to_ratio(w.delete)?,
        )
    }
}

impl From<ActionDistribution> for ActionWeights {
    fn from(d: ActionDistribution) -> Self {
        let f = |r: Ratio<u64>| *r.numer() as f64 / *r.denom() as f64;
        ActionWeights {
            replace: f(d.p_replace),
            insert: f(d.p_insert),
            delete: f(d.p_delete),
        }
    }
}

pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> Action {
    dist.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub action: Action,
    pub position: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditState {
    pub tokens: Vec<String>,
    pub log_fluency: f64,
    pub fluency: f64,
    pub step: usize,
    pub history: Vec<Edit>,
}

impl EditState {
    pub fn new(tokens: Vec<String>, gateway: &Gateway) -> Result<Self, CgmhError> {
        let log_fluency = log_fluency(&tokens, gateway)?;
        Ok(EditState {
            tokens,
            log_fluency,
            fluency: log_fluency.exp(),
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn text(&self) -> String {
        text::detokenize(&self.tokens)
    }
}

fn log_fluency(tokens: &[String], gateway: &Gateway) -> Result<f64, CgmhError> {
    if tokens.is_empty() {
        return Err(CgmhError::EmptyStatement);
    }
    Ok(gateway.score_sequence(&text::detokenize(tokens))?.total())
}

/// Product of the autoregressive conditionals, `exp(sum of logprobs)`.
pub fn fluency(tokens: &[String], gateway: &Gateway) -> Result<f64, CgmhError> {
    log_fluency(tokens, gateway).map(f64::exp)
}

fn masked_log_prob(
    tokens: &[String],
    position: usize,
    gateway: &Gateway,
) -> Result<f64, CgmhError> {
    let target = [tokens[position].clone()];
    let (_, probs) = gateway
        .fill_mask_with_targets(tokens, position, 1, &target)
        .map_err(|source| CgmhError::AtPosition { position, source })?;
    Ok(probs[0].unwrap_or(PROB_FLOOR).max(PROB_FLOOR).ln())
}

/// Masked-LM pseudo-perplexity: each position is masked in turn and the
/// probability of the original token is read back.
pub fn pseudo_perplexity(tokens: &[String], gateway: &Gateway) -> Result<f64, CgmhError> {
    if tokens.is_empty() {
        return Err(CgmhError::EmptyStatement);
    }
    let mut sum = 0.0;
    for i in 0..tokens.len() {
        sum += masked_log_prob(tokens, i, gateway)?;
    }
    Ok((-sum / tokens.len() as f64).exp())
}

/// Pseudo-perplexity of the sentence with `hidden` masked, averaged over
/// the remaining positions.
fn pseudo_perplexity_without(
    tokens: &[String],
    hidden: usize,
    gateway: &Gateway,
) -> Result<f64, CgmhError> {
    let mut masked = tokens.to_vec();
    masked[hidden] = text::MASK_TOKEN.to_string();
    let mut sum = 0.0;
    for j in (0..tokens.len()).filter(|&j| j != hidden) {
        sum += masked_log_prob(&masked, j, gateway)?;
    }
    Ok((-sum / (tokens.len() - 1) as f64).exp())
}

/// Per-position anomaly score `PPL(x) / PPL(x without x_i)`; higher means
/// the token at `i` is more likely to be the one to edit.
pub fn position_scores(tokens: &[String], gateway: &Gateway) -> Result<Vec<f64>, CgmhError> {
    if tokens.len() < 2 {
        return Err(CgmhError::TooShort);
    }
    let full = pseudo_perplexity(tokens, gateway)?;
    (0..tokens.len())
        .map(|i| pseudo_perplexity_without(tokens, i, gateway).map(|p| full / p))
        .collect()
}

/// Scores normalized by their sum.
pub fn position_distribution(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    scores.iter().map(|s| s / total).collect()
}

/// Draws an index with probability proportional to its weight.
pub fn sample_position<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

/// Applies one edit. Returns `None` when the proposal is not admissible
/// (length bounds, no usable candidate); the step then counts as rejected.
pub fn propose<R: Rng + ?Sized>(
    state: &EditState,
    position: usize,
    action: Action,
    top_k: usize,
    max_len: usize,
    gateway: &Gateway,
    rng: &mut R,
) -> Result<Option<EditState>, CgmhError> {
    let mut tokens = state.tokens.clone();
    let token = match action {
        Action::Delete => {
            if tokens.len() < 2 || position >= tokens.len() {
                return Ok(None);
            }
            tokens.remove(position);
            None
        }
        Action::Replace | Action::Insert => {
            let current = match action {
                Action::Replace => {
                    if position >= tokens.len() {
                        return Ok(None);
                    }
                    Some(tokens[position].clone())
                }
                _ => {
                    if position > tokens.len() || tokens.len() + 1 > max_len {
                        return Ok(None);
                    }
                    tokens.insert(position, text::MASK_TOKEN.to_string());
                    None
                }
            };
            let set = gateway
                .fill_mask(&tokens, position, top_k)
                .map_err(|source| CgmhError::AtPosition { position, source })?;
            let pool: Vec<_> = set
                .candidates
                .iter()
                .filter(|c| Some(&c.token) != current.as_ref() && c.token != text::MASK_TOKEN)
                .collect();
            if pool.is_empty() {
                return Ok(None);
            }
            let weights: Vec<f64> = pool.iter().map(|c| c.prob).collect();
            let chosen = pool[sample_position(&weights, rng)].token.clone();
            tokens[position] = chosen.clone();
            Some(chosen)
        }
    };
    let log_fluency = log_fluency(&tokens, gateway)?;
    let mut history = state.history.clone();
    history.push(Edit {
        action,
        position,
        token,
    });
    Ok(Some(EditState {
        tokens,
        log_fluency,
        fluency: log_fluency.exp(),
        step: state.step + 1,
        history,
    }))
}

/// Acceptance with probability `min(1, ratio)`.
pub fn accept_ratio<R: Rng + ?Sized>(ratio: f64, rng: &mut R) -> bool {
    ratio >= 1.0 || rng.gen::<f64>() < ratio
}

pub fn accept<R: Rng + ?Sized>(current: &EditState, proposal: &EditState, rng: &mut R) -> bool {
    accept_ratio((proposal.log_fluency - current.log_fluency).exp(), rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgmhConfig {
    pub steps: usize,
    pub top_k: usize,
    pub chains: usize,
    /// Overrides the per-task length limit (25 ComVE, 40 e-SNLI).
    pub max_len: Option<usize>,
    pub actions: ActionDistribution,
}

impl Default for CgmhConfig {
    fn default() -> Self {
        CgmhConfig {
            steps: 50,
            top_k: 50,
            chains: 5,
            max_len: None,
            actions: ActionDistribution::default(),
        }
    }
}

impl CgmhConfig {
    pub fn max_len_for(&self, task: Task) -> usize {
        self.max_len.unwrap_or(task.instantiation_max_tokens())
    }
}

/// Result of one chain, kept for inspection and trajectory tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub chain: usize,
    pub best: Option<EditState>,
    pub accepted: usize,
    pub final_state: EditState,
}

pub fn run_single_chain(
    statement: &str,
    config: &CgmhConfig,
    max_len: usize,
    gateway: &Gateway,
    seed: u64,
    chain: usize,
) -> Result<ChainTrace, CgmhError> {
    let initial = text::tokenize(statement);
    if initial.is_empty() {
        return Err(CgmhError::EmptyStatement);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(chain as u64));
    let mut current = EditState::new(initial.clone(), gateway)?;
    let mut best: Option<EditState> = None;
    let mut accepted = 0;
    let mut score_cache: HashMap<Vec<String>, Vec<f64>> = HashMap::new();
    for step in 0..config.steps {
        let weights = if current.tokens.len() < 2 {
            vec![1.0]
        } else {
            match score_cache.get(&current.tokens) {
                Some(w) => w.clone(),
                None => {
                    let w = position_distribution(&position_scores(&current.tokens, gateway)?);
                    score_cache.insert(current.tokens.clone(), w.clone());
                    w
                }
            }
        };
        let position = sample_position(&weights, &mut rng);
        let action = config.actions.sample(&mut rng);
        let proposal = propose(
            &current,
            position,
            action,
            config.top_k,
            max_len,
            gateway,
            &mut rng,
        )?;
        if let Some(mut p) = proposal {
            p.step = step + 1;
            if accept(&current, &p, &mut rng) {
                current = p;
                accepted += 1;
            }
        }
        let eligible = current.tokens != initial && current.tokens.len() <= max_len;
        if eligible
            && best
                .as_ref()
                .is_none_or(|b| current.log_fluency > b.log_fluency)
        {
            best = Some(current.clone());
        }
    }
    Ok(ChainTrace {
        chain,
        best,
        accepted,
        final_state: current,
    })
}

/// Runs `config.chains` chains from the incorrect statement; chain `c` uses
/// seed `seed + c`. Each chain contributes its best visited state that
/// differs from the input; duplicates across chains are dropped.
pub fn run_chain(
    pair: &StatementPair,
    config: &CgmhConfig,
    gateway: &Gateway,
    seed: u64,
) -> Result<Vec<Instantiation>, CgmhError> {
    let max_len = config.max_len_for(pair.task);
    let traces = (0..config.chains)
        .into_par_iter()
        .map(|c| run_single_chain(&pair.incorrect, config, max_len, gateway, seed, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for t in traces {
        match t.best {
            Some(best) => {
                let mut inst =
                    Instantiation::new(&pair.id, InstantiationMethod::Cgmh, t.chain, best.text());
                inst.fluency = Some(best.fluency);
                out.push(inst);
            }
            None => log::info!("{}: chain {} never left the input", pair.id, t.chain),
        }
    }
    Ok(dedup_normalized(out))
}
