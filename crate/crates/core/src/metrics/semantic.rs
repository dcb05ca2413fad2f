//! Embedding-based similarity: greedy token matching (BERTScore-style, no
//! idf weighting, no baseline rescaling) and sentence-vector cosine.

use crate::gateway::{Gateway, GatewayError, Granularity};
use crate::scalar::{cosine, from_wire, Scalar};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SemanticError {
    #[error("no references")]
    NoReferences,
    #[error("embedding dimensions differ")]
    DimensionMismatch,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn check_dims<S>(groups: &[&[Vec<S>]]) -> Result<(), SemanticError> {
    let mut dim = None;
    for v in groups.iter().flat_map(|g| g.iter()) {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => return Err(SemanticError::DimensionMismatch),
            _ => {}
        }
    }
    Ok(())
}

/// Greedy-matching F1 of one candidate against one reference, in `[0, 1]`.
pub fn greedy_f1<S: Scalar>(cand: &[Vec<S>], reference: &[Vec<S>]) -> S {
    if cand.is_empty() || reference.is_empty() {
        return S::zero();
    }
    let sim: Vec<Vec<S>> = cand
        .iter()
        .map(|c| reference.iter().map(|r| cosine(c, r)).collect())
        .collect();
    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(S::neg_infinity(), S::max))
        .fold(S::zero(), |a, b| a + b)
        / S::from_count(cand.len());
    let recall = (0..reference.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(S::neg_infinity(), S::max))
        .fold(S::zero(), |a, b| a + b)
        / S::from_count(reference.len());
    if precision + recall <= S::zero() {
        return S::zero();
    }
    S::lit(2.0) * precision * recall / (precision + recall)
}

/// Maximum greedy F1 over references, as a percentage clamped to `[0, 100]`.
pub fn bertscore_from_vectors<S: Scalar>(
    cand: &[Vec<S>],
    references: &[&[Vec<S>]],
) -> Result<S, SemanticError> {
    if references.is_empty() {
        return Err(SemanticError::NoReferences);
    }
    let mut groups = vec![cand];
    groups.extend_from_slice(references);
    check_dims(&groups)?;
    let best = references
        .iter()
        .map(|r| greedy_f1(cand, r))
        .fold(S::zero(), S::max);
    Ok((S::hundred() * best).clamp_to(S::zero(), S::hundred()))
}

/// `100 * max cosine`, clamped to `[0, 100]`.
pub fn sbert_from_vectors<S: Scalar>(
    cand: &[S],
    references: &[Vec<S>],
) -> Result<S, SemanticError> {
    if references.is_empty() {
        return Err(SemanticError::NoReferences);
    }
    if references.iter().any(|r| r.len() != cand.len()) {
        return Err(SemanticError::DimensionMismatch);
    }
    let best = references
        .iter()
        .map(|r| cosine(cand, r))
        .fold(S::neg_infinity(), S::max);
    Ok((S::hundred() * best).clamp_to(S::zero(), S::hundred()))
}

fn texts<R: AsRef<str>>(candidate: &str, references: &[R]) -> Vec<String> {
    std::iter::once(candidate.to_string())
        .chain(references.iter().map(|r| r.as_ref().to_string()))
        .collect()
}

pub fn bertscore_f1<S: Scalar, R: AsRef<str>>(
    candidate: &str,
    references: &[R],
    gateway: &Gateway,
) -> Result<S, SemanticError> {
    if references.is_empty() {
        return Err(SemanticError::NoReferences);
    }
    let emb = gateway.embed(&texts(candidate, references), Granularity::Token)?;
    let groups: Vec<Vec<Vec<S>>> = emb
        .per_text()
        .iter()
        .map(|g| g.iter().map(|v| from_wire(v)).collect())
        .collect();
    let refs: Vec<&[Vec<S>]> = groups[1..].iter().map(Vec::as_slice).collect();
    bertscore_from_vectors(&groups[0], &refs)
}

pub fn sbert_cosine<S: Scalar, R: AsRef<str>>(
    candidate: &str,
    references: &[R],
    gateway: &Gateway,
) -> Result<S, SemanticError> {
    if references.is_empty() {
        return Err(SemanticError::NoReferences);
    }
    let emb = gateway.embed(&texts(candidate, references), Granularity::Sentence)?;
    let vecs: Vec<Vec<S>> = emb.vectors.iter().map(|v| from_wire(v)).collect();
    sbert_from_vectors(&vecs[0], &vecs[1..])
}
