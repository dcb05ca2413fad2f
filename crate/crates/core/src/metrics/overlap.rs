//! Token-overlap metrics over the [`text::terms`] tokenization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::text;

pub const BLEU_MAX_N: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OverlapError {
    #[error("{candidates} candidates but {references} reference lists")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("candidate {0} has no references")]
    NoReferences(usize),
    #[error("no candidates")]
    Empty,
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

/// Sufficient statistics of one candidate for corpus BLEU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped n-gram matches for n = 1..=max_n.
    pub matches: Vec<usize>,
    /// Candidate n-gram counts for n = 1..=max_n.
    pub totals: Vec<usize>,
    pub cand_len: usize,
    /// Length of the reference closest in length (shorter wins ties).
    pub ref_len: usize,
}

impl BleuStats {
    pub fn compute<S: AsRef<str>>(candidate: &str, references: &[S], max_n: usize) -> Self {
        let cand = text::terms(candidate);
        let refs: Vec<Vec<String>> = references.iter().map(|r| text::terms(r.as_ref())).collect();
        let mut matches = Vec::with_capacity(max_n);
        let mut totals = Vec::with_capacity(max_n);
        for n in 1..=max_n {
            let counts = ngrams(&cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            matches.push(
                counts
                    .iter()
                    .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                    .sum(),
            );
            totals.push(counts.values().sum());
        }
        let ref_len = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        BleuStats {
            matches,
            totals,
            cand_len: cand.len(),
            ref_len,
        }
    }
}

/// Corpus BLEU from summed statistics, as a percentage.
///
/// Orders for which the corpus has no candidate n-grams at all (every
/// candidate shorter than n) are left out of the geometric mean; any used
/// order with zero matches gives 0.
pub fn bleu_from_stats<S: Scalar>(stats: &[BleuStats]) -> S {
    let Some(first) = stats.first() else {
        return S::zero();
    };
    let max_n = first.matches.len();
    let mut log_sum = S::zero();
    let mut used = 0usize;
    for n in 0..max_n {
        let m: usize = stats.iter().map(|s| s.matches[n]).sum();
        let t: usize = stats.iter().map(|s| s.totals[n]).sum();
        if t == 0 {
            continue;
        }
        if m == 0 {
            return S::zero();
        }
        log_sum = log_sum + (S::from_count(m) / S::from_count(t)).ln();
        used += 1;
    }
    if used == 0 {
        return S::zero();
    }
    let c: usize = stats.iter().map(|s| s.cand_len).sum();
    let r: usize = stats.iter().map(|s| s.ref_len).sum();
    let bp = if c > r {
        S::one()
    } else {
        (S::one() - S::from_count(r) / S::from_count(c)).exp()
    };
    (S::hundred() * bp * (log_sum / S::from_count(used)).exp()).clamp_to(S::zero(), S::hundred())
}

/// Corpus-level BLEU with multi-reference clipping and closest-reference
/// brevity penalty.
pub fn bleu<S: Scalar, R: AsRef<str>>(
    candidates: &[String],
    references: &[Vec<R>],
    max_n: usize,
) -> Result<S, OverlapError> {
    if candidates.len() != references.len() {
        return Err(OverlapError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(OverlapError::Empty);
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(OverlapError::NoReferences(i));
    }
    let stats: Vec<BleuStats> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| BleuStats::compute(c, r, max_n))
        .collect();
    Ok(bleu_from_stats(&stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores<S> {
    pub rouge1: S,
    pub rouge2: S,
    #[serde(rename = "rougeL")]
    pub rouge_l: S,
}

fn f1<S: Scalar>(overlap: usize, cand_total: usize, ref_total: usize) -> S {
    if overlap == 0 || cand_total == 0 || ref_total == 0 {
        return S::zero();
    }
    let p = S::from_count(overlap) / S::from_count(cand_total);
    let r = S::from_count(overlap) / S::from_count(ref_total);
    S::hundred() * (S::lit(2.0) * p * r / (p + r))
}

fn rouge_n<S: Scalar>(cand: &[String], reference: &[String], n: usize) -> S {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let ct: usize = c.values().sum();
    let rt: usize = r.values().sum();
    if ct == 0 && rt == 0 {
        // neither side is long enough for an n-gram
        return if !cand.is_empty() && cand == reference {
            S::hundred()
        } else {
            S::zero()
        };
    }
    let overlap = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    f1(overlap, ct, rt)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1/2/L F1 percentages, each the maximum over references.
///
/// When neither candidate nor reference has a bigram, ROUGE-2 is 100 for
/// identical token sequences and 0 otherwise.
pub fn rouge<S: Scalar, R: AsRef<str>>(candidate: &str, references: &[R]) -> RougeScores<S> {
    let cand = text::terms(candidate);
    let mut best = RougeScores {
        rouge1: S::zero(),
        rouge2: S::zero(),
        rouge_l: S::zero(),
    };
    for r in references {
        let r = text::terms(r.as_ref());
        best.rouge1 = best.rouge1.max(rouge_n(&cand, &r, 1));
        best.rouge2 = best.rouge2.max(rouge_n(&cand, &r, 2));
        best.rouge_l = best
            .rouge_l
            .max(f1(lcs_len(&cand, &r), cand.len(), r.len()));
    }
    best
}
