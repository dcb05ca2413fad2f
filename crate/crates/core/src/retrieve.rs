//! Hint sources for the retrieval and random baselines: Okapi BM25 and
//! embedding nearest neighbours over the knowledge corpus, plus a uniform
//! draw of a human-written correct statement.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStats, Doc, KnowledgeCorpus, StatementPair};
use crate::gateway::{Gateway, GatewayError, Granularity};
use crate::scalar::{cosine, Scalar};
use crate::text;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
/// Texts per embedding request while indexing.
pub const EMBED_BATCH: usize = 256;
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error("knowledge corpus is empty")]
    EmptyCorpus,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("no pairs to draw from")]
    EmptyPairs,
    #[error("embedding retrieval needs an embedding index")]
    MissingEmbeddings,
    #[error("index cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMethod {
    Bm25,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub method: RetrievalMethod,
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params<S> {
    pub k1: S,
    pub b: S,
}

impl<S: Scalar> Default for Bm25Params<S> {
    fn default() -> Self {
        Bm25Params {
            k1: S::lit(DEFAULT_K1),
            b: S::lit(DEFAULT_B),
        }
    }
}

/// `ln((N - df + 0.5) / (df + 0.5) + 1)`; always positive.
pub fn idf<S: Scalar>(n_docs: usize, df: usize) -> S {
    let half = S::lit(0.5);
    let n = S::from_count(n_docs);
    let df = S::from_count(df);
    ((n - df + half) / (df + half) + S::one()).ln()
}

/// Okapi BM25 of `doc` for `query_terms`. Every query term occurrence
/// contributes, so a repeated query term counts repeatedly; unknown terms
/// contribute nothing.
pub fn bm25_score<S: Scalar>(
    query_terms: &[String],
    doc: &Doc,
    stats: &CorpusStats,
    k1: S,
    b: S,
) -> S {
    let terms = text::terms(&doc.text);
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in &terms {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    score_with_tf(query_terms, &tf, terms.len(), stats, k1, b)
}

fn score_with_tf<S: Scalar>(
    query_terms: &[String],
    tf: &HashMap<&str, usize>,
    doc_len: usize,
    stats: &CorpusStats,
    k1: S,
    b: S,
) -> S {
    let n = stats.n_docs();
    let avg = S::lit(stats.avg_len);
    let len_norm = if avg > S::zero() {
        S::from_count(doc_len) / avg
    } else {
        S::one()
    };
    let mut score = S::zero();
    for q in query_terms {
        let f = match tf.get(q.as_str()) {
            Some(&f) if f > 0 => S::from_count(f),
            _ => continue,
        };
        let df = stats.df(q);
        if df == 0 {
            continue;
        }
        let denom = f + k1 * (S::one() - b + b * len_norm);
        score = score + idf::<S>(n, df) * f * (k1 + S::one()) / denom;
    }
    score
}

/// Sorts by descending score, ties by ascending doc id, drops repeated
/// normalized texts and cuts at `k`.
fn rank(mut scored: Vec<(usize, f64)>, docs: &[Doc], k: usize) -> Vec<Hit> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut seen = HashSet::new();
    let mut hits = Vec::with_capacity(k);
    for (id, score) in scored {
        if hits.len() == k {
            break;
        }
        if seen.insert(text::normalize(&docs[id].text)) {
            hits.push(Hit {
                doc_id: docs[id].id,
                text: docs[id].text.clone(),
                score,
            });
        }
    }
    hits
}

/// Inverted index for BM25 over a fixed corpus.
pub struct Bm25Index<'a> {
    corpus: &'a KnowledgeCorpus,
    postings: HashMap<String, Vec<(usize, usize)>>,
    params: Bm25Params<f64>,
}

impl<'a> Bm25Index<'a> {
    pub fn new(corpus: &'a KnowledgeCorpus, params: Bm25Params<f64>) -> Self {
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (pos, doc) in corpus.docs.iter().enumerate() {
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in text::terms(&doc.text) {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((pos, f));
            }
        }
        Bm25Index {
            corpus,
            postings,
            params,
        }
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<Hit>, RetrieveError> {
        if self.corpus.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        if k == 0 {
            return Err(RetrieveError::ZeroK);
        }
        let q = text::terms(query);
        let mut tfs: HashMap<usize, HashMap<&str, usize>> = HashMap::new();
        for term in &q {
            if let Some(list) = self.postings.get(term) {
                for &(pos, f) in list {
                    tfs.entry(pos).or_default().insert(term.as_str(), f);
                }
            }
        }
        // zero-scoring documents only matter when fewer than k match
        let mut scored: Vec<(usize, f64)> = tfs
            .iter()
            .map(|(&pos, tf)| {
                let s = score_with_tf(
                    &q,
                    tf,
                    self.corpus.stats.doc_len[pos],
                    &self.corpus.stats,
                    self.params.k1,
                    self.params.b,
                );
                (pos, s)
            })
            .collect();
        let matched: HashSet<usize> = tfs.keys().copied().collect();
        let mut hits = rank(scored.clone(), &self.corpus.docs, k);
        if hits.len() < k {
            scored.extend(
                (0..self.corpus.len())
                    .filter(|p| !matched.contains(p))
                    .map(|p| (p, 0.0)),
            );
            hits = rank(scored, &self.corpus.docs, k);
        }
        Ok(hits)
    }
}

/// Sentence vectors for every corpus document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub corpus_hash: String,
    pub backend: String,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn build(corpus: &KnowledgeCorpus, gateway: &Gateway) -> Result<Self, RetrieveError> {
        if corpus.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        let texts: Vec<String> = corpus.docs.iter().map(|d| d.text.clone()).collect();
        let mut vectors = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_BATCH) {
            vectors.extend(gateway.embed(chunk, Granularity::Sentence)?.vectors);
        }
        Ok(EmbeddingIndex {
            corpus_hash: corpus.content_hash(),
            backend: gateway.identity(),
            vectors,
        })
    }

    pub fn search(
        &self,
        query: &str,
        corpus: &KnowledgeCorpus,
        k: usize,
        gateway: &Gateway,
    ) -> Result<Vec<Hit>, RetrieveError> {
        if corpus.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        if k == 0 {
            return Err(RetrieveError::ZeroK);
        }
        let q = gateway.embed(&[query.to_string()], Granularity::Sentence)?;
        let qv = &q.vectors[0];
        let scored = self
            .vectors
            .iter()
            .enumerate()
            .map(|(pos, v)| (pos, cosine(qv, v)))
            .collect();
        Ok(rank(scored, &corpus.docs, k))
    }
}

/// On-disk index cache: a versioned JSON document holding the corpus hash,
/// the BM25 statistics and, once computed, the sentence vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexCache {
    pub version: u32,
    pub corpus_hash: String,
    pub stats: CorpusStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingIndex>,
}

impl IndexCache {
    pub fn new(corpus: &KnowledgeCorpus) -> Self {
        IndexCache {
            version: CACHE_VERSION,
            corpus_hash: corpus.content_hash(),
            stats: corpus.stats.clone(),
            embeddings: None,
        }
    }

    /// Loads the cache if it matches `corpus`, otherwise starts afresh.
    pub fn load_or_new(path: &Path, corpus: &KnowledgeCorpus) -> Result<Self, RetrieveError> {
        let hash = corpus.content_hash();
        match std::fs::read_to_string(path) {
            Ok(s) => {
                let cache: IndexCache =
                    serde_json::from_str(&s).map_err(|e| RetrieveError::Cache {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                if cache.version == CACHE_VERSION && cache.corpus_hash == hash {
                    return Ok(cache);
                }
                log::info!("{}: stale index cache, rebuilding", path.display());
                Ok(Self::new(corpus))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new(corpus)),
            Err(e) => Err(RetrieveError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
        }
    }

    /// Returns the cached embeddings, computing them when absent or built
    /// by another backend.
    pub fn embeddings(
        &mut self,
        corpus: &KnowledgeCorpus,
        gateway: &Gateway,
    ) -> Result<&EmbeddingIndex, RetrieveError> {
        let fresh = matches!(&self.embeddings, Some(e) if e.backend == gateway.identity());
        if !fresh {
            self.embeddings = Some(EmbeddingIndex::build(corpus, gateway)?);
        }
        Ok(self.embeddings.as_ref().expect("just built"))
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrieveError> {
        let err = |message: String| RetrieveError::Cache {
            path: path.display().to_string(),
            message,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
        }
        let s = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| err(e.to_string()))
    }
}

/// BM25 or embedding top-k. Embedding retrieval needs `embeddings` and
/// `gateway`.
pub fn retrieve_topk(
    query_id: &str,
    query: &str,
    corpus: &KnowledgeCorpus,
    k: usize,
    method: RetrievalMethod,
    embeddings: Option<(&EmbeddingIndex, &Gateway)>,
) -> Result<RetrievalResult, RetrieveError> {
    let hits = match method {
        RetrievalMethod::Bm25 => Bm25Index::new(corpus, Bm25Params::default()).search(query, k)?,
        RetrievalMethod::Embed => {
            let (index, gateway) = embeddings.ok_or(RetrieveError::MissingEmbeddings)?;
            index.search(query, corpus, k, gateway)?
        }
    };
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        method,
        hits,
    })
}

/// Uniform draw of one pair's correct statement.
pub fn random_correct(pairs: &[StatementPair], seed: u64) -> Result<String, RetrieveError> {
    if pairs.is_empty() {
        return Err(RetrieveError::EmptyPairs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pairs[rng.gen_range(0..pairs.len())].correct.clone())
}
