//! Deterministic in-process backend.
//!
//! Definition (kept stable so fixtures stay portable):
//! * tokenizer: [`crate::text::tokenize`] (whitespace split, punctuation as
//!   separate tokens); lookups are lowercased;
//! * vocabulary: [`vocabulary`], 1,000 fixed words, plus an `<unk>` bucket
//!   that absorbs every out-of-vocabulary token;
//! * next-token distribution: for a context hash `h` (seeded fold of
//!   [`fnv1a`](crate::text::fnv1a) token hashes through
//!   [`mix64`](crate::text::mix64)), key `k` gets weight
//!   `1 + 15 * u(mix64(h ^ fnv1a(k)))` with `u` uniform in `[0, 1)`,
//!   normalized over vocabulary plus `<unk>`;
//! * masked distribution: the same construction keyed on the left and
//!   right context of the masked slot;
//! * completion: greedy argmax at temperature 0, otherwise seeded nucleus
//!   sampling;
//! * embeddings: feature hashing into [`EMBED_DIM`] dimensions, see
//!   [`token_embedding`].

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    Candidate, Choice, CompletionRequest, CompletionResponse, EmbedRequest, EmbedResponse,
    FillMaskRequest, FillMaskResponse, GatewayError, Granularity, LanguageModel, TokenLogProbs,
};
use crate::corpus::Task;
use crate::text::{self, fnv1a, mix64};

pub const VOCAB_SIZE: usize = 1000;
pub const EMBED_DIM: usize = 64;
const UNK: &str = "<unk>";
const MLM_SALT: u64 = 0x6d6c_6d5f_7361_6c74;
const SEP: u64 = 0x1e1e_1e1e_1e1e_1e1e;

const COMMON_WORDS: &[&str] = &[
    "the", "a", "an", "is", "are", "was", "he", "she", "it", "they", "we", "you", "i", "his",
    "her", "their", "my", "in", "on", "at", "into", "of", "to", "for", "with", "from", "by", "and",
    "or", "but", "not", "no", "can", "will", "put", "drinks", "eats", "has", "have", "man",
    "woman", "person", "people", "child", "dog", "cat", "home", "place", "house", "fridge", "milk",
    "water", "juice", "apple", "bread", "food", "car", "road", "park", "city", "school", "book",
    "table", "chair", "bed", "door", "window", "shirt", "hat", "ball", "game", "day", "night",
    "morning", "time", "year", "money", "work", "job", "friend", "family", "mother", "father",
    "sun", "moon", "tree", "flower", "river", "sea", "sky", "rain", "snow", "hot", "cold", "big",
    "small", "happy", "sad", "good", "bad", "new", "old", "long", "short", "fast", "slow", "red",
    "blue", "green", "white", "black", "runs", "walks", "sleeps", "reads", "writes", "plays",
    "sings", "works", "goes", "comes", "sees", "makes", "takes", "gives", "uses", "wears", "buys",
    "sells", "likes", "loves", "needs", "wants", "safe", "peace", "love", "shelter", "turkey",
    "peach", "bowl", "elephant", "smiling", ".", ",",
];

/// The fixed mock vocabulary: common words first, then generated
/// consonant-vowel-consonant syllable words, exactly [`VOCAB_SIZE`] entries.
pub fn vocabulary() -> Vec<String> {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gl",
        "pl", "st", "tr",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    const CODAS: &[&str] = &["", "n", "r", "s", "t", "l", "m", "k", "sh", "nd"];
    let mut vocab: Vec<String> = COMMON_WORDS.iter().map(|w| w.to_string()).collect();
    let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
    'outer: for coda in CODAS {
        for onset in ONSETS {
            for vowel in VOWELS {
                if vocab.len() == VOCAB_SIZE {
                    break 'outer;
                }
                let w = format!("{onset}{vowel}{coda}");
                if seen.insert(w.clone()) {
                    vocab.push(w);
                }
            }
        }
    }
    assert_eq!(vocab.len(), VOCAB_SIZE);
    vocab
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn fold(h: u64, tok: &str) -> u64 {
    mix64(h ^ fnv1a(tok.to_lowercase().as_bytes()))
}

fn shared_vocabulary() -> &'static [String] {
    static VOCAB: OnceLock<Vec<String>> = OnceLock::new();
    VOCAB.get_or_init(vocabulary)
}

/// Autoregressive scorer: `P(token | context)`.
pub trait CausalLm: Send + Sync {
    fn prob(&self, context: &[String], token: &str) -> f64;
    /// Next-token distribution used for completion, any order.
    fn next_distribution(&self, context: &[String]) -> Vec<(&str, f64)>;
}

/// Masked scorer: distribution for the slot at `position`.
pub trait MaskedLm: Send + Sync {
    fn prob(&self, tokens: &[String], position: usize, token: &str) -> f64;
    fn distribution(&self, tokens: &[String], position: usize) -> Vec<(&str, f64)>;
}

pub trait Classifier: Send + Sync {
    fn prob(&self, text: &str, task: Task) -> f64;
}

/// The default hash language model (both causal and masked).
pub struct HashLm {
    seed: u64,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    key_hash: Vec<u64>,
}

impl HashLm {
    pub fn new(seed: u64) -> Self {
        let vocab = vocabulary();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let key_hash = vocab
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(UNK))
            .map(|k| fnv1a(k.as_bytes()))
            .collect();
        HashLm {
            seed,
            vocab,
            index,
            key_hash,
        }
    }

    fn key_index(&self, token: &str) -> usize {
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(self.vocab.len())
    }

    fn weights(&self, h: u64) -> Vec<f64> {
        self.key_hash
            .iter()
            .map(|&k| 1.0 + 15.0 * unit(mix64(h ^ k)))
            .collect()
    }

    fn causal_hash(&self, context: &[String]) -> u64 {
        context.iter().fold(mix64(self.seed), |h, t| fold(h, t))
    }

    fn masked_hash(&self, tokens: &[String], position: usize) -> u64 {
        let mut h = mix64(self.seed ^ MLM_SALT);
        for t in &tokens[..position] {
            h = fold(h, t);
        }
        h = mix64(h ^ SEP);
        for t in &tokens[position + 1..] {
            h = fold(h, t);
        }
        h
    }

    fn prob_at(&self, h: u64, token: &str) -> f64 {
        let w = self.weights(h);
        let z: f64 = w.iter().sum();
        w[self.key_index(token)] / z
    }

    fn dist_at(&self, h: u64) -> Vec<(&str, f64)> {
        let w = self.weights(h);
        let z: f64 = w.iter().sum();
        self.vocab
            .iter()
            .zip(&w)
            .map(|(t, &wi)| (t.as_str(), wi / z))
            .collect()
    }
}

impl CausalLm for HashLm {
    fn prob(&self, context: &[String], token: &str) -> f64 {
        self.prob_at(self.causal_hash(context), token)
    }

    fn next_distribution(&self, context: &[String]) -> Vec<(&str, f64)> {
        self.dist_at(self.causal_hash(context))
    }
}

impl MaskedLm for HashLm {
    fn prob(&self, tokens: &[String], position: usize, token: &str) -> f64 {
        self.prob_at(self.masked_hash(tokens, position), token)
    }

    fn distribution(&self, tokens: &[String], position: usize) -> Vec<(&str, f64)> {
        self.dist_at(self.masked_hash(tokens, position))
    }
}

/// Assigns the same probability to every token.
pub struct ConstantLm(pub f64);

impl CausalLm for ConstantLm {
    fn prob(&self, _context: &[String], _token: &str) -> f64 {
        self.0
    }

    fn next_distribution(&self, _context: &[String]) -> Vec<(&str, f64)> {
        let p = 1.0 / VOCAB_SIZE as f64;
        shared_vocabulary()
            .iter()
            .map(|w| (w.as_str(), p))
            .collect()
    }
}

/// Position-wise target model: the token at position `i` scores `hit` when
/// it equals `target[i]` (case-insensitive), `miss` otherwise.
pub struct TargetLm {
    pub target: Vec<String>,
    pub hit: f64,
    pub miss: f64,
}

impl CausalLm for TargetLm {
    fn prob(&self, context: &[String], token: &str) -> f64 {
        match self.target.get(context.len()) {
            Some(t) if t.eq_ignore_ascii_case(token) => self.hit,
            _ => self.miss,
        }
    }

    fn next_distribution(&self, context: &[String]) -> Vec<(&str, f64)> {
        self.target
            .get(context.len())
            .map(|t| vec![(t.as_str(), self.hit)])
            .unwrap_or_default()
    }
}

/// Uniform masked model over the first `size` vocabulary words; every
/// token, in-vocabulary or not, has probability `1 / size`.
pub struct UniformMlm {
    size: usize,
    words: Vec<String>,
}

impl UniformMlm {
    pub fn new(size: usize) -> Self {
        assert!((1..=VOCAB_SIZE).contains(&size));
        let words = vocabulary().into_iter().take(size).collect();
        UniformMlm { size, words }
    }
}

impl MaskedLm for UniformMlm {
    fn prob(&self, _tokens: &[String], _position: usize, _token: &str) -> f64 {
        1.0 / self.size as f64
    }

    fn distribution(&self, _tokens: &[String], _position: usize) -> Vec<(&str, f64)> {
        let p = 1.0 / self.size as f64;
        self.words.iter().map(|w| (w.as_str(), p)).collect()
    }
}

/// Context-free masked model: a fixed candidate table, with per-token
/// overrides and a default probability for lookups of unlisted tokens.
pub struct TableMlm {
    pub candidates: Vec<(String, f64)>,
    pub overrides: HashMap<String, f64>,
    pub default_prob: f64,
}

impl TableMlm {
    pub fn new(candidates: Vec<(&str, f64)>, default_prob: f64) -> Self {
        TableMlm {
            candidates: candidates
                .into_iter()
                .map(|(t, p)| (t.to_string(), p))
                .collect(),
            overrides: HashMap::new(),
            default_prob,
        }
    }

    pub fn with_override(mut self, token: &str, prob: f64) -> Self {
        self.overrides.insert(token.to_string(), prob);
        self
    }
}

impl MaskedLm for TableMlm {
    fn prob(&self, _tokens: &[String], _position: usize, token: &str) -> f64 {
        if let Some(&p) = self.overrides.get(token) {
            return p;
        }
        self.candidates
            .iter()
            .find(|(t, _)| t == token)
            .map_or(self.default_prob, |(_, p)| *p)
    }

    fn distribution(&self, _tokens: &[String], _position: usize) -> Vec<(&str, f64)> {
        self.candidates
            .iter()
            .map(|(t, p)| (t.as_str(), *p))
            .collect()
    }
}

/// `1.0` when the text has an even number of tokens, else `0.0`.
pub struct EvenTokenCount;

impl Classifier for EvenTokenCount {
    fn prob(&self, text: &str, _task: Task) -> f64 {
        if text::tokenize(text).len().is_multiple_of(2) {
            1.0
        } else {
            0.0
        }
    }
}

/// Classifier backed by a closure.
pub struct FnClassifier<F>(pub F);

impl<F> Classifier for FnClassifier<F>
where
    F: Fn(&str, Task) -> f64 + Send + Sync,
{
    fn prob(&self, text: &str, task: Task) -> f64 {
        (self.0)(text, task)
    }
}

type CompletionFn = dyn Fn(&CompletionRequest, usize) -> String + Send + Sync;

/// Feature-hashed token vector: features are the lowercased word and its
/// boundary-marked character trigrams; each feature adds `±1` at
/// `hash % EMBED_DIM` (sign from bit 32 of the hash). L2-normalized.
pub fn token_embedding(token: &str) -> Vec<f64> {
    let lower = token.to_lowercase();
    let mut v = vec![0.0; EMBED_DIM];
    let mut add = |feature: &str| {
        let h = mix64(fnv1a(feature.as_bytes()));
        let sign = if (h >> 32) & 1 == 1 { 1.0 } else { -1.0 };
        v[(h % EMBED_DIM as u64) as usize] += sign;
    };
    add(&format!("w:{lower}"));
    let marked: Vec<char> = format!("<{lower}>").chars().collect();
    for tri in marked.windows(3) {
        add(&format!("c:{}", tri.iter().collect::<String>()));
    }
    normalize(v)
}

/// Sum of token vectors, L2-normalized; the zero vector for empty text.
pub fn sentence_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    for tok in text::tokenize(text) {
        for (acc, x) in v.iter_mut().zip(token_embedding(&tok)) {
            *acc += x;
        }
    }
    normalize(v)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// The mock backend, assembled from pluggable component models.
#[derive(Clone)]
pub struct MockBackend {
    seed: u64,
    causal: Arc<dyn CausalLm>,
    masked: Arc<dyn MaskedLm>,
    classifier: Option<Arc<dyn Classifier>>,
    completion_fn: Option<Arc<CompletionFn>>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        let lm = Arc::new(HashLm::new(seed));
        MockBackend {
            seed,
            causal: lm.clone(),
            masked: lm,
            classifier: None,
            completion_fn: None,
        }
    }

    pub fn with_causal(mut self, lm: Arc<dyn CausalLm>) -> Self {
        self.causal = lm;
        self
    }

    pub fn with_masked(mut self, lm: Arc<dyn MaskedLm>) -> Self {
        self.masked = lm;
        self
    }

    pub fn with_classifier(mut self, c: Arc<dyn Classifier>) -> Self {
        self.classifier = Some(c);
        self
    }

    /// Replaces generation with a scripted function of the request and the
    /// sample index.
    pub fn with_completion_fn<F>(mut self, f: F) -> Self
    where
        F: Fn(&CompletionRequest, usize) -> String + Send + Sync + 'static,
    {
        self.completion_fn = Some(Arc::new(f));
        self
    }

    fn generate(&self, req: &CompletionRequest, sample: usize) -> String {
        let mut context: Vec<String> = text::tokenize(&req.prompt);
        let start = context.len();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix64(req.seed ^ (sample as u64).wrapping_mul(0x9e37)));
        for _ in 0..req.max_tokens {
            let dist = self.causal.next_distribution(&context);
            let next = if req.is_greedy() {
                argmax(&dist)
            } else {
                nucleus_sample(&dist, req.temperature, req.top_p, &mut rng)
            };
            match next {
                Some(tok) => context.push(tok),
                None => break,
            }
        }
        text::detokenize(&context[start..])
    }
}

fn argmax(dist: &[(&str, f64)]) -> Option<String> {
    let mut best: Option<&(&str, f64)> = None;
    for entry in dist {
        if best.is_none_or(|b| entry.1 > b.1) {
            best = Some(entry);
        }
    }
    best.map(|(t, _)| t.to_string())
}

fn nucleus_sample(
    dist: &[(&str, f64)],
    temperature: f64,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    if dist.is_empty() {
        return None;
    }
    let mut scaled: Vec<(usize, f64)> = dist
        .iter()
        .enumerate()
        .map(|(i, (_, p))| (i, p.max(1e-300).powf(1.0 / temperature)))
        .collect();
    let z: f64 = scaled.iter().map(|(_, w)| w).sum();
    scaled.iter_mut().for_each(|(_, w)| *w /= z);
    scaled.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for (i, w) in scaled {
        kept.push((i, w));
        mass += w;
        if mass >= top_p {
            break;
        }
    }
    let mut r = rng.gen::<f64>() * mass;
    for &(i, w) in &kept {
        if r < w {
            return Some(dist[i].0.to_string());
        }
        r -= w;
    }
    kept.last().map(|&(i, _)| dist[i].0.to_string())
}

impl LanguageModel for MockBackend {
    fn identity(&self) -> String {
        format!("mock(seed={})", self.seed)
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        req.validate()?;
        let choices = (0..req.n_samples)
            .map(|i| Choice {
                text: match &self.completion_fn {
                    Some(f) => f(req, i),
                    None => self.generate(req, if req.is_greedy() { 0 } else { i }),
                },
            })
            .collect();
        Ok(CompletionResponse { choices })
    }

    fn score(&self, text: &str) -> Result<TokenLogProbs, GatewayError> {
        let tokens = text::tokenize(text);
        if tokens.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let logprobs = (0..tokens.len())
            .map(|i| self.causal.prob(&tokens[..i], &tokens[i]).ln())
            .collect();
        Ok(TokenLogProbs { tokens, logprobs })
    }

    fn fill_mask(&self, req: &FillMaskRequest) -> Result<FillMaskResponse, GatewayError> {
        if req.position >= req.tokens.len() {
            return Err(GatewayError::PositionOutOfRange {
                position: req.position,
                len: req.tokens.len(),
            });
        }
        if req.top_k == 0 {
            return Err(GatewayError::InvalidRequest("top_k must be >= 1".into()));
        }
        let mut dist: Vec<(usize, &str, f64)> = self
            .masked
            .distribution(&req.tokens, req.position)
            .into_iter()
            .enumerate()
            .filter(|(_, (_, p))| *p > 0.0)
            .map(|(i, (t, p))| (i, t, p))
            .collect();
        let order = |a: &(usize, &str, f64), b: &(usize, &str, f64)| {
            b.2.total_cmp(&a.2).then(a.0.cmp(&b.0))
        };
        if req.top_k < dist.len() {
            dist.select_nth_unstable_by(req.top_k, order);
            dist.truncate(req.top_k);
        }
        dist.sort_by(order);
        let candidates = dist
            .into_iter()
            .take(req.top_k)
            .map(|(_, token, prob)| Candidate {
                token: token.to_string(),
                prob,
            })
            .collect();
        let target_probs = req
            .targets
            .iter()
            .map(|t| self.masked.prob(&req.tokens, req.position, t))
            .collect();
        Ok(FillMaskResponse {
            candidates,
            target_probs,
        })
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, GatewayError> {
        if req.texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        Ok(match req.granularity {
            Granularity::Sentence => EmbedResponse {
                vectors: req.texts.iter().map(|t| sentence_embedding(t)).collect(),
                counts: None,
            },
            Granularity::Token => {
                let mut vectors = Vec::new();
                let mut counts = Vec::with_capacity(req.texts.len());
                for t in &req.texts {
                    let toks = text::tokenize(t);
                    counts.push(toks.len());
                    vectors.extend(toks.iter().map(|tok| token_embedding(tok)));
                }
                EmbedResponse {
                    vectors,
                    counts: Some(counts),
                }
            }
        })
    }

    fn classify(&self, text: &str, task: Task) -> Result<f64, GatewayError> {
        match &self.classifier {
            Some(c) => Ok(c.prob(text, task)),
            None => Err(GatewayError::CapabilityNotConfigured("classify".into())),
        }
    }
}
