//! Tokenization, normalization and stable hashing helpers.
//!
//! Two tokenizers are used across the crate:
//! * [`tokenize`] keeps punctuation as single-character tokens. It is the
//!   reference tokenizer of the mock backend and the client-side prompt
//!   length estimator.
//! * [`terms`] lowercases and drops punctuation. It feeds BM25 and the
//!   overlap metrics.

use sha2::{Digest, Sha256};

/// Placeholder token handed to masked-LM backends.
pub const MASK_TOKEN: &str = "[MASK]";

/// Splits on whitespace and punctuation; punctuation characters are kept as
/// their own tokens, alphanumeric runs form words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Lowercased alphanumeric runs.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercase and collapse internal whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | "!" | "?" | ";" | ":" | ")" | "'" | "%")
}

/// Inverse of [`tokenize`] up to whitespace: tokens are space-joined except
/// that closing punctuation attaches to the preceding token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if i > 0 && !attaches_left(tok) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Drops trailing whitespace and terminal periods.
pub fn strip_terminal_period(text: &str) -> &str {
    text.trim_end().trim_end_matches('.').trim_end()
}

/// Lowercases the first character only.
pub fn decapitalize(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Short prompt fingerprint attached to gateway errors and records.
pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt)[..16].to_string()
}

/// Derives a sub-seed from a master seed and a stable label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// 64-bit FNV-1a, stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
