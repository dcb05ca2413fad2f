//! Correct instantiations of a false statement, shared by both phase I
//! generators and the hint assembly of phase II.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstantiationMethod {
    Icl,
    Cgmh,
    Human,
    Retrieval,
    Random,
}

impl InstantiationMethod {
    /// Generated methods must never reproduce the source statement.
    pub fn is_generated(self) -> bool {
        matches!(self, InstantiationMethod::Icl | InstantiationMethod::Cgmh)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instantiation {
    pub source_id: String,
    pub method: InstantiationMethod,
    pub sample_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fluency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_prob: Option<f64>,
}

impl Instantiation {
    pub fn new(
        source_id: &str,
        method: InstantiationMethod,
        sample_index: usize,
        text: String,
    ) -> Self {
        Instantiation {
            source_id: source_id.to_string(),
            method,
            sample_index,
            text,
            fluency: None,
            classifier_prob: None,
        }
    }

    pub fn validate(&self, source_incorrect: &str) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err(format!("{}: empty instantiation", self.source_id));
        }
        if self.method.is_generated()
            && text::normalize(&self.text) == text::normalize(source_incorrect)
        {
            return Err(format!(
                "{}: instantiation {} repeats the source statement",
                self.source_id, self.sample_index
            ));
        }
        Ok(())
    }
}

/// Keeps the first occurrence of each text under whitespace/case
/// normalization.
pub fn dedup_normalized(items: Vec<Instantiation>) -> Vec<Instantiation> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|i| seen.insert(text::normalize(&i.text)))
        .collect()
}
