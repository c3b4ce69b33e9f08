//! Free-text note extraction behind a pluggable gateway.
//!
//! The only bundled gateway is [`KeywordGateway`], a deterministic
//! phrase-to-code table. A model-backed gateway would implement
//! [`ExtractionGateway`] the same way.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ClinicalFact, Provenance};
use crate::code::{Code, FactValue};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub date: NaiveDate,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct GatewayError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("extraction failed for note `{note_id}`: {source}")]
pub struct ExtractionError {
    pub note_id: String,
    pub source: GatewayError,
}

pub trait ExtractionGateway: Send + Sync {
    /// Codes (with optional values) mentioned in `text`.
    fn extract(&self, text: &str) -> Result<Vec<(Code, Option<FactValue>)>, GatewayError>;
}

/// Case-insensitive phrase lookup. Each code is emitted once, in table order.
#[derive(Debug, Clone)]
pub struct KeywordGateway {
    table: Vec<(String, Code)>,
}

const PRESENTING_SYMPTOMS: &[(&str, &str)] = &[
    ("bloating", "sx:bloating"),
    ("bloated", "sx:bloating"),
    ("pelvic pain", "sx:pelvic-pain"),
    ("abdominal pain", "sx:pelvic-pain"),
    ("early satiety", "sx:early-satiety"),
    ("feeling full quickly", "sx:early-satiety"),
    ("difficulty eating", "sx:early-satiety"),
    ("urinary", "sx:urinary"),
    ("ascites", "sx:ascites"),
    ("abdominal distention", "sx:abdominal-distention"),
    ("abdominal distension", "sx:abdominal-distention"),
    ("pelvic mass", "exam:pelvic-mass"),
    ("abdominal mass", "exam:pelvic-mass"),
];

impl KeywordGateway {
    pub fn new(table: Vec<(String, Code)>) -> Self {
        KeywordGateway { table: table.into_iter().map(|(k, c)| (k.to_lowercase(), c)).collect() }
    }

    /// Table covering the presenting-symptom vocabulary of the ovarian workup.
    pub fn ovarian_symptoms() -> Self {
        KeywordGateway::new(
            PRESENTING_SYMPTOMS
                .iter()
                .map(|(k, c)| (k.to_string(), c.parse().expect("static table codes are valid")))
                .collect(),
        )
    }

    pub fn table(&self) -> &[(String, Code)] {
        &self.table
    }
}

impl Default for KeywordGateway {
    fn default() -> Self {
        KeywordGateway::ovarian_symptoms()
    }
}

impl ExtractionGateway for KeywordGateway {
    fn extract(&self, text: &str) -> Result<Vec<(Code, Option<FactValue>)>, GatewayError> {
        let lower = text.to_lowercase();
        let mut out: Vec<(Code, Option<FactValue>)> = Vec::new();
        for (phrase, code) in &self.table {
            if lower.contains(phrase.as_str()) && !out.iter().any(|(c, _)| c == code) {
                out.push((code.clone(), None));
            }
        }
        Ok(out)
    }
}

/// Runs `gateway` over a note and stamps the results as extracted facts.
pub fn extract_facts(note: &Note, gateway: &dyn ExtractionGateway) -> Result<Vec<ClinicalFact>, ExtractionError> {
    let found = gateway
        .extract(&note.text)
        .map_err(|source| ExtractionError { note_id: note.id.clone(), source })?;
    Ok(found
        .into_iter()
        .map(|(code, value)| ClinicalFact {
            code,
            value,
            effective_date: note.date,
            provenance: Provenance::Extracted { note: note.id.clone() },
        })
        .collect())
}
