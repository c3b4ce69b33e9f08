//! Medical-necessity determinations against payer and NCCN checklists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::code::{Code, Scalar};
use crate::criteria::{evaluate, explain, GuidelineRule, RuleTrace, Verdict, World};
use crate::patient::PatientSnapshot;

/// Payer id used for NCCN guidelines, the last lookup fallback.
pub const NCCN: &str = "nccn";

/// A guideline's intervention key: one code, or every code in a namespace
/// (`cpt:*`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InterventionKey {
    Exact(Code),
    Class(String),
}

impl fmt::Display for InterventionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterventionKey::Exact(c) => write!(f, "{c}"),
            InterventionKey::Class(ns) => write!(f, "{ns}:*"),
        }
    }
}

impl FromStr for InterventionKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.strip_suffix(":*") {
            Some(ns) if crate::code::is_namespace(ns) => Ok(InterventionKey::Class(ns.to_owned())),
            Some(_) => Err(format!("invalid code class `{s}`")),
            None => s.parse().map(InterventionKey::Exact).map_err(|e| e.to_string()),
        }
    }
}

impl Serialize for InterventionKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InterventionKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guideline {
    pub id: String,
    pub payer: String,
    pub title: String,
    pub intervention_codes: Vec<InterventionKey>,
    pub rule: GuidelineRule,
    #[serde(default)]
    pub source_text: String,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate guideline id `{0}`")]
    DuplicateId(String),
    #[error("guidelines `{first}` and `{second}` both cover ({payer}, {key})")]
    DuplicateKey { payer: String, key: String, first: String, second: String },
    #[error("guideline `{0}` has no intervention codes")]
    NoInterventionCodes(String),
    #[error("guideline `{id}`: {message}")]
    InvalidRule { id: String, message: String },
}

/// Guidelines indexed by (payer, intervention key).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuidelineRegistry {
    guidelines: Vec<Guideline>,
    index: BTreeMap<(String, InterventionKey), usize>,
}

impl GuidelineRegistry {
    pub fn new(guidelines: Vec<Guideline>) -> Result<Self, RegistryError> {
        let mut index = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for (i, g) in guidelines.iter().enumerate() {
            if !ids.insert(g.id.as_str()) {
                return Err(RegistryError::DuplicateId(g.id.clone()));
            }
            if g.intervention_codes.is_empty() {
                return Err(RegistryError::NoInterventionCodes(g.id.clone()));
            }
            g.rule
                .validate()
                .map_err(|e| RegistryError::InvalidRule { id: g.id.clone(), message: e.to_string() })?;
            for key in &g.intervention_codes {
                if let Some(prev) = index.insert((g.payer.clone(), key.clone()), i) {
                    return Err(RegistryError::DuplicateKey {
                        payer: g.payer.clone(),
                        key: key.to_string(),
                        first: guidelines[prev].id.clone(),
                        second: g.id.clone(),
                    });
                }
            }
        }
        Ok(GuidelineRegistry { guidelines, index })
    }

    pub fn guidelines(&self) -> &[Guideline] {
        &self.guidelines
    }

    pub fn get(&self, id: &str) -> Option<&Guideline> {
        self.guidelines.iter().find(|g| g.id == id)
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    fn exact(&self, payer: &str, key: InterventionKey) -> Option<&Guideline> {
        self.index.get(&(payer.to_owned(), key)).map(|&i| &self.guidelines[i])
    }
}

impl Serialize for GuidelineRegistry {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.guidelines.serialize(serializer)
    }
}

/// Parses a registry document (a JSON list of guidelines).
pub fn load_registry(document: &str) -> Result<GuidelineRegistry, RegistryError> {
    let guidelines: Vec<Guideline> = serde_json::from_str(document)?;
    GuidelineRegistry::new(guidelines)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NecessityError {
    #[error("no guideline found for payer `{payer}` and code `{code}`")]
    NoGuideline { payer: String, code: Code },
}

/// Most specific guideline wins: (payer, code), then (payer, namespace),
/// then (nccn, code).
pub fn lookup_guideline<'r>(
    registry: &'r GuidelineRegistry,
    payer: &str,
    code: &Code,
) -> Result<&'r Guideline, NecessityError> {
    registry
        .exact(payer, InterventionKey::Exact(code.clone()))
        .or_else(|| registry.exact(payer, InterventionKey::Class(code.namespace().to_owned())))
        .or_else(|| registry.exact(NCCN, InterventionKey::Exact(code.clone())))
        .ok_or_else(|| NecessityError::NoGuideline { payer: payer.to_owned(), code: code.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Approved,
    Denied,
    InsufficientInformation,
}

impl Status {
    pub fn from_verdict(v: Verdict) -> Status {
        match v {
            Verdict::Met => Status::Approved,
            Verdict::NotMet => Status::Denied,
            Verdict::Unknown => Status::InsufficientInformation,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Approved => "APPROVED",
            Status::Denied => "DENIED",
            Status::InsufficientInformation => "INSUFFICIENT_INFORMATION",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Determination {
    pub intervention_code: Code,
    pub payer_id: String,
    pub guideline_id: String,
    pub status: Status,
    pub trace: RuleTrace,
    pub missing_codes: BTreeSet<Code>,
    pub reasoning: Vec<String>,
}

/// Evaluates the applicable guideline for `code` against the snapshot.
pub fn determine(
    registry: &GuidelineRegistry,
    payer: &str,
    code: &Code,
    snapshot: &PatientSnapshot,
    world: World,
) -> Result<Determination, NecessityError> {
    let guideline = lookup_guideline(registry, payer, code)?;
    let (verdict, trace) = evaluate(&guideline.rule, snapshot, world);
    let status = Status::from_verdict(verdict);
    let missing_codes: BTreeSet<Code> = trace.unknown_codes().into_iter().collect();

    let mut reasoning = vec![format!(
        "{code} for payer {payer}: guideline {} ({}) \"{}\"",
        guideline.id, guideline.payer, guideline.title
    )];
    reasoning.extend(
        guideline.source_text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| format!("source: {l}")),
    );
    reasoning.extend(explain(&trace));
    if !missing_codes.is_empty() {
        let list: Vec<String> = missing_codes.iter().map(Code::to_string).collect();
        reasoning.push(format!("missing data: {}", list.join(", ")));
    }
    reasoning.push(format!("status: {status}"));

    Ok(Determination {
        intervention_code: code.clone(),
        payer_id: payer.to_owned(),
        guideline_id: guideline.id.clone(),
        status,
        trace,
        missing_codes,
        reasoning,
    })
}

/// One batch result: a determination, or the lookup failure for that code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum BatchEntry {
    Determined(Determination),
    NoGuideline { code: Code, payer_id: String, message: String },
}

impl BatchEntry {
    pub fn determination(&self) -> Option<&Determination> {
        match self {
            BatchEntry::Determined(d) => Some(d),
            BatchEntry::NoGuideline { .. } => None,
        }
    }

    pub fn status(&self) -> Option<Status> {
        self.determination().map(|d| d.status)
    }
}

/// `determine` over each code, in input order, with lookup failures embedded.
pub fn simulate_batch(
    registry: &GuidelineRegistry,
    payer: &str,
    codes: &[Code],
    snapshot: &PatientSnapshot,
    world: World,
) -> Vec<BatchEntry> {
    codes
        .iter()
        .map(|code| match determine(registry, payer, code, snapshot, world) {
            Ok(d) => BatchEntry::Determined(d),
            Err(e) => BatchEntry::NoGuideline { code: code.clone(), payer_id: payer.to_owned(), message: e.to_string() },
        })
        .collect()
}

/// A procedure described by modality, body sites and attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureSpec {
    pub modality: String,
    #[serde(default)]
    pub body_sites: BTreeSet<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Scalar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeMapRow {
    pub modality: String,
    #[serde(default)]
    pub body_sites: BTreeSet<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Scalar>,
    pub code: Code,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodeMap {
    pub rows: Vec<CodeMapRow>,
}

pub fn load_code_map(document: &str) -> Result<CodeMap, serde_json::Error> {
    serde_json::from_str(document)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error("procedure spec has an empty modality")]
    EmptyModality,
    #[error("no code matches {0}")]
    NoMatch(String),
    #[error("{spec} matches several codes: {}", .codes.iter().map(Code::to_string).collect::<Vec<_>>().join(", "))]
    Ambiguous { spec: String, codes: Vec<Code> },
}

impl fmt::Display for ProcedureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sites: Vec<&str> = self.body_sites.iter().map(String::as_str).collect();
        write!(f, "{} of {}", self.modality, sites.join("+"))?;
        for (k, v) in &self.attributes {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

fn row_matches(row: &CodeMapRow, spec: &ProcedureSpec) -> bool {
    let sites = |s: &BTreeSet<String>| s.iter().map(|x| x.to_ascii_lowercase()).collect::<BTreeSet<_>>();
    row.modality.eq_ignore_ascii_case(&spec.modality)
        && sites(&row.body_sites) == sites(&spec.body_sites)
        && row.attributes.iter().all(|(k, v)| spec.attributes.get(k) == Some(v))
}

/// The unique table row matching modality, body sites and every attribute
/// the row constrains.
pub fn select_cpt(spec: &ProcedureSpec, table: &CodeMap) -> Result<Code, SelectError> {
    if spec.modality.trim().is_empty() {
        return Err(SelectError::EmptyModality);
    }
    let hits: Vec<Code> = table.rows.iter().filter(|r| row_matches(r, spec)).map(|r| r.code.clone()).collect();
    match hits.len() {
        0 => Err(SelectError::NoMatch(spec.to_string())),
        1 => Ok(hits.into_iter().next().expect("one hit")),
        _ => Err(SelectError::Ambiguous { spec: spec.to_string(), codes: hits }),
    }
}
