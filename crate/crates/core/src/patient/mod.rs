//! Patients as coded facts plus dated clinical events.

mod extract;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::{Code, FactValue, Scalar};

pub use extract::{extract_facts, ExtractionError, ExtractionGateway, GatewayError, KeywordGateway, Note};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    SymptomOnset,
    Encounter,
    Order,
    Result,
    Imaging,
    TreatmentStart,
    TreatmentEnd,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::SymptomOnset,
        EventKind::Encounter,
        EventKind::Order,
        EventKind::Result,
        EventKind::Imaging,
        EventKind::TreatmentStart,
        EventKind::TreatmentEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SymptomOnset => "symptom-onset",
            EventKind::Encounter => "encounter",
            EventKind::Order => "order",
            EventKind::Result => "result",
            EventKind::Imaging => "imaging",
            EventKind::TreatmentStart => "treatment-start",
            EventKind::TreatmentEnd => "treatment-end",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Fulfills,
    FollowsFrom,
    Treats,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventLink {
    pub relation: Relation,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    #[default]
    Asserted,
    DerivedFromEvent { event: String },
    Extracted { note: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFact {
    pub code: Code,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<FactValue>,
    pub effective_date: NaiveDate,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub id: String,
    pub kind: EventKind,
    pub code: Code,
    pub date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<FactValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<EventLink>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, Scalar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
    pub payer_id: String,
    #[serde(default)]
    pub facts: Vec<ClinicalFact>,
    #[serde(default)]
    pub events: Vec<ClinicalEvent>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("patient document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate event id `{0}`")]
    DuplicateEvent(String),
    #[error("event `{event}` links to unknown event `{target}`")]
    DanglingLink { event: String, target: String },
    #[error("event `{event}`: fulfills link to `{target}` {reason}")]
    BadFulfills { event: String, target: String, reason: &'static str },
}

impl RecordError {
    pub fn is_link_integrity(&self) -> bool {
        !matches!(self, RecordError::Parse(_))
    }
}

/// Checks one event's links against the events that precede or include it.
fn check_links<'a>(
    event: &ClinicalEvent,
    lookup: impl Fn(&str) -> Option<&'a ClinicalEvent>,
) -> Result<(), RecordError> {
    for link in &event.links {
        let target = lookup(&link.target).ok_or_else(|| RecordError::DanglingLink {
            event: event.id.clone(),
            target: link.target.clone(),
        })?;
        if link.relation == Relation::Fulfills {
            let bad = |reason| RecordError::BadFulfills {
                event: event.id.clone(),
                target: link.target.clone(),
                reason,
            };
            if !matches!(event.kind, EventKind::Result | EventKind::Imaging) {
                return Err(bad("must originate from a result or imaging event"));
            }
            if target.kind != EventKind::Order {
                return Err(bad("must point to an order"));
            }
            if target.code != event.code {
                return Err(bad("must point to an order with the same code"));
            }
            if target.date > event.date {
                return Err(bad("points to an order dated after the result"));
            }
        }
    }
    Ok(())
}

impl PatientRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        let mut by_id = BTreeMap::new();
        for e in &self.events {
            if by_id.insert(e.id.as_str(), e).is_some() {
                return Err(RecordError::DuplicateEvent(e.id.clone()));
            }
        }
        for e in &self.events {
            check_links(e, |id| by_id.get(id).copied())?;
        }
        Ok(())
    }

    pub fn event(&self, id: &str) -> Option<&ClinicalEvent> {
        self.events.iter().find(|e| e.id == id)
    }

    /// Latest date carried by any fact or event.
    pub fn latest_date(&self) -> Option<NaiveDate> {
        let facts = self.facts.iter().map(|f| f.effective_date);
        let events = self.events.iter().map(|e| e.date);
        facts.chain(events).max()
    }

    /// Canonical JSON form.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("records always serialize")
    }
}

/// Parses and validates a patient document.
pub fn load_record(document: &str) -> Result<PatientRecord, RecordError> {
    let record: PatientRecord = serde_json::from_str(document)?;
    record.validate()?;
    Ok(record)
}

/// Point-in-time view of a record used for criteria evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSnapshot {
    pub record_id: String,
    pub payer_id: String,
    pub as_of: NaiveDate,
    pub demographics: BTreeMap<String, String>,
    pub facts: BTreeMap<Code, ClinicalFact>,
    pub events: Vec<ClinicalEvent>,
}

impl PatientSnapshot {
    pub fn fact(&self, code: &Code) -> Option<&ClinicalFact> {
        self.facts.get(code)
    }

    /// Layers request-scoped facts over the snapshot. Overlay facts replace
    /// any effective fact with the same code; `demo:*` codes set demographics.
    pub fn with_overlay(&self, overlay: &[ClinicalFact]) -> PatientSnapshot {
        let mut out = self.clone();
        for fact in overlay {
            if fact.code.namespace() == "demo" {
                if let Some(v) = &fact.value {
                    out.demographics.insert(fact.code.value().to_owned(), v.to_string());
                }
                continue;
            }
            out.facts.insert(fact.code.clone(), fact.clone());
        }
        out
    }
}

/// Builds the snapshot at `as_of`: the latest fact per code dated on or
/// before `as_of` (later list entries win ties), and events up to `as_of`.
pub fn snapshot_at(record: &PatientRecord, as_of: NaiveDate) -> PatientSnapshot {
    let mut facts: BTreeMap<Code, ClinicalFact> = BTreeMap::new();
    for fact in record.facts.iter().filter(|f| f.effective_date <= as_of) {
        match facts.get(&fact.code) {
            Some(existing) if existing.effective_date > fact.effective_date => {}
            _ => {
                facts.insert(fact.code.clone(), fact.clone());
            }
        }
    }
    PatientSnapshot {
        record_id: record.id.clone(),
        payer_id: record.payer_id.clone(),
        as_of,
        demographics: record.demographics.clone(),
        facts,
        events: record.events.iter().filter(|e| e.date <= as_of).cloned().collect(),
    }
}

/// Returns `record` with `event` appended. Valued result and imaging events
/// also append a derived fact carrying the value.
pub fn apply_event(record: &PatientRecord, event: ClinicalEvent) -> Result<PatientRecord, RecordError> {
    if record.event(&event.id).is_some() {
        return Err(RecordError::DuplicateEvent(event.id));
    }
    check_links(&event, |id| record.event(id))?;
    let mut next = record.clone();
    if matches!(event.kind, EventKind::Result | EventKind::Imaging) {
        if let Some(value) = &event.value {
            next.facts.push(ClinicalFact {
                code: event.code.clone(),
                value: Some(value.clone()),
                effective_date: event.date,
                provenance: Provenance::DerivedFromEvent { event: event.id.clone() },
            });
        }
    }
    next.events.push(event);
    Ok(next)
}

/// Evaluation date used when a caller gives none: the record's latest date,
/// or 1970-01-01 for a record with no dated data.
pub fn default_as_of(record: &PatientRecord) -> NaiveDate {
    record.latest_date().unwrap_or(NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date"))
}

/// A what-if fact: code and optional value, dated when applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayFact {
    pub code: Code,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<FactValue>,
}

impl OverlayFact {
    pub fn at(&self, date: NaiveDate) -> ClinicalFact {
        ClinicalFact { code: self.code.clone(), value: self.value.clone(), effective_date: date, provenance: Provenance::Asserted }
    }
}

/// Codes of every fact in the record, deduplicated.
pub fn fact_codes(record: &PatientRecord) -> BTreeSet<Code> {
    record.facts.iter().map(|f| f.code.clone()).collect()
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn date(day: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 3, 1).unwrap() + chrono::Duration::days(day)
    }

    pub fn fact(code: &str, value: Option<FactValue>, day: i64) -> ClinicalFact {
        ClinicalFact {
            code: code.parse().unwrap(),
            value,
            effective_date: date(day),
            provenance: Provenance::Asserted,
        }
    }

    pub fn event(id: &str, kind: EventKind, code: &str, day: i64) -> ClinicalEvent {
        ClinicalEvent {
            id: id.into(),
            kind,
            code: code.parse().unwrap(),
            date: date(day),
            value: None,
            links: vec![],
            attributes: BTreeMap::new(),
        }
    }

    pub fn record(facts: Vec<ClinicalFact>, events: Vec<ClinicalEvent>) -> PatientRecord {
        PatientRecord {
            id: "p1".into(),
            demographics: BTreeMap::new(),
            payer_id: "anthem".into(),
            facts,
            events,
        }
    }

    pub fn snapshot(demo: &[(&str, &str)], codes: &[&str]) -> PatientSnapshot {
        let mut rec = record(codes.iter().map(|c| fact(c, None, 0)).collect(), vec![]);
        rec.demographics = demo.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        snapshot_at(&rec, date(0))
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    fn ca125(value: f64, day: i64) -> ClinicalFact {
        fact("lab:ca125", Some(FactValue::Number(value)), day)
    }

    fn ca125_value(snap: &PatientSnapshot) -> Option<FactValue> {
        snap.fact(&"lab:ca125".parse().unwrap()).and_then(|f| f.value.clone())
    }

    #[test]
    fn last_write_wins() {
        let rec = record(vec![ca125(30.0, 3), ca125(90.0, 10)], vec![]);
        assert_eq!(ca125_value(&snapshot_at(&rec, date(12))), Some(FactValue::Number(90.0)));
        assert_eq!(ca125_value(&snapshot_at(&rec, date(5))), Some(FactValue::Number(30.0)));
        let before = snapshot_at(&rec, date(1));
        assert!(before.facts.is_empty() && before.events.is_empty());
    }

    #[test]
    fn same_date_tie_goes_to_later_entry() {
        let rec = record(vec![ca125(30.0, 3), ca125(40.0, 3)], vec![]);
        assert_eq!(ca125_value(&snapshot_at(&rec, date(3))), Some(FactValue::Number(40.0)));
        // an older fact listed later does not supersede a newer one
        let rec = record(vec![ca125(90.0, 10), ca125(30.0, 3)], vec![]);
        assert_eq!(ca125_value(&snapshot_at(&rec, date(12))), Some(FactValue::Number(90.0)));
    }

    #[test]
    fn apply_result_derives_fact() {
        let rec = record(vec![], vec![]);
        let mut ev = event("r1", EventKind::Result, "lab:ca125", 10);
        ev.value = Some(FactValue::Number(90.0));
        let next = apply_event(&rec, ev).unwrap();
        assert_eq!(next.events.len(), 1);
        assert_eq!(next.facts.len(), 1);
        assert_eq!(
            next.facts[0].provenance,
            Provenance::DerivedFromEvent { event: "r1".into() }
        );
        assert_eq!(ca125_value(&snapshot_at(&next, date(10))), Some(FactValue::Number(90.0)));
        assert!(rec.events.is_empty(), "input record untouched");
    }

    #[test]
    fn apply_order_adds_no_fact() {
        let rec = record(vec![], vec![]);
        let next = apply_event(&rec, event("o1", EventKind::Order, "lab:ca125", 3)).unwrap();
        assert!(next.facts.is_empty());
    }

    #[test]
    fn apply_rejects_duplicates_and_dangling() {
        let rec = record(vec![], vec![event("o1", EventKind::Order, "lab:ca125", 3)]);
        let dup = apply_event(&rec, event("o1", EventKind::Order, "lab:cbc-lft", 4));
        assert!(matches!(dup, Err(RecordError::DuplicateEvent(id)) if id == "o1"));
        let mut dangling = event("r1", EventKind::Result, "lab:ca125", 5);
        dangling.links.push(EventLink { relation: Relation::Fulfills, target: "nope".into() });
        assert!(matches!(apply_event(&rec, dangling), Err(RecordError::DanglingLink { .. })));
        let mut wrong_code = event("r2", EventKind::Result, "img:tvus", 5);
        wrong_code.links.push(EventLink { relation: Relation::Fulfills, target: "o1".into() });
        assert!(matches!(apply_event(&rec, wrong_code), Err(RecordError::BadFulfills { .. })));
    }

    #[test]
    fn load_validates_links() {
        let doc = r#"{"id":"p","payer_id":"anthem","events":[
            {"id":"r1","kind":"result","code":"lab:ca125","date":"2024-03-05",
             "links":[{"relation":"fulfills","target":"o9"}]}]}"#;
        let err = load_record(doc).unwrap_err();
        assert!(err.is_link_integrity());
        let ok = load_record(r#"{"id":"p","payer_id":"anthem","events":[]}"#).unwrap();
        assert!(ok.events.is_empty());
        assert!(matches!(load_record("{"), Err(RecordError::Parse(_))));
        assert!(load_record(r#"{"id":"p","payer_id":"a","facts":[{"code":"sx:x","effective_date":"2024-02-30"}]}"#).is_err());
    }

    #[test]
    fn overlay_sets_demographics_and_facts() {
        let snap = snapshot(&[], &[]);
        let overlay = vec![
            fact("demo:menopause", Some(FactValue::Label("post".into())), 0),
            fact("exam:pelvic-mass", None, 0),
        ];
        let o = snap.with_overlay(&overlay);
        assert_eq!(o.demographics.get("menopause").map(String::as_str), Some("post"));
        assert!(o.fact(&"exam:pelvic-mass".parse().unwrap()).is_some());
        assert!(snap.facts.is_empty());
    }

    fn arb_fact() -> impl Strategy<Value = ClinicalFact> {
        (0usize..4, 0i64..40, proptest::option::of(0.0f64..200.0)).prop_map(|(c, d, v)| {
            let code = ["lab:ca125", "sx:bloating", "img:tvus", "exam:pelvic-mass"][c];
            fact(code, v.map(FactValue::Number), d)
        })
    }

    proptest! {
        #[test]
        fn later_facts_never_change_snapshot(
            facts in proptest::collection::vec(arb_fact(), 0..12),
            extra in arb_fact(),
            as_of in 0i64..40,
        ) {
            let rec = record(facts, vec![]);
            let before = snapshot_at(&rec, date(as_of));
            let mut later = extra;
            later.effective_date = date(as_of + 1);
            let mut grown = rec.clone();
            grown.facts.push(later);
            prop_assert_eq!(snapshot_at(&grown, date(as_of)), before.clone());
            prop_assert!(before.facts.values().all(|f| f.effective_date <= date(as_of)));
        }

        #[test]
        fn valued_results_visible_after_apply(value in 0.0f64..500.0, day in 0i64..30, later in 0i64..30) {
            let rec = record(vec![ca125(1.0, 0)], vec![]);
            let mut ev = event("r", EventKind::Result, "lab:ca125", day);
            ev.value = Some(FactValue::Number(value));
            let next = apply_event(&rec, ev).unwrap();
            let snap = snapshot_at(&next, date(day + later));
            prop_assert_eq!(ca125_value(&snap), Some(FactValue::Number(value)));
        }

        #[test]
        fn document_round_trip(facts in proptest::collection::vec(arb_fact(), 0..6)) {
            let rec = record(facts, vec![event("e1", EventKind::Order, "lab:ca125", 2)]);
            let back = load_record(&rec.to_json()).unwrap();
            prop_assert_eq!(back, rec);
        }
    }
}
