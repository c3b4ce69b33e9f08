//! Clinical history: chronological timeline, inferred event links, gap
//! detection, and the mapping of events onto care-graph nodes.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::code::Code;
use crate::criteria::{evaluate, Verdict, World};
use crate::graph::{CareGraph, EdgeCondition};
use crate::patient::{ClinicalEvent, EventKind, PatientRecord, PatientSnapshot, Relation};

/// Inference and gap windows, in days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryConfig {
    pub fulfills_window_days: u32,
    pub treats_window_days: u32,
    pub default_gap_window_days: u32,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        HistoryConfig { fulfills_window_days: 90, treats_window_days: 180, default_gap_window_days: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimelineLink {
    pub relation: Relation,
    pub from: String,
    pub to: String,
    pub inferred: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub record_id: String,
    pub events: Vec<ClinicalEvent>,
    pub links: Vec<TimelineLink>,
    pub annotations: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapKind {
    UnfulfilledOrder,
    OverdueStep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapFinding {
    pub subject: String,
    pub kind: GapKind,
    pub window_days: u32,
    pub observed_delay_days: i64,
    pub as_of: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JourneyStep {
    pub node: String,
    pub event_ids: Vec<String>,
    pub first_date: NaiveDate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Journey {
    pub steps: Vec<JourneyStep>,
    pub unmatched: Vec<String>,
}

impl Journey {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.unmatched.is_empty()
    }

    pub fn step(&self, node: &str) -> Option<&JourneyStep> {
        self.steps.iter().find(|s| s.node == node)
    }

    pub fn visited(&self) -> BTreeSet<&str> {
        self.steps.iter().map(|s| s.node.as_str()).collect()
    }
}

/// Timeline export consumed by the console and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineExport {
    pub record_id: String,
    pub as_of: NaiveDate,
    pub events: Vec<ClinicalEvent>,
    pub links: Vec<TimelineLink>,
    pub gaps: Vec<GapFinding>,
    pub annotations: BTreeMap<String, Vec<String>>,
}

fn sorted_events(record: &PatientRecord) -> Vec<&ClinicalEvent> {
    let mut events: Vec<&ClinicalEvent> = record.events.iter().collect();
    events.sort_by(|a, b| (a.date, &a.id).cmp(&(b.date, &b.id)));
    events
}

fn explicit_links(record: &PatientRecord) -> Vec<TimelineLink> {
    let mut links: Vec<TimelineLink> = record
        .events
        .iter()
        .flat_map(|e| {
            e.links.iter().map(|l| TimelineLink {
                relation: l.relation,
                from: e.id.clone(),
                to: l.target.clone(),
                inferred: false,
            })
        })
        .collect();
    links.sort();
    links
}

fn within(start: NaiveDate, date: NaiveDate, days: u32) -> bool {
    date >= start && date <= start + Duration::days(i64::from(days))
}

/// Links implied by the record but not stated in it: an order is fulfilled by
/// the earliest same-code result within the window, and a diagnosis is
/// treated by the earliest treatment start within the window.
pub fn link_events(record: &PatientRecord, config: &HistoryConfig) -> Vec<TimelineLink> {
    let events = sorted_events(record);
    let explicit = explicit_links(record);
    let has_explicit = |relation: Relation, pick: &dyn Fn(&TimelineLink) -> &str, id: &str| {
        explicit.iter().any(|l| l.relation == relation && pick(l) == id)
    };
    let mut out = Vec::new();

    let mut claimed: BTreeSet<&str> = BTreeSet::new();
    for order in events.iter().filter(|e| e.kind == EventKind::Order) {
        if has_explicit(Relation::Fulfills, &|l| &l.to, &order.id) {
            continue;
        }
        let hit = events.iter().find(|r| {
            matches!(r.kind, EventKind::Result | EventKind::Imaging)
                && r.code == order.code
                && within(order.date, r.date, config.fulfills_window_days)
                && !claimed.contains(r.id.as_str())
                && !has_explicit(Relation::Fulfills, &|l| &l.from, &r.id)
        });
        if let Some(result) = hit {
            claimed.insert(&result.id);
            out.push(TimelineLink {
                relation: Relation::Fulfills,
                from: result.id.clone(),
                to: order.id.clone(),
                inferred: true,
            });
        }
    }

    let mut treated: BTreeSet<&str> = BTreeSet::new();
    for dx in events.iter().filter(|e| e.code.namespace() == "dx") {
        if has_explicit(Relation::Treats, &|l| &l.to, &dx.id) {
            continue;
        }
        let hit = events.iter().find(|t| {
            t.kind == EventKind::TreatmentStart
                && within(dx.date, t.date, config.treats_window_days)
                && !treated.contains(t.id.as_str())
                && !has_explicit(Relation::Treats, &|l| &l.from, &t.id)
        });
        if let Some(treatment) = hit {
            treated.insert(&treatment.id);
            out.push(TimelineLink {
                relation: Relation::Treats,
                from: treatment.id.clone(),
                to: dx.id.clone(),
                inferred: true,
            });
        }
    }
    out
}

pub fn build_timeline(record: &PatientRecord) -> Timeline {
    build_timeline_with(record, &HistoryConfig::default())
}

/// Events sorted by (date, id) with explicit and inferred links.
pub fn build_timeline_with(record: &PatientRecord, config: &HistoryConfig) -> Timeline {
    let events: Vec<ClinicalEvent> = sorted_events(record).into_iter().cloned().collect();
    let mut links = explicit_links(record);
    links.extend(link_events(record, config));

    let mut annotations: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in &events {
        if let Some(v) = &e.value {
            annotations.entry(e.id.clone()).or_default().push(format!("{} = {v}", e.code));
        }
    }
    for l in &links {
        let how = if l.inferred { "inferred" } else { "recorded" };
        let (fwd, back) = match l.relation {
            Relation::Fulfills => ("fulfills", "fulfilled by"),
            Relation::FollowsFrom => ("follows from", "followed by"),
            Relation::Treats => ("treats", "treated by"),
        };
        annotations.entry(l.from.clone()).or_default().push(format!("{fwd} {} ({how})", l.to));
        annotations.entry(l.to.clone()).or_default().push(format!("{back} {} ({how})", l.from));
    }
    Timeline { record_id: record.id.clone(), events, links, annotations }
}

/// The graph node an event code maps to; several candidates resolve to the
/// earliest in topological-then-lexicographic order.
pub fn node_for_code(graph: &CareGraph, code: &Code) -> Option<String> {
    graph.find_nodes_by_code(code).into_iter().min_by_key(|n| (graph.rank_of(n), n.clone()))
}

fn journey_from_events<'a>(events: impl Iterator<Item = &'a ClinicalEvent>, graph: &CareGraph) -> Journey {
    let mut by_node: BTreeMap<String, JourneyStep> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for e in events {
        match node_for_code(graph, &e.code) {
            Some(node) => {
                let step = by_node.entry(node.clone()).or_insert_with(|| JourneyStep {
                    node,
                    event_ids: Vec::new(),
                    first_date: e.date,
                });
                step.event_ids.push(e.id.clone());
                step.first_date = step.first_date.min(e.date);
            }
            None => unmatched.push(e.id.clone()),
        }
    }
    let mut steps: Vec<JourneyStep> = by_node.into_values().collect();
    steps.sort_by_key(|s| (s.first_date, graph.rank_of(&s.node), s.node.clone()));
    Journey { steps, unmatched }
}

/// Projects the record's events onto graph nodes by code.
pub fn journey_of(record: &PatientRecord, graph: &CareGraph) -> Journey {
    journey_from_events(sorted_events(record).into_iter(), graph)
}

pub fn detect_gaps(timeline: &Timeline, graph: &CareGraph, as_of: NaiveDate) -> Vec<GapFinding> {
    detect_gaps_with(timeline, graph, as_of, &HistoryConfig::default(), None)
}

/// Orders without a result past their window, and care steps whose next
/// step has not been taken within its window. A step made only of pending
/// orders is still in progress. With a snapshot, successor steps whose edge
/// condition is NOT_MET do not count as expected.
pub fn detect_gaps_with(
    timeline: &Timeline,
    graph: &CareGraph,
    as_of: NaiveDate,
    config: &HistoryConfig,
    snapshot: Option<&PatientSnapshot>,
) -> Vec<GapFinding> {
    let window_of = |node: Option<&str>| {
        node.and_then(|n| graph.node(n))
            .and_then(|n| n.expected_window_days)
            .unwrap_or(config.default_gap_window_days)
    };
    let elapsed = |from: NaiveDate| (as_of - from).num_days();
    let date_of: BTreeMap<&str, NaiveDate> = timeline.events.iter().map(|e| (e.id.as_str(), e.date)).collect();
    let fulfilled: BTreeSet<&str> = timeline
        .links
        .iter()
        .filter(|l| l.relation == Relation::Fulfills)
        .filter(|l| date_of.get(l.from.as_str()).is_some_and(|d| *d <= as_of))
        .map(|l| l.to.as_str())
        .collect();

    let mut gaps = Vec::new();
    for order in timeline.events.iter().filter(|e| e.kind == EventKind::Order && e.date <= as_of) {
        if fulfilled.contains(order.id.as_str()) {
            continue;
        }
        let window = window_of(node_for_code(graph, &order.code).as_deref());
        let delay = elapsed(order.date) - i64::from(window);
        if delay > 0 {
            gaps.push(GapFinding {
                subject: order.id.clone(),
                kind: GapKind::UnfulfilledOrder,
                window_days: window,
                observed_delay_days: delay,
                as_of,
            });
        }
    }

    let journey = journey_from_events(timeline.events.iter().filter(|e| e.date <= as_of), graph);
    let visited = journey.visited();
    let pending: BTreeSet<&str> = timeline
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Order && !fulfilled.contains(e.id.as_str()))
        .map(|e| e.id.as_str())
        .collect();
    for step in &journey.steps {
        if step.event_ids.iter().all(|id| pending.contains(id.as_str())) {
            continue;
        }
        let edges = graph.successors(&step.node).unwrap_or_default();
        let expected: Vec<&str> = edges
            .iter()
            .filter(|e| match (&e.condition, snapshot) {
                (EdgeCondition::Rule(rule), Some(snap)) => evaluate(rule, snap, World::Open).0 != Verdict::NotMet,
                _ => true,
            })
            .map(|e| e.to.as_str())
            .collect();
        if expected.is_empty() || edges.iter().any(|e| visited.contains(e.to.as_str())) {
            continue;
        }
        let window = expected.iter().map(|n| window_of(Some(n))).min().expect("non-empty");
        let delay = elapsed(step.first_date) - i64::from(window);
        if delay > 0 {
            gaps.push(GapFinding {
                subject: step.node.clone(),
                kind: GapKind::OverdueStep,
                window_days: window,
                observed_delay_days: delay,
                as_of,
            });
        }
    }
    gaps
}

/// The record as it stood at `as_of`: later facts and events dropped, along
/// with links into dropped events.
pub fn record_as_of(record: &PatientRecord, as_of: NaiveDate) -> PatientRecord {
    let mut out = record.clone();
    out.facts.retain(|f| f.effective_date <= as_of);
    out.events.retain(|e| e.date <= as_of);
    let kept: BTreeSet<String> = out.events.iter().map(|e| e.id.clone()).collect();
    for e in &mut out.events {
        e.links.retain(|l| kept.contains(&l.target));
    }
    out
}

/// Timeline plus gap findings at `as_of`.
pub fn timeline_export(
    record: &PatientRecord,
    graph: &CareGraph,
    as_of: NaiveDate,
    config: &HistoryConfig,
) -> TimelineExport {
    let current = record_as_of(record, as_of);
    let timeline = build_timeline_with(&current, config);
    let snapshot = crate::patient::snapshot_at(&current, as_of);
    let gaps = detect_gaps_with(&timeline, graph, as_of, config, Some(&snapshot));
    TimelineExport {
        record_id: timeline.record_id,
        as_of,
        events: timeline.events,
        links: timeline.links,
        gaps,
        annotations: timeline.annotations,
    }
}
