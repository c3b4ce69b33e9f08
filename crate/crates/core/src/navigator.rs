//! Position on the care graph, gated next steps, and deviations from the
//! ideal path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::code::Code;
use crate::criteria::{evaluate, RuleTrace, Verdict, World};
use crate::graph::{CareGraph, CareNode, EdgeCondition};
use crate::history::Journey;
use crate::necessity::{lookup_guideline, select_cpt, BatchEntry, CodeMap, Determination, GuidelineRegistry, Status};
use crate::orchestrator::{Orchestrator, NAVIGATOR, NECESSITY};
use crate::patient::PatientSnapshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub node: String,
    pub label: String,
    pub via_edge: usize,
    pub condition: String,
    pub condition_verdict: Verdict,
    pub condition_trace: Option<RuleTrace>,
    pub intervention_code: Option<Code>,
    pub determination: Option<Determination>,
    pub note: Option<String>,
    pub rank: usize,
}

impl Recommendation {
    /// UNKNOWN conditions are shown, but flagged.
    pub fn flagged(&self) -> bool {
        self.condition_verdict == Verdict::Unknown
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviationKind {
    OffPathEvent,
    SkippedPrerequisite,
    OutOfOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deviation {
    pub kind: DeviationKind,
    pub subject: String,
    pub detail: String,
}

/// Matched nodes with an edge to a node still open to visit. With nothing
/// matched yet, the entry nodes.
pub fn current_frontier(journey: &Journey, graph: &CareGraph) -> Vec<String> {
    if journey.steps.is_empty() {
        return graph.entry_nodes();
    }
    let visited = journey.visited();
    journey
        .steps
        .iter()
        .filter(|step| {
            graph.successors(&step.node).unwrap_or_default().iter().any(|e| {
                !visited.contains(e.to.as_str()) || graph.node(&e.to).is_some_and(|n| n.repeatable)
            })
        })
        .map(|step| step.node.clone())
        .collect()
}

fn verdict_order(v: Verdict) -> u8 {
    match v {
        Verdict::Met => 0,
        Verdict::Unknown => 1,
        Verdict::NotMet => 2,
    }
}

/// Successors of the frontier whose edge condition is MET or UNKNOWN,
/// ranked MET first, then by edge order in the graph document, then node id.
pub fn next_steps(graph: &CareGraph, snapshot: &PatientSnapshot, journey: &Journey, world: World) -> Vec<Recommendation> {
    let visited = journey.visited();
    let frontier = current_frontier(journey, graph);
    let mut best: BTreeMap<String, Recommendation> = BTreeMap::new();
    for (index, edge) in graph.edges().iter().enumerate() {
        if !frontier.contains(&edge.from) {
            continue;
        }
        let Some(target) = graph.node(&edge.to) else { continue };
        if visited.contains(target.id.as_str()) && !target.repeatable {
            continue;
        }
        let (verdict, trace) = match &edge.condition {
            EdgeCondition::Always => (Verdict::Met, None),
            EdgeCondition::Rule(rule) => {
                let (v, t) = evaluate(rule, snapshot, world);
                (v, Some(t))
            }
        };
        if verdict == Verdict::NotMet {
            continue;
        }
        let candidate = Recommendation {
            node: target.id.clone(),
            label: target.label.clone(),
            via_edge: index,
            condition: edge.condition.to_string(),
            condition_verdict: verdict,
            condition_trace: trace,
            intervention_code: None,
            determination: None,
            note: None,
            rank: 0,
        };
        let better = best
            .get(&target.id)
            .is_none_or(|cur| verdict_order(verdict) < verdict_order(cur.condition_verdict));
        if better {
            best.insert(target.id.clone(), candidate);
        }
    }
    let mut recs: Vec<Recommendation> = best.into_values().collect();
    recs.sort_by(|a, b| {
        (verdict_order(a.condition_verdict), a.via_edge, &a.node).cmp(&(
            verdict_order(b.condition_verdict),
            b.via_edge,
            &b.node,
        ))
    });
    for (i, r) in recs.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    recs
}

/// Billing or order code to check for a node: the code selected from its
/// procedure description when it has one, else the first of its codes that
/// has a guideline for the payer, else its first code.
pub fn intervention_code(node: &CareNode, registry: &GuidelineRegistry, code_map: &CodeMap, payer: &str) -> Option<Code> {
    if let Some(spec) = &node.procedure {
        if let Ok(code) = select_cpt(spec, code_map) {
            return Some(code);
        }
    }
    node.codes
        .iter()
        .find(|c| lookup_guideline(registry, payer, c).is_ok())
        .or_else(|| node.codes.iter().next())
        .cloned()
}

fn status_order(status: Option<Status>) -> u8 {
    match status {
        Some(Status::Approved) => 0,
        Some(Status::InsufficientInformation) => 1,
        Some(Status::Denied) => 2,
        None => 3,
    }
}

pub const UNAVAILABLE: &str = "determination unavailable";

/// Asks the necessity twin, in one batch call, for a determination on each
/// recommendation and re-ranks by status (APPROVED, then
/// INSUFFICIENT_INFORMATION, then DENIED), keeping the previous order among
/// equals.
pub fn annotate_with_necessity(
    mut recs: Vec<Recommendation>,
    orchestrator: &mut Orchestrator,
    payer: &str,
    snapshot: &PatientSnapshot,
    world: World,
) -> Vec<Recommendation> {
    if recs.is_empty() {
        return recs;
    }
    let engine = orchestrator.engine().clone();
    for r in &mut recs {
        r.intervention_code = engine
            .graph
            .node(&r.node)
            .and_then(|n| intervention_code(n, &engine.registry, &engine.code_map, payer));
        if r.intervention_code.is_none() {
            r.note = Some("no intervention code for this step".into());
        }
    }
    let codes: Vec<Code> = recs.iter().filter_map(|r| r.intervention_code.clone()).collect();
    if codes.is_empty() {
        return recs;
    }
    let payload = json!({ "payer": payer, "codes": codes, "snapshot": snapshot, "world": world });
    let entries: Result<Vec<BatchEntry>, String> = orchestrator
        .call(NAVIGATOR, NECESSITY, "simulate_batch", payload)
        .map_err(|e| e.to_string())
        .and_then(|v| serde_json::from_value(v).map_err(|e| e.to_string()));

    match entries {
        Ok(entries) if entries.len() == codes.len() => {
            let mut entries = entries.into_iter();
            for r in recs.iter_mut().filter(|r| r.intervention_code.is_some()) {
                match entries.next().expect("one entry per code") {
                    BatchEntry::Determined(d) => {
                        r.determination = Some(d);
                        r.note = None;
                    }
                    BatchEntry::NoGuideline { message, .. } => r.note = Some(message),
                }
            }
        }
        Ok(_) => mark_unavailable(&mut recs, "batch size mismatch"),
        Err(e) => mark_unavailable(&mut recs, &e),
    }
    recs.sort_by_key(|r| (status_order(r.determination.as_ref().map(|d| d.status)), r.rank));
    for (i, r) in recs.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    recs
}

fn mark_unavailable(recs: &mut [Recommendation], why: &str) {
    for r in recs.iter_mut().filter(|r| r.intervention_code.is_some()) {
        r.determination = None;
        r.note = Some(format!("{UNAVAILABLE}: {why}"));
    }
}

/// Events off the graph, matched steps reached without any matched
/// predecessor, and steps dated before every matched predecessor.
pub fn detect_deviations(journey: &Journey, graph: &CareGraph) -> Vec<Deviation> {
    let mut out: Vec<Deviation> = journey
        .unmatched
        .iter()
        .map(|id| Deviation {
            kind: DeviationKind::OffPathEvent,
            subject: id.clone(),
            detail: format!("event `{id}` matches no step of graph `{}`", graph.id),
        })
        .collect();
    let entries = graph.entry_nodes();
    for step in &journey.steps {
        if entries.contains(&step.node) {
            continue;
        }
        let preds: Vec<&crate::history::JourneyStep> = graph
            .predecessors(&step.node)
            .unwrap_or_default()
            .iter()
            .filter(|e| e.from != step.node)
            .filter_map(|e| journey.step(&e.from))
            .collect();
        if preds.is_empty() {
            out.push(Deviation {
                kind: DeviationKind::SkippedPrerequisite,
                subject: step.node.clone(),
                detail: format!("`{}` reached with no preceding step on the path", step.node),
            });
        } else if preds.iter().all(|p| p.first_date > step.first_date) {
            let names: Vec<&str> = preds.iter().map(|p| p.node.as_str()).collect();
            out.push(Deviation {
                kind: DeviationKind::OutOfOrder,
                subject: step.node.clone(),
                detail: format!("`{}` on {} precedes {}", step.node, step.first_date, names.join(", ")),
            });
        }
    }
    out
}

/// One line per recommendation, for the audit log.
pub fn describe(rec: &Recommendation) -> String {
    let mut line = format!("#{} {} via edge {} [{}]", rec.rank, rec.node, rec.via_edge, rec.condition_verdict);
    if rec.flagged() {
        let missing = rec.condition_trace.as_ref().map(RuleTrace::unknown_codes).unwrap_or_default();
        let list: Vec<String> = missing.iter().map(Code::to_string).collect();
        line.push_str(&format!(" needs data: {}", list.join(", ")));
    }
    match (&rec.intervention_code, &rec.determination, &rec.note) {
        (Some(code), Some(d), _) => line.push_str(&format!("; {code} {}", d.status)),
        (_, _, Some(note)) => line.push_str(&format!("; {note}")),
        _ => {}
    }
    line
}
