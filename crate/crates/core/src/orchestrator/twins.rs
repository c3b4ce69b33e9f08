//! The three twins' function tables. Handlers read the shared engine and the
//! session record through the orchestrator and never mutate the record.

use std::sync::Arc;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{FunctionTable, Orchestrator, TwinError};
use crate::code::Code;
use crate::criteria::World;
use crate::graph::{CareGraph, GraphError, ValidationIssue};
use crate::history::{journey_of, record_as_of, timeline_export, HistoryConfig};
use crate::navigator::{annotate_with_necessity, current_frontier, describe, detect_deviations, next_steps};
use crate::necessity::{
    determine, lookup_guideline, select_cpt, simulate_batch, BatchEntry, CodeMap, GuidelineRegistry, ProcedureSpec,
    RegistryError,
};
use crate::patient::{
    default_as_of, extract_facts, snapshot_at, ExtractionGateway, KeywordGateway, Note, OverlayFact, PatientSnapshot,
};

pub const NECESSITY: &str = "necessity";
pub const HISTORY: &str = "history";
pub const NAVIGATOR: &str = "navigator";

/// Read-only knowledge shared by every twin of a session.
pub struct Engine {
    pub graph: CareGraph,
    pub registry: GuidelineRegistry,
    pub code_map: CodeMap,
    pub history: HistoryConfig,
    pub gateway: Arc<dyn ExtractionGateway>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("graph", &self.graph.id)
            .field("guidelines", &self.registry.guidelines().len())
            .field("code_map_rows", &self.code_map.rows.len())
            .finish()
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("registry: {0}")]
    Registry(#[from] RegistryError),
    #[error("code map: {0}")]
    CodeMap(#[from] serde_json::Error),
}

impl Engine {
    pub fn new(graph: CareGraph, registry: GuidelineRegistry, code_map: CodeMap) -> Self {
        Engine {
            graph,
            registry,
            code_map,
            history: HistoryConfig::default(),
            gateway: Arc::new(KeywordGateway::default()),
        }
    }

    pub fn bundled() -> Self {
        Engine::new(crate::assets::ovarian_graph(), crate::assets::registry(), crate::assets::code_map())
    }

    pub fn from_documents(graph: &str, registry: &str, code_map: &str) -> Result<Self, EngineError> {
        Ok(Engine::new(
            crate::graph::load_graph(graph)?,
            crate::necessity::load_registry(registry)?,
            crate::necessity::load_code_map(code_map)?,
        ))
    }

    /// Graph issues plus code-map checks: every row must select its own
    /// code, and every node procedure must select exactly one code.
    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut issues = self.graph.validate(&self.registry);
        for (i, row) in self.code_map.rows.iter().enumerate() {
            let spec = ProcedureSpec {
                modality: row.modality.clone(),
                body_sites: row.body_sites.clone(),
                attributes: row.attributes.clone(),
            };
            match select_cpt(&spec, &self.code_map) {
                Ok(code) if code == row.code => {}
                Ok(code) => issues.push(ValidationIssue::error(
                    format!("code_map[{i}]"),
                    format!("row selects `{code}` instead of its own code `{}`", row.code),
                )),
                Err(e) => issues.push(ValidationIssue::error(format!("code_map[{i}]"), e.to_string())),
            }
        }
        for node in self.graph.nodes() {
            if let Some(spec) = &node.procedure {
                if let Err(e) = select_cpt(spec, &self.code_map) {
                    issues.push(ValidationIssue::error(format!("nodes.{}.procedure", node.id), e.to_string()));
                }
            }
        }
        issues
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Context {
    as_of: Option<NaiveDate>,
    world: Option<World>,
    payer: Option<String>,
    snapshot: Option<PatientSnapshot>,
    what_if: Vec<OverlayFact>,
}

impl Context {
    fn world(&self) -> World {
        self.world.unwrap_or_default()
    }

    fn as_of(&self, ctx: &Orchestrator) -> NaiveDate {
        self.as_of.unwrap_or_else(|| default_as_of(ctx.record()))
    }

    /// The given snapshot, or the session record at `as_of`, with any
    /// what-if facts layered on top.
    fn snapshot(&self, ctx: &Orchestrator) -> PatientSnapshot {
        let base = match &self.snapshot {
            Some(s) => s.clone(),
            None => snapshot_at(ctx.record(), self.as_of(ctx)),
        };
        let overlay: Vec<_> = self.what_if.iter().map(|f| f.at(base.as_of)).collect();
        base.with_overlay(&overlay)
    }

    fn payer(&self, snapshot: &PatientSnapshot) -> String {
        self.payer.clone().unwrap_or_else(|| snapshot.payer_id.clone())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeArgs {
    code: Code,
    #[serde(flatten)]
    ctx: Context,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchArgs {
    codes: Vec<Code>,
    #[serde(flatten)]
    ctx: Context,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoteArgs {
    note: Note,
}

fn args<T: DeserializeOwned>(function: &str, payload: &Value) -> Result<T, TwinError> {
    let payload = if payload.is_null() { Value::Object(Default::default()) } else { payload.clone() };
    serde_json::from_value(payload)
        .map_err(|e| TwinError::BadPayload { function: function.to_owned(), message: e.to_string() })
}

fn to_value<T: Serialize>(value: &T) -> Result<Value, TwinError> {
    serde_json::to_value(value).map_err(|e| TwinError::Failed(e.to_string()))
}

pub fn necessity_twin() -> FunctionTable {
    FunctionTable::new()
        .with("determine", |payload, ctx| {
            let a: CodeArgs = args("determine", payload)?;
            let snapshot = a.ctx.snapshot(ctx);
            let payer = a.ctx.payer(&snapshot);
            let engine = ctx.engine().clone();
            let d = determine(&engine.registry, &payer, &a.code, &snapshot, a.ctx.world())
                .map_err(|e| TwinError::Failed(e.to_string()))?;
            for line in &d.reasoning {
                ctx.reason(line.clone());
            }
            to_value(&d)
        })
        .with("simulate_batch", |payload, ctx| {
            let a: BatchArgs = args("simulate_batch", payload)?;
            let snapshot = a.ctx.snapshot(ctx);
            let payer = a.ctx.payer(&snapshot);
            let engine = ctx.engine().clone();
            let entries = simulate_batch(&engine.registry, &payer, &a.codes, &snapshot, a.ctx.world());
            for entry in &entries {
                match entry {
                    BatchEntry::Determined(d) => {
                        for line in &d.reasoning {
                            ctx.reason(line.clone());
                        }
                    }
                    BatchEntry::NoGuideline { message, .. } => ctx.reason(message.clone()),
                }
            }
            to_value(&entries)
        })
        .with("select_cpt", |payload, ctx| {
            let spec: ProcedureSpec = args("select_cpt", payload)?;
            let engine = ctx.engine().clone();
            match select_cpt(&spec, &engine.code_map) {
                Ok(code) => {
                    ctx.reason(format!("{spec} -> {code}"));
                    Ok(serde_json::json!({ "code": code }))
                }
                Err(e) => Err(TwinError::Failed(e.to_string())),
            }
        })
        .with("lookup_guideline", |payload, ctx| {
            let a: CodeArgs = args("lookup_guideline", payload)?;
            let payer = a.ctx.payer.clone().unwrap_or_else(|| ctx.record().payer_id.clone());
            let engine = ctx.engine().clone();
            let g = lookup_guideline(&engine.registry, &payer, &a.code).map_err(|e| TwinError::Failed(e.to_string()))?;
            ctx.reason(format!("{} for payer {payer}: guideline {}", a.code, g.id));
            to_value(g)
        })
}

pub fn history_twin() -> FunctionTable {
    FunctionTable::new()
        .with("timeline", |payload, ctx| {
            let a: Context = args("timeline", payload)?;
            let as_of = a.as_of(ctx);
            let engine = ctx.engine().clone();
            let export = timeline_export(ctx.record(), &engine.graph, as_of, &engine.history);
            let inferred = export.links.iter().filter(|l| l.inferred).count();
            ctx.reason(format!(
                "timeline at {as_of}: {} events, {} links ({inferred} inferred), {} gaps",
                export.events.len(),
                export.links.len(),
                export.gaps.len()
            ));
            for gap in &export.gaps {
                ctx.reason(format!(
                    "gap: {} `{}` is {} days past its {}-day window",
                    serde_json::to_value(gap.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
                    gap.subject,
                    gap.observed_delay_days,
                    gap.window_days
                ));
            }
            to_value(&export)
        })
        .with("journey", |payload, ctx| {
            let a: Context = args("journey", payload)?;
            let as_of = a.as_of(ctx);
            let engine = ctx.engine().clone();
            let journey = journey_of(&record_as_of(ctx.record(), as_of), &engine.graph);
            let path: Vec<&str> = journey.steps.iter().map(|s| s.node.as_str()).collect();
            ctx.reason(format!("journey at {as_of}: {}", path.join(" > ")));
            to_value(&journey)
        })
        .with("extract", |payload, ctx| {
            let a: NoteArgs = args("extract", payload)?;
            let engine = ctx.engine().clone();
            let facts = extract_facts(&a.note, engine.gateway.as_ref()).map_err(|e| TwinError::Failed(e.to_string()))?;
            let codes: Vec<String> = facts.iter().map(|f| f.code.to_string()).collect();
            ctx.reason(format!("note {}: {}", a.note.id, if codes.is_empty() { "nothing found".into() } else { codes.join(", ") }));
            to_value(&facts)
        })
}

pub fn navigator_twin() -> FunctionTable {
    FunctionTable::new()
        .with("frontier", |payload, ctx| {
            let a: Context = args("frontier", payload)?;
            let as_of = a.as_of(ctx);
            let engine = ctx.engine().clone();
            let journey = journey_of(&record_as_of(ctx.record(), as_of), &engine.graph);
            let frontier = current_frontier(&journey, &engine.graph);
            ctx.reason(format!("frontier at {as_of}: {}", frontier.join(", ")));
            to_value(&frontier)
        })
        .with("next_steps", |payload, ctx| {
            let a: Context = args("next_steps", payload)?;
            let as_of = a.as_of(ctx);
            let snapshot = a.snapshot(ctx);
            let payer = a.payer(&snapshot);
            let engine = ctx.engine().clone();
            let journey = journey_of(&record_as_of(ctx.record(), as_of), &engine.graph);
            let frontier = current_frontier(&journey, &engine.graph);
            ctx.reason(format!("frontier at {as_of}: {}", frontier.join(", ")));
            let recs = next_steps(&engine.graph, &snapshot, &journey, a.world());
            let recs = annotate_with_necessity(recs, ctx, &payer, &snapshot, a.world());
            for r in &recs {
                ctx.reason(describe(r));
            }
            to_value(&recs)
        })
        .with("deviations", |payload, ctx| {
            let a: Context = args("deviations", payload)?;
            let as_of = a.as_of(ctx);
            let engine = ctx.engine().clone();
            let journey = journey_of(&record_as_of(ctx.record(), as_of), &engine.graph);
            let deviations = detect_deviations(&journey, &engine.graph);
            if deviations.is_empty() {
                ctx.reason(format!("no deviations at {as_of}"));
            }
            for d in &deviations {
                ctx.reason(d.detail.clone());
            }
            to_value(&deviations)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use crate::necessity::{Determination, Status};
    use serde_json::json;

    fn orch() -> Orchestrator {
        Orchestrator::new(Arc::new(Engine::bundled()), assets::ovarian_vignette())
    }

    #[test]
    fn bundled_engine_validates() {
        assert!(Engine::bundled().validate().is_empty());
    }

    #[test]
    fn ambiguous_code_map_is_reported() {
        let mut engine = Engine::bundled();
        let mut dup = engine.code_map.rows[0].clone();
        dup.code = "cpt:99999".parse().unwrap();
        engine.code_map.rows.push(dup);
        let issues = engine.validate();
        assert!(!issues.is_empty());
        assert!(issues.iter().any(|i| i.location == "nodes.ct-abdomen-pelvis-contrast.procedure"));
    }

    #[test]
    fn determine_through_dispatch() {
        let mut o = orch();
        let v = o
            .call("clinician", NECESSITY, "determine", json!({"code": "lab:ca125", "as_of": "2024-03-08"}))
            .unwrap();
        let d: Determination = serde_json::from_value(v).unwrap();
        assert_eq!(d.status, Status::Approved);
        assert_eq!(d.guideline_id, "gl:anthem-ca125");
        assert!(o.audit().iter().any(|e| e.text == "status: APPROVED"));
    }

    #[test]
    fn what_if_overlay() {
        let mut o = Orchestrator::new(
            Arc::new(Engine::bundled()),
            crate::patient::load_record(r#"{"id":"empty","payer_id":"anthem"}"#).unwrap(),
        );
        let base: Determination =
            serde_json::from_value(o.call("x", NECESSITY, "determine", json!({"code": "lab:ca125"})).unwrap()).unwrap();
        assert_eq!(base.status, Status::InsufficientInformation);
        let flipped: Determination = serde_json::from_value(
            o.call(
                "x",
                NECESSITY,
                "determine",
                json!({"code": "lab:ca125", "what_if": [{"code": "demo:menopause", "value": "post"}, {"code": "exam:pelvic-mass"}]}),
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(flipped.status, Status::Approved);
    }

    #[test]
    fn bad_payloads_are_errors() {
        let mut o = orch();
        let err = o.call("x", NECESSITY, "determine", json!({"code": "nonsense"})).unwrap_err();
        assert!(err.to_string().contains("bad payload"), "{err}");
        let err = o.call("x", NAVIGATOR, "next_steps", json!({"wrold": "open"})).unwrap_err();
        assert!(err.to_string().contains("wrold"));
        let err = o.call("x", NECESSITY, "determine", json!({"code": "rx:unknown"})).unwrap_err();
        assert!(err.to_string().contains("no guideline"));
    }

    #[test]
    fn next_steps_delegates_once() {
        let mut o = orch();
        o.call("clinician", NAVIGATOR, "next_steps", json!({"as_of": "2024-03-08"})).unwrap();
        let requests: Vec<&str> = o
            .audit()
            .iter()
            .filter(|e| e.kind == super::super::AuditKind::Request)
            .map(|e| e.text.as_str())
            .collect();
        assert_eq!(requests, ["clinician -> navigator.next_steps", "navigator -> necessity.simulate_batch"]);
    }

    #[test]
    fn history_functions() {
        let mut o = orch();
        let j = o.call("x", HISTORY, "journey", Value::Null).unwrap();
        assert_eq!(j["steps"][0]["node"], "symptoms");
        let facts = o
            .call("x", HISTORY, "extract", json!({"note": {"id": "n", "date": "2024-03-01", "text": "Ascites noted"}}))
            .unwrap();
        assert_eq!(facts[0]["code"], "sx:ascites");
        assert_eq!(o.record(), &assets::ovarian_vignette());
    }
}
