//! Scripted sessions: a scenario names its assets and lists steps, each
//! either a recorded clinical event or a call to a twin.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{export_audit, AuditEntry, Engine, Orchestrator};
use crate::assets::{self, BUNDLED_PREFIX};
use crate::graph::{Severity, ValidationIssue};
use crate::patient::{apply_event, load_record, ClinicalEvent, PatientRecord};

/// An asset given by path (or `bundled:<name>`) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AssetRef {
    Path(String),
    Inline(Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ask {
    pub twin: String,
    pub function: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    Ask(Ask),
    InjectEvent(ClinicalEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub graph: AssetRef,
    pub registry: AssetRef,
    pub code_map: AssetRef,
    pub patient: AssetRef,
    #[serde(default)]
    pub script: Vec<Step>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("no bundled asset named `{0}`")]
    UnknownBundled(String),
    #[error("{what}: {message}")]
    Asset { what: &'static str, message: String },
    #[error("scenario assets have {} error(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationIssue>),
}

impl ScenarioError {
    /// Validation issues carried by the error, or a single issue describing it.
    pub fn issues(&self) -> Vec<ValidationIssue> {
        match self {
            ScenarioError::Invalid(issues) => issues.clone(),
            other => vec![ValidationIssue::error("scenario", other.to_string())],
        }
    }
}

/// Reads a scenario file; `bundled:<name>` reads a bundled scenario.
pub fn load_scenario(path: &str) -> Result<(Scenario, Option<PathBuf>), ScenarioError> {
    if let Some(name) = path.strip_prefix(BUNDLED_PREFIX) {
        let text = assets::bundled(name).ok_or_else(|| ScenarioError::UnknownBundled(name.to_owned()))?;
        return Ok((Scenario::parse(text)?, None));
    }
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
    let base = path.parent().map(Path::to_path_buf);
    Ok((Scenario::parse(&text)?, base))
}

fn read_ref(asset: &AssetRef, base: Option<&Path>) -> Result<String, ScenarioError> {
    match asset {
        AssetRef::Inline(v) => Ok(v.to_string()),
        AssetRef::Path(p) => {
            if let Some(name) = p.strip_prefix(BUNDLED_PREFIX) {
                return assets::bundled(name)
                    .map(str::to_owned)
                    .ok_or_else(|| ScenarioError::UnknownBundled(name.to_owned()));
            }
            let path = match base {
                Some(dir) => dir.join(p),
                None => PathBuf::from(p),
            };
            std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path, source })
        }
    }
}

impl Scenario {
    pub fn parse(document: &str) -> Result<Scenario, ScenarioError> {
        Ok(serde_json::from_str(document)?)
    }

    pub fn bundled() -> Scenario {
        Scenario::parse(assets::OVARIAN_SCENARIO).expect("bundled scenario parses")
    }

    /// Loads every referenced asset. Relative paths resolve against `base`.
    pub fn resolve(&self, base: Option<&Path>) -> Result<(Engine, PatientRecord), ScenarioError> {
        let asset = |what: &'static str, e: &dyn std::fmt::Display| ScenarioError::Asset { what, message: e.to_string() };
        let graph = crate::graph::load_graph(&read_ref(&self.graph, base)?).map_err(|e| asset("graph", &e))?;
        let registry =
            crate::necessity::load_registry(&read_ref(&self.registry, base)?).map_err(|e| asset("registry", &e))?;
        let code_map =
            crate::necessity::load_code_map(&read_ref(&self.code_map, base)?).map_err(|e| asset("code map", &e))?;
        let record = load_record(&read_ref(&self.patient, base)?).map_err(|e| asset("patient", &e))?;
        Ok((Engine::new(graph, registry, code_map), record))
    }

    /// Resolves and validates; error-severity issues reject the scenario.
    pub fn prepare(&self, base: Option<&Path>) -> Result<(Engine, PatientRecord, Vec<ValidationIssue>), ScenarioError> {
        let (engine, record) = self.resolve(base)?;
        let issues = engine.validate();
        let errors: Vec<ValidationIssue> = issues.iter().filter(|i| i.severity == Severity::Error).cloned().collect();
        if !errors.is_empty() {
            return Err(ScenarioError::Invalid(errors));
        }
        Ok((engine, record, issues))
    }

    /// The same scenario with file references replaced by their contents, so
    /// it no longer depends on the working directory. Bundled references stay.
    pub fn inlined(&self, base: Option<&Path>) -> Result<Scenario, ScenarioError> {
        let inline = |asset: &AssetRef| -> Result<AssetRef, ScenarioError> {
            match asset {
                AssetRef::Path(p) if !p.starts_with(BUNDLED_PREFIX) => {
                    Ok(AssetRef::Inline(serde_json::from_str(&read_ref(asset, base)?)?))
                }
                other => Ok(other.clone()),
            }
        };
        Ok(Scenario {
            graph: inline(&self.graph)?,
            registry: inline(&self.registry)?,
            code_map: inline(&self.code_map)?,
            patient: inline(&self.patient)?,
            script: self.script.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub index: usize,
    pub step: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub graph_id: String,
    pub warnings: Vec<ValidationIssue>,
    pub final_record: PatientRecord,
    pub steps: Vec<StepOutput>,
    pub audit: Vec<AuditEntry>,
}

impl ScenarioResult {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("results always serialize");
        out.push('\n');
        out
    }

    pub fn audit_export(&self) -> String {
        export_audit(&self.audit)
    }
}

/// Records `event` on the session record through `apply_event`.
pub fn inject_event(orch: &mut Orchestrator, event: ClinicalEvent) -> Result<(), String> {
    let id = event.id.clone();
    let summary = match &event.value {
        Some(v) => format!("{} {} on {}, value {v}", event.kind, event.code, event.date),
        None => format!("{} {} on {}", event.kind, event.code, event.date),
    };
    match apply_event(orch.record(), event) {
        Ok(next) => {
            orch.set_record(next);
            orch.note(super::HISTORY, format!("recorded event {id}: {summary}"), vec![id]);
            Ok(())
        }
        Err(e) => {
            let message = e.to_string();
            orch.note(super::HISTORY, format!("rejected event {id}: {message}"), vec![id]);
            Err(message)
        }
    }
}

/// Runs steps in order against an orchestrator. A failing step is recorded
/// and the script continues.
pub fn run_steps(orch: &mut Orchestrator, script: &[Step]) -> Vec<StepOutput> {
    script
        .iter()
        .enumerate()
        .map(|(index, step)| match step {
            Step::InjectEvent(event) => {
                let label = format!("inject-event {}", event.id);
                match inject_event(orch, event.clone()) {
                    Ok(()) => StepOutput {
                        index,
                        step: label,
                        output: Some(serde_json::json!({ "event": event.id, "events": orch.record().events.len() })),
                        error: None,
                    },
                    Err(e) => StepOutput { index, step: label, output: None, error: Some(e) },
                }
            }
            Step::Ask(ask) => {
                let label = format!("ask {}.{}", ask.twin, ask.function);
                match orch.call("clinician", &ask.twin, &ask.function, ask.payload.clone()) {
                    Ok(v) => StepOutput { index, step: label, output: Some(v), error: None },
                    Err(e) => StepOutput { index, step: label, output: None, error: Some(e.to_string()) },
                }
            }
        })
        .collect()
}

/// Loads and validates the assets, then executes the script.
pub fn run_scenario(scenario: &Scenario, base: Option<&Path>) -> Result<ScenarioResult, ScenarioError> {
    let (engine, record, warnings) = scenario.prepare(base)?;
    let graph_id = engine.graph.id.clone();
    let mut orch = Orchestrator::new(Arc::new(engine), record);
    let steps = run_steps(&mut orch, &scenario.script);
    let final_record = orch.record().clone();
    Ok(ScenarioResult { graph_id, warnings, final_record, steps, audit: orch.into_audit() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::AuditKind;

    #[test]
    fn bundled_scenario_runs() {
        let result = run_scenario(&Scenario::bundled(), None).unwrap();
        assert_eq!(result.steps.len(), 12);
        assert!(result.steps.iter().all(|s| s.error.is_none()), "{:?}", result.steps);
        assert_eq!(result.final_record.events.len(), 8);
        assert!(result.audit.windows(2).all(|w| w[0].logical_time < w[1].logical_time));
        let count = |k: AuditKind| result.audit.iter().filter(|e| e.kind == k).count();
        assert_eq!(count(AuditKind::Request), count(AuditKind::Response) + count(AuditKind::Error));
    }

    #[test]
    fn empty_script() {
        let mut s = Scenario::bundled();
        s.script.clear();
        let result = run_scenario(&s, None).unwrap();
        assert!(result.steps.is_empty() && result.audit.is_empty());
        assert_eq!(result.final_record, assets::ovarian_vignette());
    }

    #[test]
    fn step_errors_do_not_stop_the_script() {
        let mut s = Scenario::bundled();
        s.script = vec![
            Step::Ask(Ask { twin: "billing".into(), function: "x".into(), payload: Value::Null }),
            Step::InjectEvent(serde_json::from_str(r#"{"id":"ev-exam","kind":"order","code":"lab:ca125","date":"2024-03-09"}"#).unwrap()),
            Step::Ask(Ask { twin: "navigator".into(), function: "frontier".into(), payload: Value::Null }),
        ];
        let result = run_scenario(&s, None).unwrap();
        assert!(result.steps[0].error.as_deref().unwrap().contains("unknown twin"));
        assert!(result.steps[1].error.as_deref().unwrap().contains("ev-exam"));
        assert_eq!(result.steps[2].output, Some(serde_json::json!(["exam"])));
    }

    #[test]
    fn asset_errors_abort() {
        let mut s = Scenario::bundled();
        s.graph = AssetRef::Path("bundled:nope.json".into());
        assert!(matches!(run_scenario(&s, None), Err(ScenarioError::UnknownBundled(_))));
        let mut s = Scenario::bundled();
        let mut graph: Value = serde_json::from_str(assets::OVARIAN_GRAPH).unwrap();
        graph["nodes"][1]["guideline_ids"] = serde_json::json!(["gl:gone"]);
        s.graph = AssetRef::Inline(graph);
        let err = run_scenario(&s, None).unwrap_err();
        assert_eq!(err.issues().len(), 1);
    }

    #[test]
    fn relative_paths_and_inlining() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("g.json"), assets::OVARIAN_GRAPH).unwrap();
        let mut s = Scenario::bundled();
        s.graph = AssetRef::Path("g.json".into());
        s.script.truncate(2);
        let direct = run_scenario(&s, Some(dir.path())).unwrap();
        let inlined = s.inlined(Some(dir.path())).unwrap();
        assert!(matches!(inlined.graph, AssetRef::Inline(_)));
        assert_eq!(inlined.registry, s.registry);
        assert_eq!(run_scenario(&inlined, None).unwrap(), direct);
        assert!(matches!(run_scenario(&s, None), Err(ScenarioError::Io { .. })));
    }
}
