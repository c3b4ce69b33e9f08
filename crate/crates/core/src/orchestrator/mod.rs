//! Function-call routing between twins.
//!
//! Every twin is a named table of functions. A call is a request message to
//! one function of one twin, answered synchronously by a response or an
//! error; handlers may call other twins while running. Each audit entry
//! advances an integer logical clock, so the log is totally ordered and
//! replays byte for byte.

mod scenario;
mod twins;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::patient::PatientRecord;

pub use scenario::{
    inject_event, load_scenario, run_scenario, run_steps, Ask, AssetRef, Scenario, ScenarioError, ScenarioResult, Step,
    StepOutput,
};
pub use twins::{history_twin, navigator_twin, necessity_twin, Engine, EngineError, HISTORY, NAVIGATOR, NECESSITY};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TwinError {
    #[error("twin `{0}` is already registered")]
    DuplicateTwin(String),
    #[error("unknown twin `{0}`")]
    UnknownTwin(String),
    #[error("twin `{twin}` has no function `{function}`")]
    UnknownFunction { twin: String, function: String },
    #[error("bad payload for {function}: {message}")]
    BadPayload { function: String, message: String },
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Request,
    Response,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinMessage {
    pub id: String,
    pub logical_time: u64,
    pub sender: String,
    pub recipient: String,
    pub function: String,
    pub payload: Value,
    pub correlation_id: String,
    pub kind: MessageKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditKind {
    Request,
    Response,
    Reasoning,
    Error,
}

impl AuditKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditKind::Request => "request",
            AuditKind::Response => "response",
            AuditKind::Reasoning => "reasoning",
            AuditKind::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub logical_time: u64,
    pub twin: String,
    pub kind: AuditKind,
    pub text: String,
    pub refs: Vec<String>,
}

pub const AUDIT_HEADER: &str = "logical_time\ttwin\tkind\trefs\ttext";

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

impl fmt::Display for AuditEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.logical_time,
            escape_field(&self.twin),
            self.kind.as_str(),
            escape_field(&self.refs.join(",")),
            escape_field(&self.text)
        )
    }
}

/// Line-delimited audit export: a header line, then one tab-separated line
/// per entry. Tabs, newlines and backslashes inside fields are escaped.
pub fn export_audit(entries: &[AuditEntry]) -> String {
    let mut out = String::from(AUDIT_HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

pub type Handler = Arc<dyn Fn(&Value, &mut Orchestrator) -> Result<Value, TwinError> + Send + Sync>;

#[derive(Clone, Default)]
pub struct FunctionTable {
    functions: BTreeMap<String, Handler>,
}

impl FunctionTable {
    pub fn new() -> Self {
        FunctionTable::default()
    }

    pub fn with<F>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(&Value, &mut Orchestrator) -> Result<Value, TwinError> + Send + Sync + 'static,
    {
        self.functions.insert(name.to_owned(), Arc::new(f));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.functions.keys().map(String::as_str)
    }
}

impl fmt::Debug for FunctionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.functions.keys()).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TwinHandle(String);

impl TwinHandle {
    pub fn id(&self) -> &str {
        &self.0
    }
}

/// Message router for one session. Holds the session record, which only
/// scenario event injection mutates.
pub struct Orchestrator {
    engine: Arc<Engine>,
    record: PatientRecord,
    twins: BTreeMap<String, FunctionTable>,
    clock: u64,
    next_message: u64,
    audit: Vec<AuditEntry>,
    active: Vec<(String, String)>,
}

impl fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Orchestrator")
            .field("record", &self.record.id)
            .field("twins", &self.twins)
            .field("clock", &self.clock)
            .field("audit_len", &self.audit.len())
            .finish()
    }
}

impl Orchestrator {
    /// An orchestrator with no twins registered.
    pub fn empty(engine: Arc<Engine>, record: PatientRecord) -> Self {
        Orchestrator {
            engine,
            record,
            twins: BTreeMap::new(),
            clock: 0,
            next_message: 1,
            audit: Vec::new(),
            active: Vec::new(),
        }
    }

    /// An orchestrator with the necessity, history and navigator twins.
    pub fn new(engine: Arc<Engine>, record: PatientRecord) -> Self {
        let mut orch = Orchestrator::empty(engine, record);
        orch.register_twin(NECESSITY, necessity_twin()).expect("fresh orchestrator");
        orch.register_twin(HISTORY, history_twin()).expect("fresh orchestrator");
        orch.register_twin(NAVIGATOR, navigator_twin()).expect("fresh orchestrator");
        orch
    }

    /// Continues an existing session's clock and message numbering.
    pub fn resume(mut self, clock: u64, next_message: u64) -> Self {
        self.clock = clock;
        self.next_message = next_message.max(1);
        self
    }

    pub fn register_twin(&mut self, id: &str, table: FunctionTable) -> Result<TwinHandle, TwinError> {
        if self.twins.contains_key(id) {
            return Err(TwinError::DuplicateTwin(id.to_owned()));
        }
        self.twins.insert(id.to_owned(), table);
        Ok(TwinHandle(id.to_owned()))
    }

    pub fn functions(&self, twin: &str) -> Option<Vec<&str>> {
        self.twins.get(twin).map(|t| t.names().collect())
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn record(&self) -> &PatientRecord {
        &self.record
    }

    pub(crate) fn set_record(&mut self, record: PatientRecord) {
        self.record = record;
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn next_message(&self) -> u64 {
        self.next_message
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn into_audit(self) -> Vec<AuditEntry> {
        self.audit
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn message_id(&mut self) -> String {
        let id = format!("m{}", self.next_message);
        self.next_message += 1;
        id
    }

    fn push(&mut self, twin: &str, kind: AuditKind, text: String, refs: Vec<String>) -> u64 {
        let logical_time = self.tick();
        self.audit.push(AuditEntry { logical_time, twin: twin.to_owned(), kind, text, refs });
        logical_time
    }

    /// Appends a reasoning line attributed to the twin currently handling a
    /// call, or to `orchestrator` outside any call.
    pub fn reason(&mut self, text: impl Into<String>) {
        let (twin, refs) = match self.active.last() {
            Some((twin, correlation)) => (twin.clone(), vec![correlation.clone()]),
            None => ("orchestrator".to_owned(), Vec::new()),
        };
        self.push(&twin, AuditKind::Reasoning, text.into(), refs);
    }

    /// Reasoning attributed to a named party, outside any call.
    pub fn note(&mut self, twin: &str, text: impl Into<String>, refs: Vec<String>) {
        self.push(twin, AuditKind::Reasoning, text.into(), refs);
    }

    /// Builds a request message; `dispatch` stamps its logical time.
    pub fn request(&mut self, sender: &str, recipient: &str, function: &str, payload: Value) -> TwinMessage {
        let id = self.message_id();
        TwinMessage {
            correlation_id: id.clone(),
            id,
            logical_time: 0,
            sender: sender.to_owned(),
            recipient: recipient.to_owned(),
            function: function.to_owned(),
            payload,
            kind: MessageKind::Request,
        }
    }

    /// Delivers `message` and returns the response or error message.
    pub fn dispatch(&mut self, mut message: TwinMessage) -> TwinMessage {
        let target = format!("{}.{}", message.recipient, message.function);
        message.logical_time = self.push(
            &message.sender,
            AuditKind::Request,
            format!("{} -> {target}", message.sender),
            vec![message.id.clone(), message.correlation_id.clone()],
        );
        let handler = match self.twins.get(&message.recipient) {
            None => Err(TwinError::UnknownTwin(message.recipient.clone())),
            Some(table) => table.functions.get(&message.function).cloned().ok_or_else(|| TwinError::UnknownFunction {
                twin: message.recipient.clone(),
                function: message.function.clone(),
            }),
        };
        let outcome = handler.and_then(|h| {
            self.active.push((message.recipient.clone(), message.correlation_id.clone()));
            let out = h(&message.payload, self);
            self.active.pop();
            out
        });

        let id = self.message_id();
        let refs = vec![id.clone(), message.correlation_id.clone()];
        let (kind, payload, logical_time) = match outcome {
            Ok(payload) => {
                let t = self.push(&message.recipient, AuditKind::Response, format!("{target} ok"), refs);
                (MessageKind::Response, payload, t)
            }
            Err(err) => {
                let text = err.to_string();
                let t = self.push(&message.recipient, AuditKind::Error, format!("{target} failed: {text}"), refs);
                (MessageKind::Error, serde_json::json!({ "error": text }), t)
            }
        };
        TwinMessage {
            id,
            logical_time,
            sender: message.recipient,
            recipient: message.sender,
            function: message.function,
            payload,
            correlation_id: message.correlation_id,
            kind,
        }
    }

    /// Request/response in one step, returning the payload or the error.
    pub fn call(&mut self, sender: &str, recipient: &str, function: &str, payload: Value) -> Result<Value, TwinError> {
        let request = self.request(sender, recipient, function, payload);
        let response = self.dispatch(request);
        match response.kind {
            MessageKind::Error => Err(TwinError::Failed(
                response.payload.get("error").and_then(Value::as_str).unwrap_or("error").to_owned(),
            )),
            _ => Ok(response.payload),
        }
    }
}
