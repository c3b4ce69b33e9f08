//! Deterministic clinical-operations engine for oncology care paths.
//!
//! A care graph describes the expected diagnostic path; guideline rules are
//! written in a small criteria language and evaluated under three-valued
//! logic against a patient snapshot. Three twins (history, necessity,
//! navigator) exchange messages through an orchestrator that keeps a logical
//! clock and an audit log. The HTTP service and the CLI sit on top.

pub mod assets;
pub mod cli;
pub mod code;
pub mod criteria;
pub mod graph;
pub mod history;
pub mod navigator;
pub mod necessity;
pub mod orchestrator;
pub mod patient;
pub mod service;

pub use code::{Code, FactValue, Scalar};
pub use criteria::{evaluate, parse_rule, GuidelineRule, Verdict, World};
pub use graph::{load_graph, CareGraph};
pub use necessity::{determine, select_cpt, Determination, GuidelineRegistry, Status};
pub use patient::{snapshot_at, PatientRecord, PatientSnapshot};
pub use orchestrator::{run_scenario, Engine, Orchestrator, Scenario, ScenarioResult};
