//! The care path as a directed knowledge graph.
//!
//! Nodes are care steps (symptom clusters, exams, tests, imaging, diagnoses)
//! carrying codes and guideline references; edges carry the condition that
//! must hold before moving on to the next step. Cycles are allowed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::code::Code;
use crate::criteria::{parse_rule, GuidelineRule, ParseError};
use crate::necessity::{GuidelineRegistry, ProcedureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    SymptomCluster,
    ClinicalExam,
    LabTest,
    Imaging,
    Procedure,
    Diagnosis,
    Treatment,
    Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CareNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
    #[serde(default)]
    pub codes: BTreeSet<Code>,
    #[serde(default)]
    pub guideline_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_window_days: Option<u32>,
    #[serde(default)]
    pub repeatable: bool,
    #[serde(default)]
    pub entry: bool,
    /// Procedure description used to pick a billing code for the step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub procedure: Option<ProcedureSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeCondition {
    Always,
    Rule(GuidelineRule),
}

impl fmt::Display for EdgeCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeCondition::Always => f.write_str("ALWAYS"),
            EdgeCondition::Rule(r) => write!(f, "{r}"),
        }
    }
}

impl Serialize for EdgeCondition {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CareEdge {
    pub from: String,
    pub to: String,
    pub condition: EdgeCondition,
    pub label: String,
}

#[derive(Debug, Deserialize)]
struct EdgeDocument {
    from: String,
    to: String,
    #[serde(default)]
    condition: Option<String>,
    #[serde(default)]
    label: String,
}

#[derive(Debug, Deserialize)]
struct GraphDocument {
    id: String,
    cancer_type: String,
    guideline_version: String,
    nodes: Vec<CareNode>,
    edges: Vec<EdgeDocument>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph document, line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("edges[{edge}] condition: {source}")]
    Condition { edge: usize, source: ParseError },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("edges[{edge}] references unknown node `{node}`")]
    DanglingEndpoint { edge: usize, node: String },
    #[error("no entry node")]
    NoEntryNode,
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

impl GraphError {
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            GraphError::DuplicateNode(_) | GraphError::DanglingEndpoint { .. } | GraphError::NoEntryNode
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

impl ValidationIssue {
    pub fn error(location: impl Into<String>, message: impl Into<String>) -> Self {
        ValidationIssue { severity: Severity::Error, location: location.into(), message: message.into() }
    }

    pub fn warning(location: impl Into<String>, message: impl Into<String>) -> Self {
        ValidationIssue { severity: Severity::Warning, location: location.into(), message: message.into() }
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.location, self.message)
    }
}

/// Immutable care graph. Edges keep document order.
#[derive(Debug, Clone, PartialEq)]
pub struct CareGraph {
    pub id: String,
    pub cancer_type: String,
    pub guideline_version: String,
    nodes: BTreeMap<String, CareNode>,
    edges: Vec<CareEdge>,
    rank: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct GraphView<'a> {
    id: &'a str,
    cancer_type: &'a str,
    guideline_version: &'a str,
    nodes: Vec<&'a CareNode>,
    edges: &'a [CareEdge],
}

impl Serialize for CareGraph {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        GraphView {
            id: &self.id,
            cancer_type: &self.cancer_type,
            guideline_version: &self.guideline_version,
            nodes: self.nodes.values().collect(),
            edges: &self.edges,
        }
        .serialize(serializer)
    }
}

/// Parses a care-graph document and checks its structure.
pub fn load_graph(document: &str) -> Result<CareGraph, GraphError> {
    let doc: GraphDocument = serde_json::from_str(document).map_err(|e| GraphError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let edges = doc
        .edges
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let condition = match e.condition.as_deref().map(str::trim) {
                None | Some("ALWAYS") | Some("") => EdgeCondition::Always,
                Some(text) => EdgeCondition::Rule(
                    parse_rule(text).map_err(|source| GraphError::Condition { edge: i, source })?,
                ),
            };
            Ok(CareEdge { from: e.from, to: e.to, condition, label: e.label })
        })
        .collect::<Result<Vec<_>, GraphError>>()?;
    CareGraph::from_parts(doc.id, doc.cancer_type, doc.guideline_version, doc.nodes, edges)
}

impl CareGraph {
    /// Assembles a graph, rejecting duplicate ids, dangling edges and an empty
    /// node set.
    pub fn from_parts(
        id: String,
        cancer_type: String,
        guideline_version: String,
        node_list: Vec<CareNode>,
        edges: Vec<CareEdge>,
    ) -> Result<CareGraph, GraphError> {
        if node_list.is_empty() {
            return Err(GraphError::NoEntryNode);
        }
        let mut nodes = BTreeMap::new();
        for node in node_list {
            let id = node.id.clone();
            if nodes.insert(id.clone(), node).is_some() {
                return Err(GraphError::DuplicateNode(id));
            }
        }
        for (i, e) in edges.iter().enumerate() {
            for end in [&e.from, &e.to] {
                if !nodes.contains_key(end) {
                    return Err(GraphError::DanglingEndpoint { edge: i, node: end.clone() });
                }
            }
        }
        let mut graph = CareGraph { id, cancer_type, guideline_version, nodes, edges, rank: BTreeMap::new() };
        graph.rank = graph
            .topological_order()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        Ok(graph)
    }

    pub fn node(&self, id: &str) -> Option<&CareNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &CareNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[CareEdge] {
        &self.edges
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    /// Explicitly flagged entry nodes, else nodes with no incoming edge.
    /// Lexicographic order.
    pub fn entry_nodes(&self) -> Vec<String> {
        let flagged: Vec<String> = self.nodes.values().filter(|n| n.entry).map(|n| n.id.clone()).collect();
        if !flagged.is_empty() {
            return flagged;
        }
        let targets: BTreeSet<&str> = self.edges.iter().map(|e| e.to.as_str()).collect();
        self.nodes.keys().filter(|id| !targets.contains(id.as_str())).cloned().collect()
    }

    /// Outgoing edges of `node` in document order.
    pub fn successors(&self, node: &str) -> Result<Vec<&CareEdge>, GraphError> {
        if !self.contains(node) {
            return Err(GraphError::UnknownNode(node.to_owned()));
        }
        Ok(self.edges.iter().filter(|e| e.from == node).collect())
    }

    /// Incoming edges of `node` in document order.
    pub fn predecessors(&self, node: &str) -> Result<Vec<&CareEdge>, GraphError> {
        if !self.contains(node) {
            return Err(GraphError::UnknownNode(node.to_owned()));
        }
        Ok(self.edges.iter().filter(|e| e.to == node).collect())
    }

    /// Nodes listing `code`, lexicographic order.
    pub fn find_nodes_by_code(&self, code: &Code) -> Vec<String> {
        self.nodes.values().filter(|n| n.codes.contains(code)).map(|n| n.id.clone()).collect()
    }

    /// Position of `node` in the topological-then-lexicographic order.
    pub fn rank_of(&self, node: &str) -> Option<usize> {
        self.rank.get(node).copied()
    }

    /// Kahn's algorithm taking the lexicographically smallest ready node
    /// first; nodes left on cycles follow in lexicographic order.
    fn topological_order(&self) -> Vec<String> {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for e in &self.edges {
            *indegree.get_mut(e.to.as_str()).expect("endpoints checked") += 1;
        }
        let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut placed = BTreeSet::new();
        while let Some(next) = ready.pop_first() {
            order.push(next.to_owned());
            placed.insert(next);
            for e in self.edges.iter().filter(|e| e.from == next) {
                let d = indegree.get_mut(e.to.as_str()).expect("endpoints checked");
                *d -= 1;
                if *d == 0 {
                    ready.insert(e.to.as_str());
                }
            }
        }
        order.extend(self.nodes.keys().filter(|k| !placed.contains(k.as_str())).cloned());
        order
    }

    /// Checks every graph invariant and that guideline references resolve.
    pub fn validate(&self, registry: &GuidelineRegistry) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        if self.entry_nodes().is_empty() {
            issues.push(ValidationIssue::error("graph", "no entry node"));
        }
        for node in self.nodes.values() {
            let at = format!("nodes.{}", node.id);
            for gid in &node.guideline_ids {
                if !registry.contains_id(gid) {
                    issues.push(ValidationIssue::error(
                        format!("{at}.guideline_ids"),
                        format!("guideline `{gid}` not found in registry"),
                    ));
                }
            }
            for code in node.codes.iter().filter(|c| !c.has_known_namespace()) {
                issues.push(ValidationIssue::warning(
                    format!("{at}.codes"),
                    format!("code `{code}` uses unknown namespace `{}`", code.namespace()),
                ));
            }
        }
        for (i, edge) in self.edges.iter().enumerate() {
            let at = format!("edges[{i}]");
            for end in [&edge.from, &edge.to] {
                if !self.contains(end) {
                    issues.push(ValidationIssue::error(at.clone(), format!("unknown node `{end}`")));
                }
            }
            if let EdgeCondition::Rule(rule) = &edge.condition {
                if let Err(e) = rule.validate() {
                    issues.push(ValidationIssue::error(format!("{at}.condition"), e.to_string()));
                }
                for code in rule.codes().iter().filter(|c| !c.has_known_namespace()) {
                    issues.push(ValidationIssue::warning(
                        format!("{at}.condition"),
                        format!("code `{code}` uses unknown namespace `{}`", code.namespace()),
                    ));
                }
            }
        }
        issues
    }
}
