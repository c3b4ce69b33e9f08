//! Assets compiled into the binary: the ovarian diagnosis care graph, the
//! guideline registry, the procedure code map, a patient vignette and the
//! scenario that walks it. Scenario documents refer to them as
//! `bundled:<file name>`.

use crate::graph::{load_graph, CareGraph};
use crate::necessity::{load_code_map, load_registry, CodeMap, GuidelineRegistry};
use crate::patient::{load_record, PatientRecord};

pub const OVARIAN_GRAPH: &str = include_str!("../assets/ovarian-diagnosis.graph.json");
pub const GUIDELINES: &str = include_str!("../assets/guidelines.json");
pub const CODE_MAP: &str = include_str!("../assets/code-map.json");
pub const OVARIAN_VIGNETTE: &str = include_str!("../assets/ovarian-vignette.patient.json");
pub const OVARIAN_SCENARIO: &str = include_str!("../assets/ovarian-diagnosis.scenario.json");

pub const BUNDLED_PREFIX: &str = "bundled:";

const FILES: [(&str, &str); 5] = [
    ("ovarian-diagnosis.graph.json", OVARIAN_GRAPH),
    ("guidelines.json", GUIDELINES),
    ("code-map.json", CODE_MAP),
    ("ovarian-vignette.patient.json", OVARIAN_VIGNETTE),
    ("ovarian-diagnosis.scenario.json", OVARIAN_SCENARIO),
];

/// Text of a bundled asset by file name.
pub fn bundled(name: &str) -> Option<&'static str> {
    FILES.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    FILES.iter().map(|(n, _)| *n)
}

/// Bundled graphs by graph id.
pub fn bundled_graph(id: &str) -> Option<CareGraph> {
    let graph = ovarian_graph();
    (graph.id == id).then_some(graph)
}

pub fn ovarian_graph() -> CareGraph {
    load_graph(OVARIAN_GRAPH).expect("bundled graph is valid")
}

pub fn registry() -> GuidelineRegistry {
    load_registry(GUIDELINES).expect("bundled registry is valid")
}

pub fn code_map() -> CodeMap {
    load_code_map(CODE_MAP).expect("bundled code map is valid")
}

pub fn ovarian_vignette() -> PatientRecord {
    load_record(OVARIAN_VIGNETTE).expect("bundled vignette is valid")
}
