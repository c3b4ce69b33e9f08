use std::fmt;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use super::{Atom, CompareOp, GuidelineRule};
use crate::code::{Code, FactValue};
use crate::patient::PatientSnapshot;

/// Three-valued verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Met,
    NotMet,
    Unknown,
}

impl Verdict {
    pub fn and(self, other: Verdict) -> Verdict {
        match (self, other) {
            (Verdict::NotMet, _) | (_, Verdict::NotMet) => Verdict::NotMet,
            (Verdict::Unknown, _) | (_, Verdict::Unknown) => Verdict::Unknown,
            _ => Verdict::Met,
        }
    }

    pub fn or(self, other: Verdict) -> Verdict {
        match (self, other) {
            (Verdict::Met, _) | (_, Verdict::Met) => Verdict::Met,
            (Verdict::Unknown, _) | (_, Verdict::Unknown) => Verdict::Unknown,
            _ => Verdict::NotMet,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Verdict {
        match self {
            Verdict::Met => Verdict::NotMet,
            Verdict::NotMet => Verdict::Met,
            Verdict::Unknown => Verdict::Unknown,
        }
    }

    pub fn is_definite(self) -> bool {
        self != Verdict::Unknown
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Met => "MET",
            Verdict::NotMet => "NOT_MET",
            Verdict::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How absent data is treated. `Open` keeps it undecided, `Closed` reads it
/// as false.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    #[default]
    Open,
    Closed,
}

impl std::str::FromStr for World {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "open" => Ok(World::Open),
            "closed" => Ok(World::Closed),
            other => Err(format!("unknown world `{other}` (expected open or closed)")),
        }
    }
}

/// What an atom found in the snapshot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomFinding {
    /// Data that satisfied the atom.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub matched: Vec<String>,
    /// Codes with no usable data.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<Code>,
    /// Data present in the snapshot that contradicts the atom.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contradicting: Vec<String>,
}

impl AtomFinding {
    fn matched(s: String) -> Self {
        AtomFinding { matched: vec![s], ..Default::default() }
    }

    fn contradicting(s: String) -> Self {
        AtomFinding { contradicting: vec![s], ..Default::default() }
    }

    fn missing(code: Code) -> Self {
        AtomFinding { missing: vec![code], ..Default::default() }
    }
}

/// Evaluation trace; same shape as the rule it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTrace {
    pub verdict: Verdict,
    #[serde(flatten)]
    pub node: TraceNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "kebab-case")]
pub enum TraceNode {
    Atom {
        atom: String,
        #[serde(flatten)]
        finding: AtomFinding,
    },
    All {
        children: Vec<RuleTrace>,
    },
    Any {
        children: Vec<RuleTrace>,
    },
    AtLeast {
        n: usize,
        children: Vec<RuleTrace>,
    },
    Not {
        child: Box<RuleTrace>,
    },
}

impl RuleTrace {
    /// Total nodes in the trace.
    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(|c| c.node_count()).sum::<usize>()
    }

    pub fn children(&self) -> Vec<&RuleTrace> {
        match &self.node {
            TraceNode::Atom { .. } => vec![],
            TraceNode::All { children } | TraceNode::Any { children } | TraceNode::AtLeast { children, .. } => {
                children.iter().collect()
            }
            TraceNode::Not { child } => vec![child],
        }
    }

    /// Visits every node depth first, parents before children.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a RuleTrace, usize)) {
        self.walk_at(0, f);
    }

    fn walk_at<'a>(&'a self, depth: usize, f: &mut dyn FnMut(&'a RuleTrace, usize)) {
        f(self, depth);
        for c in self.children() {
            c.walk_at(depth + 1, f);
        }
    }

    /// Codes reported missing by UNKNOWN atoms.
    pub fn unknown_codes(&self) -> Vec<Code> {
        let mut out = Vec::new();
        self.walk(&mut |t, _| {
            if let TraceNode::Atom { finding, .. } = &t.node {
                if t.verdict == Verdict::Unknown {
                    out.extend(finding.missing.iter().cloned());
                }
            }
        });
        out
    }
}

fn counts(children: &[RuleTrace]) -> (usize, usize, usize) {
    children.iter().fold((0, 0, 0), |(m, n, u), c| match c.verdict {
        Verdict::Met => (m + 1, n, u),
        Verdict::NotMet => (m, n + 1, u),
        Verdict::Unknown => (m, n, u + 1),
    })
}

/// Propagates verdicts through `rule`, asking `resolve` for each atom.
pub fn evaluate_with<F>(rule: &GuidelineRule, resolve: &mut F) -> RuleTrace
where
    F: FnMut(&Atom) -> (Verdict, AtomFinding),
{
    match rule {
        GuidelineRule::Atom(atom) => {
            let (verdict, finding) = resolve(atom);
            RuleTrace { verdict, node: TraceNode::Atom { atom: atom.to_string(), finding } }
        }
        GuidelineRule::All(rules) => {
            let children: Vec<_> = rules.iter().map(|r| evaluate_with(r, resolve)).collect();
            let verdict = children.iter().fold(Verdict::Met, |acc, c| acc.and(c.verdict));
            RuleTrace { verdict, node: TraceNode::All { children } }
        }
        GuidelineRule::Any(rules) => {
            let children: Vec<_> = rules.iter().map(|r| evaluate_with(r, resolve)).collect();
            let verdict = children.iter().fold(Verdict::NotMet, |acc, c| acc.or(c.verdict));
            RuleTrace { verdict, node: TraceNode::Any { children } }
        }
        GuidelineRule::AtLeast(n, rules) => {
            let children: Vec<_> = rules.iter().map(|r| evaluate_with(r, resolve)).collect();
            let (met, _, unknown) = counts(&children);
            let verdict = if met >= *n {
                Verdict::Met
            } else if met + unknown < *n {
                Verdict::NotMet
            } else {
                Verdict::Unknown
            };
            RuleTrace { verdict, node: TraceNode::AtLeast { n: *n, children } }
        }
        GuidelineRule::Not(rule) => {
            let child = evaluate_with(rule, resolve);
            RuleTrace { verdict: child.verdict.not(), node: TraceNode::Not { child: Box::new(child) } }
        }
    }
}

/// Evaluates `rule` against a snapshot under strong Kleene semantics.
pub fn evaluate(rule: &GuidelineRule, snapshot: &PatientSnapshot, world: World) -> (Verdict, RuleTrace) {
    let trace = evaluate_with(rule, &mut |atom| evaluate_atom(atom, snapshot, world));
    (trace.verdict, trace)
}

fn no_data(code: Code, world: World) -> (Verdict, AtomFinding) {
    let verdict = match world {
        World::Open => Verdict::Unknown,
        World::Closed => Verdict::NotMet,
    };
    (verdict, AtomFinding::missing(code))
}

fn compare(fact: &FactValue, op: CompareOp, literal: &FactValue) -> Option<bool> {
    match (fact, literal) {
        (FactValue::Number(a), FactValue::Number(b)) => Some(match op {
            CompareOp::Lt => a < b,
            CompareOp::Le => a <= b,
            CompareOp::Eq => a == b,
            CompareOp::Ge => a >= b,
            CompareOp::Gt => a > b,
            CompareOp::Ne => a != b,
        }),
        (FactValue::Label(a), FactValue::Label(b)) => match op {
            CompareOp::Eq => Some(a == b),
            CompareOp::Ne => Some(a != b),
            _ => None,
        },
        _ => None,
    }
}

fn describe(code: &Code, value: Option<&FactValue>) -> String {
    match value {
        Some(v) => format!("{code}={v}"),
        None => code.to_string(),
    }
}

fn evaluate_atom(atom: &Atom, snapshot: &PatientSnapshot, world: World) -> (Verdict, AtomFinding) {
    match atom {
        Atom::HasFact(code) => match snapshot.fact(code) {
            Some(f) if f.value.as_ref().is_some_and(FactValue::is_absent_marker) => {
                (Verdict::NotMet, AtomFinding::contradicting(describe(code, f.value.as_ref())))
            }
            Some(f) => (Verdict::Met, AtomFinding::matched(describe(code, f.value.as_ref()))),
            None => no_data(code.clone(), world),
        },
        Atom::Compare { code, op, value } => match snapshot.fact(code) {
            Some(f) => {
                let found = describe(code, f.value.as_ref());
                match &f.value {
                    Some(v) if v.is_absent_marker() => {
                        (Verdict::NotMet, AtomFinding::contradicting(found))
                    }
                    Some(v) => match compare(v, *op, value) {
                        Some(true) => (Verdict::Met, AtomFinding::matched(found)),
                        Some(false) => (Verdict::NotMet, AtomFinding::contradicting(found)),
                        None => no_data(code.clone(), world),
                    },
                    None => no_data(code.clone(), world),
                }
            }
            None => no_data(code.clone(), world),
        },
        Atom::Demo { key, value } => match snapshot.demographics.get(key) {
            Some(v) if v == value => (Verdict::Met, AtomFinding::matched(format!("demo:{key}={v}"))),
            Some(v) => (Verdict::NotMet, AtomFinding::contradicting(format!("demo:{key}={v}"))),
            None => no_data(atom.subject_code(), world),
        },
        Atom::HadEvent { kind, code, within_days } => {
            let mut matching = snapshot
                .events
                .iter()
                .filter(|e| e.kind == *kind && e.code == *code && e.date <= snapshot.as_of);
            let earliest_allowed = within_days.map(|d| snapshot.as_of - Duration::days(i64::from(d)));
            let mut latest = None;
            for e in matching.by_ref() {
                if earliest_allowed.is_none_or(|start| e.date >= start) {
                    return (Verdict::Met, AtomFinding::matched(format!("{} {} on {}", e.id, code, e.date)));
                }
                latest = Some(e);
            }
            match latest {
                Some(e) => (
                    Verdict::NotMet,
                    AtomFinding::contradicting(format!("{} {} on {} outside window", e.id, code, e.date)),
                ),
                None => no_data(code.clone(), world),
            }
        }
    }
}

/// One reasoning line per trace node, indented two spaces per level.
pub fn explain(trace: &RuleTrace) -> Vec<String> {
    let mut lines = Vec::new();
    trace.walk(&mut |t, depth| {
        let indent = "  ".repeat(depth);
        let line = match &t.node {
            TraceNode::Atom { atom, finding } => {
                let mut line = format!("{indent}{atom} -> {}", t.verdict);
                if !finding.matched.is_empty() {
                    line.push_str(&format!("; matched {}", finding.matched.join(", ")));
                }
                if !finding.contradicting.is_empty() {
                    line.push_str(&format!("; found {}", finding.contradicting.join(", ")));
                }
                if !finding.missing.is_empty() {
                    let codes: Vec<String> = finding.missing.iter().map(Code::to_string).collect();
                    let marker = if t.verdict == Verdict::Unknown { "no data" } else { "absent (closed world)" };
                    line.push_str(&format!("; {marker}: {}", codes.join(", ")));
                }
                line
            }
            TraceNode::Not { .. } => format!("{indent}NOT -> {}", t.verdict),
            TraceNode::All { children } | TraceNode::Any { children } | TraceNode::AtLeast { children, .. } => {
                let head = match &t.node {
                    TraceNode::All { .. } => "ALL".to_owned(),
                    TraceNode::Any { .. } => "ANY".to_owned(),
                    TraceNode::AtLeast { n, .. } => format!("ATLEAST({n})"),
                    _ => unreachable!(),
                };
                let (m, n, u) = counts(children);
                format!("{indent}{head} -> {} [met {m}, not met {n}, unknown {u}]", t.verdict)
            }
        };
        lines.push(line);
    });
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::parse_rule;
    use crate::patient::test_support::snapshot;

    const CA125: &str = "ANY(ALL(has(exam:pelvic-mass), demo(menopause=post)), ALL(has(exam:pelvic-mass), has(dx:suspected-epithelial-ovarian), demo(menopause=pre)), ATLEAST(1, has(sx:ascites), has(sx:bloating), has(sx:pelvic-pain), has(sx:early-satiety), has(sx:urinary)))";

    fn atom_verdicts(rule: &str, verdicts: &[Verdict]) -> Verdict {
        let rule = parse_rule(rule).unwrap();
        let mut it = verdicts.iter();
        evaluate_with(&rule, &mut |_| (*it.next().unwrap(), AtomFinding::default())).verdict
    }

    #[test]
    fn kleene_combinators() {
        use Verdict::*;
        assert_eq!(atom_verdicts("ALL(has(sx:a), has(sx:b))", &[Met, Unknown]), Unknown);
        assert_eq!(atom_verdicts("ANY(has(sx:a), has(sx:b))", &[NotMet, Met]), Met);
        assert_eq!(atom_verdicts("ALL(has(sx:a), has(sx:b))", &[NotMet, Unknown]), NotMet);
        assert_eq!(atom_verdicts("ANY(has(sx:a), has(sx:b))", &[NotMet, Unknown]), Unknown);
        assert_eq!(atom_verdicts("NOT(has(sx:a))", &[Unknown]), Unknown);
        assert_eq!(atom_verdicts("NOT(has(sx:a))", &[Met]), NotMet);
    }

    #[test]
    fn atleast_counts() {
        use Verdict::*;
        let r = "ATLEAST(2, has(sx:a), has(sx:b), has(sx:c))";
        assert_eq!(atom_verdicts(r, &[Met, Met, NotMet]), Met);
        assert_eq!(atom_verdicts(r, &[Met, Unknown, NotMet]), Unknown);
        assert_eq!(atom_verdicts(r, &[Met, NotMet, NotMet]), NotMet);
        assert_eq!(atom_verdicts(r, &[Unknown, Unknown, NotMet]), Unknown);
    }

    #[test]
    fn checklist_item_one() {
        let rule = parse_rule(CA125).unwrap();
        let snap = snapshot(&[("menopause", "post")], &["exam:pelvic-mass"]);
        let (verdict, trace) = evaluate(&rule, &snap, World::Open);
        assert_eq!(verdict, Verdict::Met);
        let TraceNode::Any { children } = &trace.node else { panic!() };
        assert_eq!(children[0].verdict, Verdict::Met);
        assert_eq!(children[1].verdict, Verdict::NotMet);
    }

    #[test]
    fn empty_snapshot_open_and_closed() {
        let rule = parse_rule(CA125).unwrap();
        let snap = snapshot(&[], &[]);
        assert_eq!(evaluate(&rule, &snap, World::Open).0, Verdict::Unknown);
        let (verdict, trace) = evaluate(&rule, &snap, World::Closed);
        assert_eq!(verdict, Verdict::NotMet);
        trace.walk(&mut |t, _| assert_ne!(t.verdict, Verdict::Unknown));
    }

    #[test]
    fn absent_marker_contradicts() {
        let rule = parse_rule("has(sx:bloating)").unwrap();
        let mut snap = snapshot(&[], &["sx:bloating"]);
        snap.facts.values_mut().next().unwrap().value = Some(FactValue::Label("absent".into()));
        let (verdict, trace) = evaluate(&rule, &snap, World::Open);
        assert_eq!(verdict, Verdict::NotMet);
        assert_eq!(explain(&trace), ["has(sx:bloating) -> NOT_MET; found sx:bloating=absent"]);
    }

    #[test]
    fn compare_atoms() {
        let mut snap = snapshot(&[], &["lab:ca125"]);
        snap.facts.values_mut().next().unwrap().value = Some(FactValue::Number(90.0));
        let ge = parse_rule("cmp(lab:ca125 >= 35)").unwrap();
        assert_eq!(evaluate(&ge, &snap, World::Open).0, Verdict::Met);
        let lt = parse_rule("cmp(lab:ca125 < 35)").unwrap();
        assert_eq!(evaluate(&lt, &snap, World::Open).0, Verdict::NotMet);
        // label literal against a numeric value carries no usable data
        let eq = parse_rule("cmp(lab:ca125 = high)").unwrap();
        assert_eq!(evaluate(&eq, &snap, World::Open).0, Verdict::Unknown);
        assert_eq!(evaluate(&eq, &snap, World::Closed).0, Verdict::NotMet);
        let missing = parse_rule("cmp(lab:he4 > 70)").unwrap();
        assert_eq!(evaluate(&missing, &snap, World::Open).0, Verdict::Unknown);
    }

    #[test]
    fn explain_lines() {
        let rule = parse_rule(CA125).unwrap();
        let snap = snapshot(&[("menopause", "post")], &["exam:pelvic-mass"]);
        let (_, trace) = evaluate(&rule, &snap, World::Open);
        let lines = explain(&trace);
        assert_eq!(lines.len(), trace.node_count());
        assert_eq!(lines.len(), rule.node_count());
        assert_eq!(lines[0], "ANY -> MET [met 1, not met 1, unknown 1]");
        assert_eq!(lines[2], "    has(exam:pelvic-mass) -> MET; matched exam:pelvic-mass");
        assert!(lines.iter().any(|l| l.contains("has(sx:ascites) -> UNKNOWN; no data: sx:ascites")));
        assert!(lines.iter().any(|l| l.contains("demo(menopause=pre) -> NOT_MET; found demo:menopause=post")));
        assert_eq!(explain(&trace), lines);
    }
}
