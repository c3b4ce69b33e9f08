//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; any failure exits non-zero.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use careflow::assets;
use careflow::code::{Code, FactValue};
use careflow::criteria::{evaluate, parse_rule, Verdict, World};
use careflow::graph::{load_graph, Severity};
use careflow::history::{build_timeline, detect_gaps, journey_of, timeline_export, GapKind, HistoryConfig};
use careflow::navigator::{detect_deviations, DeviationKind};
use careflow::necessity::{determine, select_cpt, ProcedureSpec, Status};
use careflow::orchestrator::{run_scenario, Engine, Scenario};
use careflow::patient::{
    apply_event, load_record, snapshot_at, ClinicalEvent, ClinicalFact, EventKind, PatientRecord, PatientSnapshot,
    Provenance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn day(d: i64) -> chrono::NaiveDate {
    chrono::NaiveDate::from_ymd_opt(2024, 3, 1).unwrap() + chrono::Duration::days(d)
}

// 1 ------------------------------------------------------------------------

fn step_one_recommendations() -> Outcome {
    let start = Instant::now();
    let result = run_scenario(&Scenario::bundled(), None).map_err(|e| e.to_string())?;
    let step = &result.steps[0];
    check(step.step == "ask navigator.next_steps", format!("first step is {}", step.step))?;
    let recs = step.output.as_ref().and_then(Value::as_array).ok_or("no recommendation list")?;
    let got: BTreeSet<&str> = recs.iter().filter_map(|r| r["node"].as_str()).collect();
    let want: BTreeSet<&str> = ["tumor-markers", "cbc-lft", "tvus"].into();
    check(got == want && recs.len() == 3, format!("got {got:?}"))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("{{{}}} in {} ms", got.into_iter().collect::<Vec<_>>().join(", "), elapsed.as_millis()))
}

// 2 ------------------------------------------------------------------------

fn vignette(demo: &[(&str, &str)], codes: &[&str]) -> PatientRecord {
    let record = json!({
        "id": "v",
        "payer_id": "anthem",
        "demographics": demo.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
        "facts": codes.iter().map(|c| json!({"code": c, "effective_date": "2024-03-01"})).collect::<Vec<_>>(),
    });
    load_record(&record.to_string()).unwrap()
}

fn ca125_determinations() -> Outcome {
    let registry = assets::registry();
    let code: Code = "lab:ca125".parse().unwrap();
    let cases: Vec<(&str, PatientRecord, World, Status)> = vec![
        ("post+mass", vignette(&[("menopause", "post")], &["exam:pelvic-mass"]), World::Open, Status::Approved),
        (
            "pre+mass+epithelial",
            vignette(&[("menopause", "pre")], &["exam:pelvic-mass", "dx:suspected-epithelial-ovarian"]),
            World::Open,
            Status::Approved,
        ),
        ("symptoms", vignette(&[], &["sx:bloating", "sx:pelvic-pain"]), World::Open, Status::Approved),
        ("no data/open", vignette(&[], &[]), World::Open, Status::InsufficientInformation),
        ("no data/closed", vignette(&[], &[]), World::Closed, Status::Denied),
    ];
    let mut seen = Vec::new();
    for (name, record, world, want) in cases {
        let snap = snapshot_at(&record, day(0));
        let d = determine(&registry, "anthem", &code, &snap, world).map_err(|e| e.to_string())?;
        check(d.guideline_id == "gl:anthem-ca125", format!("{name}: guideline {}", d.guideline_id))?;
        check(d.status == want, format!("{name}: {} != {want}", d.status))?;
        seen.push(format!("{name}={}", d.status));
    }
    Ok(seen.join(", "))
}

// 3 ------------------------------------------------------------------------

fn cpt_selection() -> Outcome {
    let map = assets::code_map();
    let spec = |contrast: bool| ProcedureSpec {
        modality: "CT".into(),
        body_sites: ["abdomen".to_string(), "pelvis".to_string()].into(),
        attributes: [("contrast".to_string(), careflow::code::Scalar::Bool(contrast))].into(),
    };
    let with = select_cpt(&spec(true), &map).map_err(|e| e.to_string())?;
    let without = select_cpt(&spec(false), &map).map_err(|e| e.to_string())?;
    check(with.to_string() == "cpt:74177", format!("contrast=true -> {with}"))?;
    check(without.to_string() == "cpt:74176", format!("contrast=false -> {without}"))?;
    Ok(format!("contrast=true -> {with}, contrast=false -> {without}"))
}

// 4, 5: random rule trees against an independent truth-table oracle --------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tv {
    T,
    F,
    U,
}

const AND: [[Tv; 3]; 3] = [[Tv::T, Tv::F, Tv::U], [Tv::F, Tv::F, Tv::F], [Tv::U, Tv::F, Tv::U]];
const OR: [[Tv; 3]; 3] = [[Tv::T, Tv::T, Tv::T], [Tv::T, Tv::F, Tv::U], [Tv::T, Tv::U, Tv::U]];
const NOT: [Tv; 3] = [Tv::F, Tv::T, Tv::U];

fn ix(v: Tv) -> usize {
    match v {
        Tv::T => 0,
        Tv::F => 1,
        Tv::U => 2,
    }
}

#[derive(Debug, Clone)]
enum Tree {
    Leaf(usize),
    All(Vec<Tree>),
    Any(Vec<Tree>),
    AtLeast(usize, Vec<Tree>),
    Not(Box<Tree>),
}

impl Tree {
    fn leaves(&self) -> usize {
        match self {
            Tree::Leaf(_) => 1,
            Tree::All(c) | Tree::Any(c) | Tree::AtLeast(_, c) => c.iter().map(Tree::leaves).sum(),
            Tree::Not(c) => c.leaves(),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::All(c) | Tree::Any(c) | Tree::AtLeast(_, c) => 1 + c.iter().map(Tree::depth).max().unwrap_or(0),
            Tree::Not(c) => 1 + c.depth(),
        }
    }

    /// DSL text; leaf i is one of three atom shapes keyed by i.
    fn text(&self) -> String {
        let list = |c: &[Tree]| c.iter().map(Tree::text).collect::<Vec<_>>().join(", ");
        match self {
            Tree::Leaf(i) => match i % 3 {
                0 => format!("has(sx:a{i})"),
                1 => format!("cmp(lab:v{i} >= 35)"),
                _ => format!("demo(k{i}=yes)"),
            },
            Tree::All(c) => format!("ALL({})", list(c)),
            Tree::Any(c) => format!("ANY({})", list(c)),
            Tree::AtLeast(n, c) => format!("ATLEAST({n}, {})", list(c)),
            Tree::Not(c) => format!("NOT({})", c.text()),
        }
    }

    /// Brute force: combinators fold the truth tables; ATLEAST(n) is the
    /// disjunction, over every n-subset of children, of their conjunction.
    fn oracle(&self, a: &[Tv]) -> Tv {
        let fold = |table: &[[Tv; 3]; 3], unit: Tv, vals: &mut dyn Iterator<Item = Tv>| {
            vals.fold(unit, |acc, v| table[ix(acc)][ix(v)])
        };
        match self {
            Tree::Leaf(i) => a[*i],
            Tree::All(c) => fold(&AND, Tv::T, &mut c.iter().map(|t| t.oracle(a))),
            Tree::Any(c) => fold(&OR, Tv::F, &mut c.iter().map(|t| t.oracle(a))),
            Tree::Not(c) => NOT[ix(c.oracle(a))],
            Tree::AtLeast(n, c) => {
                let vals: Vec<Tv> = c.iter().map(|t| t.oracle(a)).collect();
                let mut acc = Tv::F;
                for mask in 0u32..(1 << vals.len()) {
                    if mask.count_ones() as usize != *n {
                        continue;
                    }
                    let conj = fold(&AND, Tv::T, &mut (0..vals.len()).filter(|b| mask & (1 << b) != 0).map(|b| vals[b]));
                    acc = OR[ix(acc)][ix(conj)];
                }
                acc
            }
        }
    }
}

fn gen_tree(rng: &mut ChaCha8Rng, depth: usize, next_leaf: &mut usize) -> Tree {
    if depth == 4 || rng.gen_bool(0.3) {
        let t = Tree::Leaf(*next_leaf);
        *next_leaf += 1;
        return t;
    }
    match rng.gen_range(0..4) {
        3 => Tree::Not(Box::new(gen_tree(rng, depth + 1, next_leaf))),
        k => {
            let n = rng.gen_range(1..=4);
            let children: Vec<Tree> = (0..n).map(|_| gen_tree(rng, depth + 1, next_leaf)).collect();
            match k {
                0 => Tree::All(children),
                1 => Tree::Any(children),
                _ => Tree::AtLeast(rng.gen_range(1..=children.len()), children),
            }
        }
    }
}

/// A tree with depth at most 4 and at most 10 atoms.
fn random_tree(rng: &mut ChaCha8Rng) -> Tree {
    loop {
        let mut leaves = 0;
        let t = gen_tree(rng, 0, &mut leaves);
        if t.leaves() <= 10 && t.depth() <= 4 {
            return t;
        }
    }
}

fn random_assignment(rng: &mut ChaCha8Rng, n: usize) -> Vec<Tv> {
    (0..n).map(|_| [Tv::T, Tv::F, Tv::U][rng.gen_range(0..3)]).collect()
}

/// Realizes an assignment as patient data: MET is a matching fact, NOT_MET
/// a contradicting one, UNKNOWN no data.
fn realize(a: &[Tv]) -> PatientSnapshot {
    let mut facts = BTreeMap::new();
    let mut demographics = BTreeMap::new();
    for (i, v) in a.iter().enumerate() {
        let fact = |code: String, value: Option<FactValue>| {
            let code: Code = code.parse().unwrap();
            (code.clone(), ClinicalFact { code, value, effective_date: day(0), provenance: Provenance::Asserted })
        };
        match (i % 3, v) {
            (_, Tv::U) => {}
            (0, v) => {
                let value = (*v == Tv::F).then(|| FactValue::Label(FactValue::ABSENT.into()));
                let (c, f) = fact(format!("sx:a{i}"), value);
                facts.insert(c, f);
            }
            (1, v) => {
                let n = if *v == Tv::T { 50.0 } else { 10.0 };
                let (c, f) = fact(format!("lab:v{i}"), Some(FactValue::Number(n)));
                facts.insert(c, f);
            }
            (_, v) => {
                demographics.insert(format!("k{i}"), if *v == Tv::T { "yes" } else { "no" }.to_string());
            }
        }
    }
    PatientSnapshot {
        record_id: "oracle".into(),
        payer_id: "anthem".into(),
        as_of: day(0),
        demographics,
        facts,
        events: vec![],
    }
}

fn engine_verdict(tree: &Tree, a: &[Tv], world: World) -> Result<Tv, String> {
    let rule = parse_rule(&tree.text()).map_err(|e| format!("{}: {e}", tree.text()))?;
    Ok(match evaluate(&rule, &realize(a), world).0 {
        Verdict::Met => Tv::T,
        Verdict::NotMet => Tv::F,
        Verdict::Unknown => Tv::U,
    })
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let mut comparisons = 0;
    for _ in 0..1000 {
        let tree = random_tree(&mut rng);
        let n = tree.leaves();
        for _ in 0..8 {
            let a = random_assignment(&mut rng, n);
            let got = engine_verdict(&tree, &a, World::Open)?;
            let want = tree.oracle(&a);
            check(got == want, format!("open: {} with {a:?}: engine {got:?}, oracle {want:?}", tree.text()))?;
            let closed: Vec<Tv> = a.iter().map(|v| if *v == Tv::U { Tv::F } else { *v }).collect();
            let got = engine_verdict(&tree, &a, World::Closed)?;
            let want = tree.oracle(&closed);
            check(got == want, format!("closed: {} with {a:?}: engine {got:?}, oracle {want:?}", tree.text()))?;
            comparisons += 2;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("1000 trees, {comparisons} comparisons, 100% agreement in {} ms", elapsed.as_millis()))
}

fn kleene_resolution() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let (mut cases, mut exhaustive, mut resolutions) = (0, 0, 0usize);
    while cases < 500 {
        let tree = random_tree(&mut rng);
        let a = random_assignment(&mut rng, tree.leaves());
        let root = engine_verdict(&tree, &a, World::Open)?;
        if root == Tv::U {
            continue;
        }
        cases += 1;
        let unknown: Vec<usize> = (0..a.len()).filter(|i| a[*i] == Tv::U).collect();
        let masks: Vec<u64> = if unknown.len() <= 6 {
            exhaustive += 1;
            (0..1u64 << unknown.len()).collect()
        } else {
            (0..64).map(|_| rng.gen()).collect()
        };
        for mask in masks {
            let mut resolved = a.clone();
            for (bit, i) in unknown.iter().enumerate() {
                resolved[*i] = if mask & (1 << bit) != 0 { Tv::T } else { Tv::F };
            }
            let v = engine_verdict(&tree, &resolved, World::Open)?;
            check(v == root, format!("{} with {a:?}: {root:?} became {v:?} under {resolved:?}", tree.text()))?;
            resolutions += 1;
        }
    }
    Ok(format!("{cases} definite cases ({exhaustive} exhaustive), {resolutions} resolutions, all invariant"))
}

// 6 ------------------------------------------------------------------------

fn replay_determinism() -> Outcome {
    let a = run_scenario(&Scenario::bundled(), None).map_err(|e| e.to_string())?;
    let b = run_scenario(&Scenario::bundled(), None).map_err(|e| e.to_string())?;
    let (ja, jb) = (a.to_json(), b.to_json());
    let (la, lb) = (a.audit_export(), b.audit_export());
    check(ja.as_bytes() == jb.as_bytes(), "result JSON differs between runs")?;
    check(la.as_bytes() == lb.as_bytes(), "audit export differs between runs")?;
    Ok(format!("{} result bytes and {} audit bytes identical", ja.len(), la.len()))
}

// 7 ------------------------------------------------------------------------

fn kind_for(node: &careflow::graph::CareNode) -> EventKind {
    use careflow::graph::NodeKind;
    match node.kind {
        NodeKind::SymptomCluster => EventKind::SymptomOnset,
        NodeKind::LabTest => EventKind::Result,
        NodeKind::Imaging | NodeKind::Procedure => EventKind::Imaging,
        NodeKind::Treatment => EventKind::TreatmentStart,
        _ => EventKind::Encounter,
    }
}

fn random_walk(rng: &mut ChaCha8Rng, walk: usize) -> PatientRecord {
    let graph = assets::ovarian_graph();
    let entries = graph.entry_nodes();
    let mut node = entries[rng.gen_range(0..entries.len())].clone();
    let mut date = 0;
    let mut events = Vec::new();
    loop {
        let n = graph.node(&node).unwrap();
        let codes: Vec<&Code> = n.codes.iter().collect();
        for k in 0..rng.gen_range(1..=2) {
            events.push(ClinicalEvent {
                id: format!("w{walk}-{}-{k}", events.len()),
                kind: kind_for(n),
                code: codes[rng.gen_range(0..codes.len())].clone(),
                date: day(date),
                value: None,
                links: vec![],
                attributes: BTreeMap::new(),
            });
        }
        let next = graph.successors(&node).unwrap();
        if next.is_empty() || rng.gen_bool(0.2) {
            break;
        }
        node = next[rng.gen_range(0..next.len())].to.clone();
        date += rng.gen_range(0..10);
    }
    PatientRecord { id: format!("walk-{walk}"), demographics: BTreeMap::new(), payer_id: "anthem".into(), facts: vec![], events }
}

fn deviation_detection() -> Outcome {
    let graph = assets::ovarian_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let mut steps = 0;
    for walk in 0..100 {
        let record = random_walk(&mut rng, walk);
        let journey = journey_of(&record, &graph);
        steps += journey.steps.len();
        let devs = detect_deviations(&journey, &graph);
        check(devs.is_empty(), format!("walk {walk}: {devs:?}"))?;

        let stray = ClinicalEvent {
            id: format!("stray-{walk}"),
            kind: EventKind::Order,
            code: "rx:off-path".parse().unwrap(),
            date: day(rng.gen_range(0..40)),
            value: None,
            links: vec![],
            attributes: BTreeMap::new(),
        };
        let record = apply_event(&record, stray).map_err(|e| e.to_string())?;
        let devs = detect_deviations(&journey_of(&record, &graph), &graph);
        check(
            devs.len() == 1 && devs[0].kind == DeviationKind::OffPathEvent && devs[0].subject == format!("stray-{walk}"),
            format!("walk {walk} with stray event: {devs:?}"),
        )?;
    }
    Ok(format!("100 walks ({steps} steps): 0 deviations; one stray event gives exactly one off-path deviation"))
}

// 8 ------------------------------------------------------------------------

fn gap_detection() -> Outcome {
    let graph = assets::ovarian_graph();
    let window = graph.node("tumor-markers").and_then(|n| n.expected_window_days);
    check(window == Some(14), format!("tumor-markers window {window:?}"))?;
    let order: ClinicalEvent =
        serde_json::from_value(json!({"id": "ord", "kind": "order", "code": "lab:ca125", "date": day(0)})).unwrap();
    let record = apply_event(&vignette(&[], &[]), order).map_err(|e| e.to_string())?;

    let gaps = detect_gaps(&build_timeline(&record), &graph, day(30));
    check(gaps.len() == 1, format!("expected one finding, got {gaps:?}"))?;
    let g = &gaps[0];
    check(
        g.kind == GapKind::UnfulfilledOrder && g.subject == "ord" && g.window_days == 14 && g.observed_delay_days == 16,
        format!("{g:?}"),
    )?;
    let export = timeline_export(&record, &graph, day(30), &HistoryConfig::default());
    check(export.gaps == gaps, "timeline export disagrees")?;

    let result: ClinicalEvent = serde_json::from_value(
        json!({"id": "res", "kind": "result", "code": "lab:ca125", "date": day(3), "value": 20}),
    )
    .unwrap();
    let record = apply_event(&record, result).map_err(|e| e.to_string())?;
    let unfulfilled = detect_gaps(&build_timeline(&record), &graph, day(30))
        .into_iter()
        .filter(|g| g.kind == GapKind::UnfulfilledOrder)
        .count();
    check(unfulfilled == 0, "matching result did not clear the finding")?;
    let export = timeline_export(&record, &graph, day(30), &HistoryConfig::default());
    check(export.gaps.is_empty(), format!("export still has {:?}", export.gaps))?;
    Ok("order day 0, window 14, as_of day 30: one unfulfilled-order finding, delay 16; cleared by result".into())
}

// 9: asset validation against an independent checker on raw JSON ----------

fn independent_errors(graph: &Value, registry: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    let guideline_ids: BTreeSet<&str> =
        registry.as_array().unwrap().iter().filter_map(|g| g["id"].as_str()).collect();
    let nodes = graph["nodes"].as_array().unwrap();
    let mut ids = BTreeSet::new();
    for n in nodes {
        let id = n["id"].as_str().unwrap();
        if !ids.insert(id) {
            errors.push(format!("duplicate node {id}"));
        }
        for g in n["guideline_ids"].as_array().into_iter().flatten() {
            if !guideline_ids.contains(g.as_str().unwrap()) {
                errors.push(format!("{id}: guideline {g} unresolved"));
            }
        }
    }
    let mut targets = BTreeSet::new();
    for e in graph["edges"].as_array().unwrap() {
        for end in ["from", "to"] {
            if !ids.contains(e[end].as_str().unwrap()) {
                errors.push(format!("edge endpoint {}", e[end]));
            }
        }
        targets.insert(e["to"].as_str().unwrap());
    }
    let flagged = nodes.iter().any(|n| n["entry"].as_bool() == Some(true));
    if !flagged && ids.iter().all(|id| targets.contains(id)) {
        errors.push("no entry node".into());
    }
    errors
}

fn asset_validation() -> Outcome {
    let graph_json: Value = serde_json::from_str(assets::OVARIAN_GRAPH).unwrap();
    let registry_json: Value = serde_json::from_str(assets::GUIDELINES).unwrap();

    let engine = Engine::bundled();
    let errors = |issues: Vec<careflow::graph::ValidationIssue>| {
        issues.into_iter().filter(|i| i.severity == Severity::Error).count()
    };
    let bundled_errors = errors(engine.validate());
    let scenario_ok = Scenario::bundled().prepare(None).is_ok();
    let oracle = independent_errors(&graph_json, &registry_json);
    check(bundled_errors == 0 && oracle.is_empty() && scenario_ok, format!("bundled: {bundled_errors} errors, oracle {oracle:?}"))?;

    let mut mutated = graph_json.clone();
    let node = mutated["nodes"].as_array_mut().unwrap().iter_mut().find(|n| n["id"] == "tvus").unwrap();
    node["guideline_ids"].as_array_mut().unwrap().push(json!("gl:dangling"));
    let graph = load_graph(&mutated.to_string()).map_err(|e| e.to_string())?;
    let mutated_errors = errors(Engine::new(graph, assets::registry(), assets::code_map()).validate());
    let oracle = independent_errors(&mutated, &registry_json);
    check(mutated_errors == 1 && oracle.len() == 1, format!("mutated: {mutated_errors} errors, oracle {oracle:?}"))?;
    Ok("bundled graph, registry and scenario: 0 errors; dangling guideline id: exactly 1".into())
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("ovarian step-1 recommendations", step_one_recommendations),
        ("CA-125 determinations", ca125_determinations),
        ("CPT selection", cpt_selection),
        ("evaluator oracle equivalence", oracle_equivalence),
        ("Kleene resolution", kleene_resolution),
        ("replay determinism", replay_determinism),
        ("deviation detection", deviation_detection),
        ("gap detection", gap_detection),
        ("asset validation", asset_validation),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
