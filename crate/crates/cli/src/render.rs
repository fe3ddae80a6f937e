//! Plain-text tables for `--format table`.

use std::collections::BTreeMap;
use std::fmt::Write;

use planout::namespace::{ExperimentStatus, NamespaceAssignment};
use planout::store::StoreState;
use planout::{Evaluation, Namespace, Value};

fn rows(out: &mut String, pairs: &[(String, String)]) {
    let width = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in pairs {
        let _ = writeln!(out, "{k:<width$}  {v}");
    }
}

pub fn evaluation(ev: &Evaluation) -> String {
    let mut out = String::new();
    let mut pairs: Vec<(String, String)> = ev
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect();
    if pairs.is_empty() {
        out.push_str("(no parameters)\n");
    }
    if !ev.in_experiment {
        pairs.push(("(in_experiment)".into(), "false".into()));
    }
    rows(&mut out, &pairs);
    out
}

pub fn status(s: ExperimentStatus) -> &'static str {
    match s {
        ExperimentStatus::Active => "active",
        ExperimentStatus::Deallocated => "deallocated",
    }
}

pub fn defaults(d: &BTreeMap<String, Value>) -> String {
    if d.is_empty() {
        return "(no launch values)\n".into();
    }
    let mut out = String::new();
    let pairs: Vec<_> = d.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
    rows(&mut out, &pairs);
    out
}

/// Runs of consecutive segments with the same owner.
pub fn segment_map(ns: &Namespace) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}: {} segments, {} free",
        ns.name(),
        ns.num_segments(),
        ns.free_segments()
    );
    let map = ns.segment_map();
    let mut start = 0;
    while start < map.len() {
        let owner = &map[start];
        let mut end = start;
        while end + 1 < map.len() && map[end + 1] == *owner {
            end += 1;
        }
        let label = owner.as_deref().unwrap_or("-");
        let _ = writeln!(out, "{start:>6}..{end:<6} {label}");
        start = end + 1;
    }
    out
}

pub fn namespaces(state: &StoreState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version {}", state.version);
    for ns in state.namespaces.values() {
        let _ = writeln!(
            out,
            "{} (unit {}, {}/{} free)",
            ns.name(),
            ns.primary_unit(),
            ns.free_segments(),
            ns.num_segments()
        );
        for e in ns.experiments() {
            let _ = writeln!(out, "  {:<24} {:<12} {} segments", e.name, status(e.status), e.segments.len());
        }
    }
    out
}

pub fn namespace_assignment(a: &NamespaceAssignment) -> String {
    let mut out = String::new();
    let exp = a.experiment.as_deref().unwrap_or("-");
    let _ = writeln!(out, "segment {} experiment {exp}", a.segment);
    let pairs: Vec<_> = a.params().iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
    rows(&mut out, &pairs);
    out
}
