//! Text dump of a trace, one line per event in global merged order:
//! kind name, absolute seconds.micros, pid (or "-"), payload.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::ids::Pid;
use crate::trace::{merge_cpu_events, TraceFile};

/// Renders the trace as text. `pid_annotations` maps merged-event indices
/// (the same order `attribute_pids` produces) to the owning pid; events
/// without an annotation print "-".
pub fn dump_trace(trace: &TraceFile, pid_annotations: Option<&BTreeMap<usize, Pid>>) -> String {
    let events = trace.events();
    let merged = merge_cpu_events(&events);
    let mut out = String::new();
    for (index, ev) in merged.iter().enumerate() {
        let pid = pid_annotations
            .and_then(|m| m.get(&index))
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".to_string());
        let payload = ev.kind.payload_text();
        if payload.is_empty() {
            writeln!(out, "{} {} {}", ev.kind.name(), ev.ts, pid).unwrap();
        } else {
            writeln!(out, "{} {} {} {}", ev.kind.name(), ev.ts, pid, payload).unwrap();
        }
    }
    out
}
