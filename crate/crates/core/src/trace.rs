//! Append-only event trace.
//!
//! One JSON object per line with a fixed key set:
//! `{step, rank, op, peer, iter, phase, outcome}`. Events carry no
//! timestamps, so two runs of the same configuration produce byte-identical
//! traces.

use serde::Serialize;

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub rank: usize,
    pub op: &'static str,
    pub peer: Option<usize>,
    pub iter: Option<u64>,
    pub phase: Option<u8>,
    pub outcome: String,
}

/// Collects every event in memory. Tests inspect the structured events; the
/// harness serializes them to JSONL when a trace file is requested.
#[derive(Debug, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    enabled: bool,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace {
            events: Vec::new(),
            enabled,
        }
    }

    pub fn record(&mut self, ev: TraceEvent) {
        if self.enabled {
            self.events.push(ev);
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("trace event serializes"));
            out.push('\n');
        }
        out
    }
}
