//! Event trace, written as one JSON object per line.

use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};

use crate::geometry::Position;
use crate::world::{RobotId, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TaskArrived,
    Gossip,
    Negotiate,
    Agree,
    ConflictDetected,
    Move,
    Stop,
    PhaseChanged,
    TaskCompleted,
    TaskTimedOut,
    RobotDead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub seq: u64,
    pub kind: EventKind,
    pub subjects: Vec<RobotId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
    /// Positions after the event, parallel to `subjects` (moves only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positions: Vec<Position>,
    /// Gossip rounds each subject paid for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub summary: String,
}

pub fn write_jsonl<W: Write>(events: &[TraceEvent], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<R: BufRead>(input: R) -> io::Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        events.push(e);
    }
    Ok(events)
}

/// One readable line per event.
pub fn describe(e: &TraceEvent) -> String {
    let who: Vec<String> = e.subjects.iter().map(ToString::to_string).collect();
    let mut line = format!("[{:>5}] {:?} {}", e.tick, e.kind, who.join(","));
    if let Some(t) = e.task {
        line.push_str(&format!(" {t}"));
    }
    if let Some(r) = e.rounds {
        line.push_str(&format!(" rounds={r}"));
    }
    if !e.summary.is_empty() {
        line.push(' ');
        line.push_str(&e.summary);
    }
    line
}
