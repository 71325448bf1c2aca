//! Run traces: per-management-tick records, a 100 Hz state history for
//! collision checking, and a deterministic text serialization.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::dynamics::VehicleState;
use crate::hv_ident::HvEstimate;
use crate::manager::{AgentKind, PriorityTable, VelocityCommandSet};
use crate::perception::ScoredDetection;
use crate::v2x::{AgentId, BusEvent, CavMessage};

use super::scenario::VehicleKind;
use super::SimError;

/// Everything the infrastructure and vehicles did in one management tick.
#[derive(Debug, Clone)]
pub struct TickRecord {
    pub tick: u64,
    pub t: f64,
    /// Active vehicles at the start of the tick, ordered by id.
    pub states: Vec<(AgentId, VehicleKind, VehicleState)>,
    /// CAV broadcasts the roadside unit heard this tick.
    pub cav_messages: Vec<CavMessage>,
    pub bus_events: Vec<BusEvent>,
    /// Detection frame consumed by identification (sample-and-hold).
    pub detections: Vec<ScoredDetection>,
    pub estimates: Vec<HvEstimate>,
    pub table: PriorityTable,
    pub commands: VelocityCommandSet,
    pub iterations: BTreeMap<AgentId, u32>,
    pub floored: Vec<AgentId>,
}

/// One 100 Hz snapshot: (id, state, length, width) per active vehicle.
#[derive(Debug, Clone)]
pub struct PhysicsFrame {
    pub tick: u64,
    pub t: f64,
    pub vehicles: Vec<(AgentId, VehicleState, f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub seed: u64,
    pub duration: f64,
    pub records: Vec<TickRecord>,
    pub physics: Vec<PhysicsFrame>,
}

/// Writes the management-tick view of a trace. Floats use the shortest
/// round-trippable form, so identical runs produce identical bytes.
pub fn write_trace(trace: &Trace, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "trace v1")?;
    writeln!(w, "seed {}", trace.seed)?;
    writeln!(w, "duration {:?}", trace.duration)?;
    for r in &trace.records {
        writeln!(w, "tick {} t {:?}", r.tick, r.t)?;
        for (id, kind, s) in &r.states {
            let k = match kind {
                VehicleKind::Cav => "cav",
                VehicleKind::Hv => "hv",
            };
            writeln!(w, "s {id} {k} {:?} {:?} {:?} {:?}", s.x, s.y, s.psi, s.v)?;
        }
        for m in &r.cav_messages {
            writeln!(w, "m {} {:?}", m.sender_id, m.t_stamp)?;
        }
        for e in &r.bus_events {
            let rx = e
                .receiver
                .map(|r| r.to_string())
                .unwrap_or_else(|| "-".into());
            writeln!(
                w,
                "e {} {} {rx} {} {:016x}",
                e.kind, e.sender, e.message_kind, e.digest
            )?;
        }
        for d in &r.detections {
            writeln!(
                w,
                "d {:?} {:?} {:?} {:?} {:?} {:?}",
                d.detection.x, d.detection.y, d.detection.psi, d.detection.length,
                d.detection.width, d.score
            )?;
        }
        for h in &r.estimates {
            let mut cands = String::new();
            for p in &h.candidate_paths {
                cands.push_str(&format!(" {}", p.segment_ids().len()));
                for sid in p.segment_ids() {
                    cands.push_str(&format!(" {sid}"));
                }
            }
            writeln!(
                w,
                "h {} {:?} {:?} {:?} {:?} {}{}",
                h.track_id,
                h.x,
                h.y,
                h.psi,
                h.first_seen,
                h.candidate_paths.len(),
                cands
            )?;
        }
        for (rank, e) in r.table.entries.iter().enumerate() {
            let k = match e.kind {
                AgentKind::Cav => "cav",
                AgentKind::Hv => "hv",
            };
            writeln!(w, "p {} {k} {} {:?}", rank + 1, e.agent, e.entry_time)?;
        }
        for (id, v) in &r.commands {
            let iters = r.iterations.get(id).copied().unwrap_or(0);
            writeln!(w, "c {id} {v:?} {iters}")?;
        }
        for id in &r.floored {
            writeln!(w, "f {id}")?;
        }
        writeln!(w, "end")?;
    }
    Ok(())
}

/// Summary extracted from a trace file without reconstructing the run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceSummary {
    pub seed: u64,
    pub duration: f64,
    pub ticks: usize,
    pub agents: Vec<AgentId>,
    pub hv_tracks: Vec<AgentId>,
    pub command_count: usize,
    /// Commands strictly below the maximum commanded value.
    pub yield_count: usize,
    pub floor_count: usize,
    pub detections: usize,
}

pub fn summarize_trace_file(path: impl AsRef<Path>) -> Result<TraceSummary, SimError> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| SimError::Validation(format!("cannot open trace: {e}")))?;
    summarize_trace(std::io::BufReader::new(file))
}

pub fn summarize_trace(reader: impl BufRead) -> Result<TraceSummary, SimError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(SimError::Io)?
        .unwrap_or_default();
    if header.trim() != "trace v1" {
        return Err(SimError::Validation(
            "not a trace file (missing `trace v1` header)".into(),
        ));
    }
    let mut out = TraceSummary::default();
    let mut agents = std::collections::BTreeSet::new();
    let mut hv_tracks = std::collections::BTreeSet::new();
    let mut max_cmd: f64 = 0.0;
    let mut cmds: Vec<f64> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(SimError::Io)?;
        let lineno = lineno + 2;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |msg: &str| SimError::Validation(format!("trace line {lineno}: {msg}"));
        match fields[0] {
            "seed" => {
                out.seed = fields
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad seed"))?;
            }
            "duration" => {
                out.duration = fields
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad duration"))?;
            }
            "tick" => out.ticks += 1,
            "s" => {
                let id: AgentId = fields
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad state line"))?;
                agents.insert(id);
            }
            "h" => {
                let id: AgentId = fields
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad hv line"))?;
                hv_tracks.insert(id);
            }
            "c" => {
                let v: f64 = fields
                    .get(2)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad command line"))?;
                cmds.push(v);
                max_cmd = max_cmd.max(v);
            }
            "f" => out.floor_count += 1,
            "d" => out.detections += 1,
            "m" | "e" | "p" | "end" => {}
            other => return Err(bad(&format!("unknown record `{other}`"))),
        }
    }
    out.command_count = cmds.len();
    out.yield_count = cmds.iter().filter(|&&v| v < max_cmd - 1e-12).count();
    out.agents = agents.into_iter().collect();
    out.hv_tracks = hv_tracks.into_iter().collect();
    Ok(out)
}
