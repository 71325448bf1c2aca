//! Deterministic fixed-step orchestrator.
//!
//! Three nested cadences: 100 Hz vehicle physics, 20 Hz sensing, 10 Hz
//! messaging / identification / management. Within a management tick the
//! phase order is: sense, CAV publish, infrastructure
//! (deliver + identify + manage), infrastructure publish, CAV deliver,
//! CAV plan, then physics sub-steps. All randomness comes from the
//! scenario seed; wall-clock time is measured but never fed back into the
//! simulation.

mod scenario;
mod trace;

pub use scenario::{profile_velocity, Scenario, VehicleKind, VehicleSpec};
pub use trace::{
    summarize_trace, summarize_trace_file, write_trace, PhysicsFrame, TickRecord, Trace,
    TraceSummary,
};

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dynamics::{idm_velocity, pure_pursuit_steer, step_bicycle, ControlInput, DynamicsError, VehicleState};
use crate::geom::OrientedBox;
use crate::hv_ident::{identify_hvs, HvMemory};
use crate::manager::{assign_priorities, hv_occupied_union, resolve_velocities, AgentKind};
use crate::perception::{sense_scored, Detection, ScoredDetection};
use crate::road_map::MapError;
use crate::v2x::{
    make_cav_message, AgentId, BusError, DeliveryKind, Envelope, InfraMessage, Payload, SimBus,
};

/// Agent id of the roadside unit.
pub const INFRA_ID: AgentId = 1000;

/// Physics step, seconds.
pub const PHYS_DT: f64 = 0.01;
/// Physics ticks per sensing tick (20 Hz).
const SENSE_EVERY: u64 = 5;
/// Physics ticks per management tick (10 Hz).
const MANAGE_EVERY: u64 = 10;
/// Pure-pursuit lookahead, meters.
const LOOKAHEAD: f64 = 0.3;
/// Lateral tolerance when searching for an IDM leader on the own path.
const LEADER_LATERAL: f64 = 0.2;
/// Minimum free space required to spawn, meters.
const SPAWN_CLEARANCE: f64 = 0.45;
/// A vehicle this close to its route end (arclength) is done.
const GOAL_TOLERANCE: f64 = 0.03;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Validation(String),
}

/// Two vehicles' actual (uninflated) footprints overlapped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent {
    pub tick: u64,
    pub t: f64,
    pub a: AgentId,
    pub b: AgentId,
}

/// Wall-clock cost of the infrastructure modules in one management tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingSample {
    pub tick: u64,
    pub detection_ms: f64,
    pub identification_ms: f64,
    pub management_ms: f64,
}

impl TimingSample {
    pub fn total_ms(&self) -> f64 {
        self.detection_ms + self.identification_ms + self.management_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

fn stats_over(values: impl Iterator<Item = f64>) -> Option<TimingStats> {
    let mut n = 0usize;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for v in values {
        n += 1;
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    if n == 0 {
        return None;
    }
    Some(TimingStats {
        min,
        max,
        mean: sum / n as f64,
    })
}

/// Aggregated results of a run.
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub timing: Vec<TimingSample>,
    pub collision_events: Vec<CollisionEvent>,
    /// Spawn-to-goal times for vehicles that finished their route.
    pub travel_times: BTreeMap<AgentId, f64>,
    /// Commands strictly below the ladder top: (tick, agent, v_ref).
    pub yield_events: Vec<(u64, AgentId, f64)>,
    /// Floor-at-zero residual conflicts: (tick, agent).
    pub floor_events: Vec<(u64, AgentId)>,
}

impl Metrics {
    pub fn detection_stats(&self) -> Option<TimingStats> {
        stats_over(self.timing.iter().map(|s| s.detection_ms))
    }

    pub fn identification_stats(&self) -> Option<TimingStats> {
        stats_over(self.timing.iter().map(|s| s.identification_ms))
    }

    pub fn management_stats(&self) -> Option<TimingStats> {
        stats_over(self.timing.iter().map(|s| s.management_ms))
    }

    pub fn total_stats(&self) -> Option<TimingStats> {
        stats_over(self.timing.iter().map(|s| s.total_ms()))
    }

    /// Min/max/average table, one row per module plus the total.
    pub fn timing_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<26}{:>10}{:>10}{:>10}\n",
            "Module", "Min.", "Max.", "Average"
        ));
        let rows = [
            ("Object Detection", self.detection_stats()),
            ("HV Identification", self.identification_stats()),
            ("Intersection Management", self.management_stats()),
            ("Total", self.total_stats()),
        ];
        for (name, stats) in rows {
            match stats {
                Some(s) => out.push_str(&format!(
                    "{:<26}{:>10.3}{:>10.3}{:>10.3}\n",
                    name, s.min, s.max, s.mean
                )),
                None => out.push_str(&format!("{name:<26}{:>10}{:>10}{:>10}\n", "-", "-", "-")),
            }
        }
        out
    }
}

struct Agent {
    spec: VehicleSpec,
    state: VehicleState,
    control: ControlInput,
    spawned: bool,
    spawned_at: f64,
    done: bool,
}

impl Agent {
    fn active(&self) -> bool {
        self.spawned && !self.done
    }
}

/// Runs a scenario to completion.
pub fn run_scenario(s: &Scenario) -> Result<(Trace, Metrics), SimError> {
    run_scenario_with_tamper(s, &mut |_, _| {})
}

/// Like [`run_scenario`], with a hook that may edit each sensed detection
/// frame (drop or inject detections) before the infrastructure sees it.
/// The hook runs after the noise draw, so it does not disturb the random
/// stream.
pub fn run_scenario_with_tamper(
    s: &Scenario,
    tamper: &mut dyn FnMut(f64, &mut Vec<ScoredDetection>),
) -> Result<(Trace, Metrics), SimError> {
    let bus_seed = s.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(2);
    let mut bus = SimBus::new(s.bus.clone(), bus_seed);
    bus.register(INFRA_ID);

    let mut agents: BTreeMap<AgentId, Agent> = s
        .vehicles
        .iter()
        .map(|spec| {
            (
                spec.id,
                Agent {
                    state: spec.spawn,
                    control: ControlInput::default(),
                    spec: spec.clone(),
                    spawned: false,
                    spawned_at: 0.0,
                    done: false,
                },
            )
        })
        .collect();

    let intersection = s.intersection().clone();
    let mut memory = HvMemory::new();
    let mut entry_log: BTreeMap<AgentId, f64> = BTreeMap::new();
    let mut latest_frame: Vec<ScoredDetection> = Vec::new();
    let mut latest_det_ms = 0.0f64;

    let mut trace = Trace {
        seed: s.seed,
        duration: s.duration,
        ..Trace::default()
    };
    let mut metrics = Metrics::default();

    let n_phys = (s.duration / PHYS_DT).round().max(1.0) as u64;
    for k in 0..n_phys {
        let t = k as f64 * PHYS_DT;

        // spawning (deferred while the spawn point is blocked)
        let occupied: Vec<(AgentId, crate::geom::Point2)> = agents
            .values()
            .filter(|a| a.active())
            .map(|a| (a.spec.id, a.state.position()))
            .collect();
        for agent in agents.values_mut() {
            if agent.spawned || agent.spec.spawn_time > t + 1e-9 {
                continue;
            }
            let clear = occupied
                .iter()
                .all(|(_, p)| p.dist(agent.spec.spawn.position()) >= SPAWN_CLEARANCE);
            if clear {
                agent.spawned = true;
                agent.spawned_at = t;
                agent.state = agent.spec.spawn;
                if agent.spec.kind == VehicleKind::Cav {
                    bus.register(agent.spec.id);
                }
            }
        }

        // 20 Hz sensing
        if k % SENSE_EVERY == 0 {
            let frame = crate::perception::GroundTruthFrame {
                t,
                vehicles: agents
                    .values()
                    .filter(|a| a.active())
                    .map(|a| crate::perception::TruthVehicle {
                        id: a.spec.id,
                        state: a.state,
                        length: a.spec.params.length,
                        width: a.spec.params.width,
                        is_cav: a.spec.kind == VehicleKind::Cav,
                    })
                    .collect(),
            };
            let started = Instant::now();
            let mut dets = sense_scored(&frame, &s.noise, &s.bus.v2i_region);
            latest_det_ms = started.elapsed().as_secs_f64() * 1e3;
            tamper(t, &mut dets);
            latest_frame = dets;
        }

        // 10 Hz messaging + identification + management
        if k % MANAGE_EVERY == 0 {
            let tick = k / MANAGE_EVERY;
            bus.begin_tick(tick);

            let states: Vec<(AgentId, VehicleKind, VehicleState)> = agents
                .values()
                .filter(|a| a.active())
                .map(|a| (a.spec.id, a.spec.kind, a.state))
                .collect();

            // phase: CAV publish
            for agent in agents.values().filter(|a| a.active()) {
                if agent.spec.kind != VehicleKind::Cav {
                    continue;
                }
                let msg = make_cav_message(&agent.state, &agent.spec.path, agent.spec.id, t);
                bus.publish(Envelope {
                    sender_position: agent.state.position(),
                    publish_time: t,
                    payload: Payload::Cav(msg),
                })?;
            }

            // phase: infrastructure
            let msgs = bus.deliver_to_infra(INFRA_ID);
            let detections: Vec<Detection> =
                latest_frame.iter().map(|d| d.detection).collect();

            let started = Instant::now();
            let (estimates, next_memory) =
                identify_hvs(&detections, &msgs, &memory, &s.thresholds, &s.graph, t);
            memory = next_memory;
            let identification_ms = started.elapsed().as_secs_f64() * 1e3;

            let started = Instant::now();
            for m in &msgs {
                if intersection.contains(m.position()) {
                    entry_log.entry(m.sender_id).or_insert(t);
                }
            }
            let table = assign_priorities(&msgs, &estimates, &entry_log, &intersection);
            let footprint = (s.manager.vehicle_length, s.manager.vehicle_width);
            let hv_regions: Vec<_> = table
                .entries
                .iter()
                .filter(|e| e.kind == AgentKind::Hv)
                .filter_map(|e| estimates.iter().find(|h| h.track_id == e.agent))
                .map(|h| hv_occupied_union(h, &s.graph, &s.manager, footprint))
                .collect();
            let resolution = resolve_velocities(&table, &msgs, &hv_regions, &s.manager);
            let management_ms = started.elapsed().as_secs_f64() * 1e3;

            metrics.timing.push(TimingSample {
                tick,
                detection_ms: latest_det_ms,
                identification_ms,
                management_ms,
            });
            for (id, v) in &resolution.commands {
                if *v < s.manager.ladder_value(0) {
                    metrics.yield_events.push((tick, *id, *v));
                }
            }
            for id in &resolution.floored {
                metrics.floor_events.push((tick, *id));
            }

            // phase: infrastructure publish
            for (id, v) in &resolution.commands {
                bus.publish(Envelope {
                    sender_position: intersection.polygon.vertices()[0],
                    publish_time: t,
                    payload: Payload::Infra(InfraMessage {
                        infra_id: INFRA_ID,
                        t_stamp: t,
                        target_id: *id,
                        v_ref: *v,
                    }),
                })?;
            }

            // phase: CAV deliver + plan (HVs plan from their script)
            let ids: Vec<AgentId> = agents
                .iter()
                .filter(|(_, a)| a.active())
                .map(|(id, _)| *id)
                .collect();
            for id in ids {
                let (pos, kind, spawned_at, v_now) = {
                    let a = &agents[&id];
                    (a.state.position(), a.spec.kind, a.spawned_at, a.state.v)
                };
                let v_ref = match kind {
                    VehicleKind::Hv => {
                        let a = &agents[&id];
                        profile_velocity(&a.spec.speed_profile, t - spawned_at)
                    }
                    VehicleKind::Cav => {
                        let commands = bus.deliver(id, pos, DeliveryKind::V2i);
                        let commanded = commands.iter().rev().find_map(|p| match p {
                            Payload::Infra(m) => Some(m.v_ref),
                            _ => None,
                        });
                        match commanded {
                            Some(v) => v,
                            None => {
                                // no advisory in range: plain car-following
                                let heard = bus.deliver(id, pos, DeliveryKind::V2v);
                                let a = &agents[&id];
                                let (gap, leader_v) = idm_leader(a, &heard);
                                idm_velocity(v_now, gap, leader_v, &a.spec.idm, 0.1)
                            }
                        }
                    }
                };
                let agent = agents.get_mut(&id).unwrap();
                let steer =
                    pure_pursuit_steer(&agent.state, &agent.spec.path, LOOKAHEAD, &agent.spec.params);
                agent.control = ControlInput {
                    v_ref,
                    delta: steer.delta,
                };
            }

            trace.records.push(TickRecord {
                tick,
                t,
                states,
                cav_messages: msgs,
                bus_events: bus.take_events(),
                detections: latest_frame.clone(),
                estimates,
                table,
                commands: resolution.commands,
                iterations: resolution.iterations,
                floored: resolution.floored,
            });
        }

        // 100 Hz physics (state snapshot first, then integrate)
        trace.physics.push(PhysicsFrame {
            tick: k,
            t,
            vehicles: agents
                .values()
                .filter(|a| a.active())
                .map(|a| (a.spec.id, a.state, a.spec.params.length, a.spec.params.width))
                .collect(),
        });
        for agent in agents.values_mut() {
            if !agent.active() {
                continue;
            }
            agent.state = step_bicycle(&agent.state, &agent.control, &agent.spec.params, PHYS_DT)?;
            let (s_proj, _) = agent.spec.path.project(agent.state.position());
            if s_proj >= agent.spec.path.total_length() - GOAL_TOLERANCE {
                agent.done = true;
                metrics
                    .travel_times
                    .insert(agent.spec.id, t + PHYS_DT - agent.spawned_at);
                bus.unregister(agent.spec.id);
            }
        }
    }

    metrics.collision_events = check_collisions(&trace);
    Ok((trace, metrics))
}

fn idm_leader(agent: &Agent, heard: &[Payload]) -> (f64, f64) {
    let path = &agent.spec.path;
    let (s_ego, _) = path.project(agent.state.position());
    let mut best: Option<(f64, f64)> = None;
    for p in heard {
        let Payload::Cav(m) = p else { continue };
        let (s_other, lateral) = {
            let (s, d) = path.project(m.position());
            (s, d)
        };
        if lateral <= LEADER_LATERAL && s_other > s_ego + 1e-9 {
            let gap = (s_other - s_ego - agent.spec.params.length).max(1e-3);
            if best.map_or(true, |(g, _)| gap < g) {
                best = Some((gap, m.v));
            }
        }
    }
    best.unwrap_or((f64::INFINITY, 0.0))
}

/// Sweeps the 100 Hz history for overlapping (uninflated) footprints.
/// Events are reported once per pair per contact episode.
pub fn check_collisions(trace: &Trace) -> Vec<CollisionEvent> {
    let mut events = Vec::new();
    let mut touching: std::collections::BTreeSet<(AgentId, AgentId)> = Default::default();
    for frame in &trace.physics {
        let mut now: std::collections::BTreeSet<(AgentId, AgentId)> = Default::default();
        for i in 0..frame.vehicles.len() {
            let (ida, sa, la, wa) = frame.vehicles[i];
            let box_a = OrientedBox::new(sa.position(), sa.psi, la, wa);
            for &(idb, sb, lb, wb) in &frame.vehicles[i + 1..] {
                let box_b = OrientedBox::new(sb.position(), sb.psi, lb, wb);
                if box_a.intersects(&box_b) {
                    let pair = (ida.min(idb), ida.max(idb));
                    now.insert(pair);
                    if !touching.contains(&pair) {
                        events.push(CollisionEvent {
                            tick: frame.tick,
                            t: frame.t,
                            a: pair.0,
                            b: pair.1,
                        });
                    }
                }
            }
        }
        touching = now;
    }
    events
}

/// Writes the run artifacts into `out_dir`: `trace.txt`, `commands.csv`
/// and `collisions.txt` are byte-deterministic; `timing.txt` reflects
/// wall-clock measurements. Returns the written paths.
pub fn emit_reports(
    trace: &Trace,
    metrics: &Metrics,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, SimError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let trace_path = out_dir.join("trace.txt");
    let mut f = std::fs::File::create(&trace_path)?;
    write_trace(trace, &mut f)?;
    written.push(trace_path);

    let commands_path = out_dir.join("commands.csv");
    let mut f = std::fs::File::create(&commands_path)?;
    writeln!(f, "tick,t,agent,v_ref,iterations")?;
    for r in &trace.records {
        for (id, v) in &r.commands {
            let iters = r.iterations.get(id).copied().unwrap_or(0);
            writeln!(f, "{},{:?},{},{:?},{}", r.tick, r.t, id, v, iters)?;
        }
    }
    written.push(commands_path);

    let collisions_path = out_dir.join("collisions.txt");
    let mut f = std::fs::File::create(&collisions_path)?;
    writeln!(f, "collisions {}", metrics.collision_events.len())?;
    for e in &metrics.collision_events {
        writeln!(f, "tick {} t {:?} pair {} {}", e.tick, e.t, e.a, e.b)?;
    }
    written.push(collisions_path);

    let timing_path = out_dir.join("timing.txt");
    std::fs::write(&timing_path, metrics.timing_table())?;
    written.push(timing_path);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collision_dedup_per_episode() {
        // two boxes overlap for a few frames, separate, then overlap again
        let mk = |t: u64, x: f64| PhysicsFrame {
            tick: t,
            t: t as f64 * PHYS_DT,
            vehicles: vec![
                (1, VehicleState::new(0.0, 0.0, 0.0, 0.0), 0.3, 0.15),
                (2, VehicleState::new(x, 0.0, 0.0, 0.0), 0.3, 0.15),
            ],
        };
        let trace = Trace {
            physics: vec![mk(0, 0.1), mk(1, 0.15), mk(2, 2.0), mk(3, 0.05)],
            ..Trace::default()
        };
        let events = check_collisions(&trace);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].tick, 0);
        assert_eq!(events[1].tick, 3);
    }

    #[test]
    fn overlapping_spawn_is_one_event_at_tick_zero() {
        let trace = Trace {
            physics: vec![PhysicsFrame {
                tick: 0,
                t: 0.0,
                vehicles: vec![
                    (1, VehicleState::new(0.0, 0.0, 0.0, 0.0), 0.3, 0.15),
                    (2, VehicleState::new(0.1, 0.02, 0.3, 0.0), 0.3, 0.15),
                ],
            }],
            ..Trace::default()
        };
        let events = check_collisions(&trace);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].tick, 0);
    }

    #[test]
    fn grazing_pass_is_no_event() {
        // 1 cm clearance between uninflated footprints
        let trace = Trace {
            physics: vec![PhysicsFrame {
                tick: 0,
                t: 0.0,
                vehicles: vec![
                    (1, VehicleState::new(0.0, 0.0, 0.0, 0.2), 0.3, 0.15),
                    (2, VehicleState::new(0.0, 0.16, 0.0, 0.2), 0.3, 0.15),
                ],
            }],
            ..Trace::default()
        };
        assert!(check_collisions(&trace).is_empty());
    }

    #[test]
    fn timing_table_has_four_rows() {
        let metrics = Metrics {
            timing: vec![TimingSample {
                tick: 0,
                detection_ms: 0.5,
                identification_ms: 0.1,
                management_ms: 0.2,
            }],
            ..Metrics::default()
        };
        let table = metrics.timing_table();
        assert!(table.contains("Object Detection"));
        assert!(table.contains("HV Identification"));
        assert!(table.contains("Intersection Management"));
        assert!(table.contains("Total"));
        let total = metrics.total_stats().unwrap();
        assert!((total.mean - 0.8).abs() < 1e-12);
    }
}
