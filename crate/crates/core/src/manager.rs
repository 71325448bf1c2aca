//! Priority-based intersection management: entry-ordered priorities with
//! HVs first, occupied-region prediction with a safety buffer, time-aligned
//! conflict checks, and iterative velocity yielding on a quantized ladder.

use std::collections::BTreeMap;

use crate::dynamics::{predict_from_arclength, VehicleState};
use crate::geom::OrientedBox;
use crate::hv_ident::HvEstimate;
use crate::road_map::{PathRef, Region, RoadGraph};
use crate::v2x::{AgentId, CavMessage};

/// Manager parameters. Footprint dimensions come from the scenario's
/// vehicle parameters; HVs are assumed to share them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManagerConfig {
    pub v_max: f64,
    pub dv_step: f64,
    pub horizon: usize,
    /// Prediction step, seconds.
    pub dt: f64,
    /// Footprint inflation on every side, meters.
    pub b_safe: f64,
    pub tick_rate_hz: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// When set, a conflict is any spatial overlap regardless of step
    /// index (more conservative than the default time-aligned check).
    pub conflict_any_time: bool,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            v_max: 0.5,
            dv_step: 0.1,
            horizon: 30,
            dt: 0.1,
            b_safe: 0.30,
            tick_rate_hz: 10.0,
            vehicle_length: 0.30,
            vehicle_width: 0.15,
            conflict_any_time: false,
        }
    }
}

impl ManagerConfig {
    /// `k`-th rung of the velocity ladder, floored at zero.
    pub fn ladder_value(&self, k: u32) -> f64 {
        (self.v_max - k as f64 * self.dv_step).max(0.0)
    }

    /// Descending candidate velocities: `v_max`, `v_max - dv_step`, ...,
    /// ending with an exact 0.
    pub fn ladder(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0u32;
        loop {
            let v = self.ladder_value(k);
            if v <= 1e-12 {
                break;
            }
            out.push(v);
            k += 1;
        }
        out.push(0.0);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Cav,
    Hv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorityEntry {
    pub agent: AgentId,
    pub kind: AgentKind,
    pub entry_time: f64,
}

/// Service order for the current tick: every present HV first (by first
/// appearance), then CAVs by ascending entry time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorityTable {
    pub entries: Vec<PriorityEntry>,
}

impl PriorityTable {
    pub fn rank_of(&self, agent: AgentId, kind: AgentKind) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.agent == agent && e.kind == kind)
    }
}

/// Time-indexed predicted footprints, one list of inflated rectangles per
/// step. CAV regions hold exactly one rectangle per step; HV regions hold
/// one per surviving candidate route.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupiedRegion {
    pub steps: Vec<Vec<OrientedBox>>,
}

impl OccupiedRegion {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManagerError {
    #[error("occupied regions have different horizons ({0} vs {1})")]
    HorizonMismatch(usize, usize),
}

/// Builds the service order from the agents currently inside the
/// intersection region. CAV entry times come from `entry_log` (first tick
/// the vehicle was seen inside); HVs are ordered by `first_seen`. Ties
/// break toward the lower agent id.
pub fn assign_priorities(
    cav_messages: &[CavMessage],
    hvs: &[HvEstimate],
    entry_log: &BTreeMap<AgentId, f64>,
    intersection: &Region,
) -> PriorityTable {
    let mut hv_entries: Vec<PriorityEntry> = hvs
        .iter()
        .filter(|h| intersection.contains(h.position()))
        .map(|h| PriorityEntry {
            agent: h.track_id,
            kind: AgentKind::Hv,
            entry_time: h.first_seen,
        })
        .collect();
    hv_entries.sort_by(|a, b| a.entry_time.total_cmp(&b.entry_time).then(a.agent.cmp(&b.agent)));

    let mut cav_entries: Vec<PriorityEntry> = cav_messages
        .iter()
        .filter(|m| intersection.contains(m.position()))
        .map(|m| PriorityEntry {
            agent: m.sender_id,
            kind: AgentKind::Cav,
            entry_time: entry_log.get(&m.sender_id).copied().unwrap_or(m.t_stamp),
        })
        .collect();
    cav_entries.sort_by(|a, b| a.entry_time.total_cmp(&b.entry_time).then(a.agent.cmp(&b.agent)));

    hv_entries.extend(cav_entries);
    PriorityTable {
        entries: hv_entries,
    }
}

/// Predicts the region a vehicle sweeps while tracking `path` at constant
/// `v_const`: one footprint per step, inflated by `b_safe` on every side.
pub fn predict_occupied_region(
    state: &VehicleState,
    path: &PathRef,
    v_const: f64,
    cfg: &ManagerConfig,
    footprint: (f64, f64),
) -> OccupiedRegion {
    let (s0, _) = path.project(state.position());
    region_from_arclength(path, s0, v_const, cfg, footprint)
}

fn region_from_arclength(
    path: &PathRef,
    s0: f64,
    v_const: f64,
    cfg: &ManagerConfig,
    footprint: (f64, f64),
) -> OccupiedRegion {
    let poses = predict_from_arclength(path, s0, v_const, cfg.horizon, cfg.dt);
    OccupiedRegion {
        steps: poses
            .into_iter()
            .map(|(p, heading)| {
                vec![OrientedBox::new(
                    p,
                    heading,
                    footprint.0 + 2.0 * cfg.b_safe,
                    footprint.1 + 2.0 * cfg.b_safe,
                )]
            })
            .collect(),
    }
}

/// Predicted region of an HV: the union over its candidate routes, each
/// traversed at `v_max`. An HV with no surviving candidates falls back to
/// every route from its nearest entry (conservative); failing that, it is
/// treated as parked on the spot.
pub fn hv_occupied_union(
    hv: &HvEstimate,
    graph: &RoadGraph,
    cfg: &ManagerConfig,
    footprint: (f64, f64),
) -> OccupiedRegion {
    let state = VehicleState::new(hv.x, hv.y, hv.psi, cfg.v_max);
    let fallback;
    let candidates: &[PathRef] = if hv.candidate_paths.is_empty() {
        fallback = graph.candidate_paths_from_entry(hv.position(), f64::INFINITY);
        &fallback
    } else {
        &hv.candidate_paths
    };
    if candidates.is_empty() {
        let rect = OrientedBox::new(
            hv.position(),
            hv.psi,
            footprint.0 + 2.0 * cfg.b_safe,
            footprint.1 + 2.0 * cfg.b_safe,
        );
        return OccupiedRegion {
            steps: vec![vec![rect]; cfg.horizon],
        };
    }
    let mut steps: Vec<Vec<OrientedBox>> = vec![Vec::with_capacity(candidates.len()); cfg.horizon];
    for path in candidates {
        let region = predict_occupied_region(&state, path, cfg.v_max, cfg, footprint);
        for (h, mut boxes) in region.steps.into_iter().enumerate() {
            steps[h].append(&mut boxes);
        }
    }
    OccupiedRegion { steps }
}

/// Step-aligned conflict test: true iff at some step `h` a rectangle of
/// `a` intersects a rectangle of `b`.
pub fn regions_conflict(a: &OccupiedRegion, b: &OccupiedRegion) -> Result<bool, ManagerError> {
    if a.horizon() != b.horizon() {
        return Err(ManagerError::HorizonMismatch(a.horizon(), b.horizon()));
    }
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        for ra in sa {
            for rb in sb {
                if ra.intersects(rb) {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// Any-time variant: true iff any rectangle of `a` intersects any
/// rectangle of `b`, regardless of step.
pub fn regions_conflict_any_time(a: &OccupiedRegion, b: &OccupiedRegion) -> bool {
    let flat_b: Vec<&OrientedBox> = b.steps.iter().flatten().collect();
    a.steps
        .iter()
        .flatten()
        .any(|ra| flat_b.iter().any(|rb| ra.intersects(rb)))
}

/// Delay-robust yielding probe: the candidate vehicle is assumed possibly
/// late but never early, so its occupancy at step `h` is everything it may
/// have swept so far (current box plus steps `1..=h`), checked against the
/// constraint's instantaneous boxes. A plain step-aligned probe lets a
/// blocked vehicle creep to a stop inside a higher-priority corridor that
/// sweeps past later, which ends in an unresolvable conflict.
fn cumulative_conflict(
    current: &OrientedBox,
    candidate: &OccupiedRegion,
    constraint: &OccupiedRegion,
) -> bool {
    debug_assert_eq!(candidate.horizon(), constraint.horizon());
    let mut cum: Vec<&OrientedBox> = vec![current];
    for (step, theirs) in candidate.steps.iter().zip(&constraint.steps) {
        cum.extend(step.iter());
        for b in theirs {
            // newest boxes are the most likely to collide, scan backwards
            if cum.iter().rev().any(|a| a.intersects(b)) {
                return true;
            }
        }
    }
    false
}

/// Commanded velocity per CAV, values on the ladder.
pub type VelocityCommandSet = BTreeMap<AgentId, f64>;

/// Outcome of one resolution pass.
#[derive(Debug, Clone, Default)]
pub struct Resolution {
    pub commands: VelocityCommandSet,
    /// Ladder probes per CAV (1 = accepted at `v_max`).
    pub iterations: BTreeMap<AgentId, u32>,
    /// CAVs floored at zero with a residual conflict.
    pub floored: Vec<AgentId>,
    /// Accepted region per CAV, the constraint seen by lower priorities.
    pub regions: BTreeMap<AgentId, OccupiedRegion>,
}

/// Processes CAVs in priority order. Each starts at `v_max` and decrements
/// by `dv_step` while its predicted region conflicts with any
/// higher-priority region (HV unions included); the probe is the
/// delay-robust [`cumulative_conflict`] (or a full any-time overlap when
/// `conflict_any_time` is set). The accepted region becomes a constraint
/// for everyone after it. A CAV that conflicts even when stopped is
/// commanded 0 and reported in `floored`.
pub fn resolve_velocities(
    table: &PriorityTable,
    cav_messages: &[CavMessage],
    hv_regions: &[OccupiedRegion],
    cfg: &ManagerConfig,
) -> Resolution {
    let by_id: BTreeMap<AgentId, &CavMessage> =
        cav_messages.iter().map(|m| (m.sender_id, m)).collect();
    let footprint = (cfg.vehicle_length, cfg.vehicle_width);
    let ladder = cfg.ladder();

    let mut constraints: Vec<OccupiedRegion> = hv_regions.to_vec();
    let mut out = Resolution::default();

    for entry in &table.entries {
        if entry.kind != AgentKind::Cav {
            continue;
        }
        let Some(msg) = by_id.get(&entry.agent) else {
            continue;
        };
        let (s0, _) = msg.path.project(msg.position());
        let current_box = OrientedBox::new(
            msg.position(),
            msg.psi,
            footprint.0 + 2.0 * cfg.b_safe,
            footprint.1 + 2.0 * cfg.b_safe,
        );
        let mut accepted: Option<(f64, OccupiedRegion)> = None;
        let mut iterations = 0u32;
        for &v in &ladder {
            iterations += 1;
            let region = region_from_arclength(&msg.path, s0, v, cfg, footprint);
            let conflict = constraints.iter().any(|c| {
                if cfg.conflict_any_time {
                    regions_conflict_any_time(&region, c)
                        || c.steps.iter().flatten().any(|b| b.intersects(&current_box))
                } else {
                    cumulative_conflict(&current_box, &region, c)
                }
            });
            if !conflict {
                accepted = Some((v, region));
                break;
            }
            if v == 0.0 {
                // even the stationary footprint conflicts; command zero
                // anyway and record the residual conflict
                out.floored.push(entry.agent);
                accepted = Some((0.0, region));
            }
        }
        let (v, region) = accepted.expect("ladder always terminates at zero");
        out.commands.insert(entry.agent, v);
        out.iterations.insert(entry.agent, iterations);
        out.regions.insert(entry.agent, region.clone());
        constraints.push(region);
    }
    out
}
