//! Scenario files: TOML with sections for the map, bus, manager, noise,
//! thresholds and the vehicle list. Region fields name polygons defined in
//! the map file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::dynamics::{IdmParams, VehicleParams, VehicleState};
use crate::hv_ident::HvThresholds;
use crate::manager::ManagerConfig;
use crate::perception::NoiseModel;
use crate::road_map::{NodeId, PathRef, Region, RoadGraph, V2I_REGION};
use crate::v2x::{AgentId, BusConfig};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleKind {
    Cav,
    Hv,
}

/// One vehicle of the scenario, fully resolved.
#[derive(Debug, Clone)]
pub struct VehicleSpec {
    pub id: AgentId,
    pub kind: VehicleKind,
    pub start: NodeId,
    pub goal: NodeId,
    pub spawn_time: f64,
    pub spawn: VehicleState,
    /// Piecewise-linear (time, velocity) profile; drives HVs only.
    pub speed_profile: Vec<(f64, f64)>,
    pub params: VehicleParams,
    pub idm: IdmParams,
    pub path: PathRef,
}

/// A fully loaded and validated simulation setup.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub map_path: PathBuf,
    pub graph: RoadGraph,
    pub bus: BusConfig,
    pub manager: ManagerConfig,
    pub noise: NoiseModel,
    pub thresholds: HvThresholds,
    pub vehicles: Vec<VehicleSpec>,
    pub duration: f64,
    pub seed: u64,
    noise_seed_explicit: bool,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Scenario, SimError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| SimError::Validation(format!("scenario: {e}")))?;
        raw.resolve(base_dir)
    }

    /// Overrides the scenario seed (and the derived noise seed unless the
    /// file pinned one explicitly).
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        if !self.noise_seed_explicit {
            self.noise.seed = derived_noise_seed(seed);
        }
    }

    pub fn intersection(&self) -> &Region {
        self.graph
            .intersection_region()
            .expect("validated at load")
    }
}

fn derived_noise_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[allow(dead_code)]
    schema: Option<u32>,
    map: String,
    duration: f64,
    seed: u64,
    #[serde(default)]
    bus: RawBus,
    #[serde(default)]
    manager: RawManager,
    #[serde(default)]
    noise: RawNoise,
    #[serde(default)]
    thresholds: HvThresholds,
    #[serde(default)]
    defaults: RawDefaults,
    #[serde(default, rename = "vehicle")]
    vehicles: Vec<RawVehicle>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawDefaults {
    vehicle: Option<VehicleParams>,
    idm: Option<IdmParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawBus {
    v2v_range: f64,
    publish_rate_hz: f64,
    v2i_region: String,
    latency_ticks: u32,
    drop_prob: f64,
}

impl Default for RawBus {
    fn default() -> Self {
        RawBus {
            v2v_range: 3.0,
            publish_rate_hz: 10.0,
            v2i_region: V2I_REGION.to_string(),
            latency_ticks: 0,
            drop_prob: 0.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawManager {
    v_max: f64,
    dv_step: f64,
    horizon: usize,
    dt: f64,
    b_safe: f64,
    tick_rate_hz: f64,
    conflict_any_time: bool,
}

impl Default for RawManager {
    fn default() -> Self {
        let m = ManagerConfig::default();
        RawManager {
            v_max: m.v_max,
            dv_step: m.dv_step,
            horizon: m.horizon,
            dt: m.dt,
            b_safe: m.b_safe,
            tick_rate_hz: m.tick_rate_hz,
            conflict_any_time: m.conflict_any_time,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawNoise {
    sigma_pos: f64,
    sigma_psi: f64,
    p_fn: f64,
    fp_rate: f64,
    fp_region: String,
    seed: Option<u64>,
}

impl Default for RawNoise {
    fn default() -> Self {
        RawNoise {
            sigma_pos: 0.0,
            sigma_psi: 0.0,
            p_fn: 0.0,
            fp_rate: 0.0,
            fp_region: V2I_REGION.to_string(),
            seed: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVehicle {
    id: AgentId,
    kind: VehicleKind,
    start: NodeId,
    goal: NodeId,
    #[serde(default)]
    spawn_time: f64,
    spawn: Option<RawSpawn>,
    speed_profile: Option<Vec<(f64, f64)>>,
    params: Option<VehicleParams>,
    idm: Option<IdmParams>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpawn {
    x: f64,
    y: f64,
    psi: f64,
    #[serde(default)]
    v: f64,
}

impl RawScenario {
    fn resolve(self, base_dir: &Path) -> Result<Scenario, SimError> {
        if !(self.duration > 0.0) {
            return Err(SimError::Validation(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        let map_path = base_dir.join(&self.map);
        let graph = RoadGraph::load(&map_path)?;
        if graph.intersection_region().is_none() {
            return Err(SimError::Validation(
                "map has no `intersection` region".into(),
            ));
        }
        let lookup_region = |name: &str| -> Result<Region, SimError> {
            graph
                .region(name)
                .cloned()
                .ok_or_else(|| SimError::Validation(format!("map has no region named `{name}`")))
        };

        let bus = BusConfig {
            v2v_range: self.bus.v2v_range,
            v2i_region: lookup_region(&self.bus.v2i_region)?,
            publish_rate_hz: self.bus.publish_rate_hz,
            latency_ticks: self.bus.latency_ticks,
            drop_prob: self.bus.drop_prob,
        };
        if !(bus.v2v_range > 0.0) || !(bus.publish_rate_hz > 0.0) {
            return Err(SimError::Validation(
                "bus range and publish rate must be positive".into(),
            ));
        }

        let default_params = self.defaults.vehicle.unwrap_or_default();
        let manager = ManagerConfig {
            v_max: self.manager.v_max,
            dv_step: self.manager.dv_step,
            horizon: self.manager.horizon,
            dt: self.manager.dt,
            b_safe: self.manager.b_safe,
            tick_rate_hz: self.manager.tick_rate_hz,
            vehicle_length: default_params.length,
            vehicle_width: default_params.width,
            conflict_any_time: self.manager.conflict_any_time,
        };
        if manager.dv_step > manager.v_max || manager.horizon == 0 {
            return Err(SimError::Validation(
                "manager needs dv_step <= v_max and a positive horizon".into(),
            ));
        }

        let noise_seed_explicit = self.noise.seed.is_some();
        let noise = NoiseModel {
            sigma_pos: self.noise.sigma_pos,
            sigma_psi: self.noise.sigma_psi,
            p_fn: self.noise.p_fn,
            fp_rate: self.noise.fp_rate,
            fp_region: lookup_region(&self.noise.fp_region)?,
            seed: self.noise.seed.unwrap_or(derived_noise_seed(self.seed)),
        };
        if !(0.0..=1.0).contains(&noise.p_fn) || noise.fp_rate < 0.0 {
            return Err(SimError::Validation("noise probabilities out of range".into()));
        }

        let default_idm = self.defaults.idm.unwrap_or_default();
        let mut vehicles = Vec::with_capacity(self.vehicles.len());
        let mut seen_ids = std::collections::BTreeSet::new();
        for rv in self.vehicles {
            if !seen_ids.insert(rv.id) {
                return Err(SimError::Validation(format!(
                    "duplicate vehicle id {}",
                    rv.id
                )));
            }
            let params = rv.params.unwrap_or(default_params);
            let idm = rv.idm.unwrap_or(default_idm);
            let path = graph.shortest_path(rv.start, rv.goal)?;
            if path.is_empty() {
                return Err(SimError::Validation(format!(
                    "vehicle {}: start and goal are the same node",
                    rv.id
                )));
            }
            let speed_profile = match (&rv.kind, rv.speed_profile) {
                (VehicleKind::Hv, Some(p)) if !p.is_empty() => p,
                (VehicleKind::Hv, _) => vec![(0.0, 0.9 * params.v_max)],
                (VehicleKind::Cav, Some(_)) => {
                    return Err(SimError::Validation(format!(
                        "vehicle {}: speed_profile is only valid for HVs",
                        rv.id
                    )));
                }
                (VehicleKind::Cav, None) => Vec::new(),
            };
            let spawn = match rv.spawn {
                Some(s) => VehicleState::new(s.x, s.y, s.psi, s.v),
                None => {
                    let (p, heading) = path.pose_at(0.0)?;
                    let v0 = match rv.kind {
                        VehicleKind::Cav => 0.0,
                        VehicleKind::Hv => profile_velocity(&speed_profile, rv.spawn_time),
                    };
                    VehicleState::new(p.x, p.y, heading, v0)
                }
            };
            // spawn pose must sit on (or near) the assigned route
            let off_path = path.distance_to(spawn.position());
            if off_path > self.thresholds.tau_p {
                return Err(SimError::Validation(format!(
                    "vehicle {}: spawn pose is {off_path:.3} m from its route (max {})",
                    rv.id, self.thresholds.tau_p
                )));
            }
            vehicles.push(VehicleSpec {
                id: rv.id,
                kind: rv.kind,
                start: rv.start,
                goal: rv.goal,
                spawn_time: rv.spawn_time,
                spawn,
                speed_profile,
                params,
                idm,
                path,
            });
        }

        Ok(Scenario {
            map_path,
            graph,
            bus,
            manager,
            noise,
            thresholds: self.thresholds,
            vehicles,
            duration: self.duration,
            seed: self.seed,
            noise_seed_explicit,
        })
    }
}

/// Piecewise-linear profile lookup, clamped at both ends.
pub fn profile_velocity(profile: &[(f64, f64)], t: f64) -> f64 {
    if profile.is_empty() {
        return 0.0;
    }
    if t <= profile[0].0 {
        return profile[0].1;
    }
    for w in profile.windows(2) {
        let (t0, v0) = w[0];
        let (t1, v1) = w[1];
        if t <= t1 {
            if t1 - t0 <= 0.0 {
                return v1;
            }
            let a = (t - t0) / (t1 - t0);
            return v0 + a * (v1 - v0);
        }
    }
    profile.last().unwrap().1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_interpolation() {
        let p = vec![(0.0, 0.2), (1.0, 0.4), (3.0, 0.4)];
        assert_eq!(profile_velocity(&p, -1.0), 0.2);
        assert_eq!(profile_velocity(&p, 0.0), 0.2);
        assert!((profile_velocity(&p, 0.5) - 0.3).abs() < 1e-12);
        assert_eq!(profile_velocity(&p, 2.0), 0.4);
        assert_eq!(profile_velocity(&p, 9.0), 0.4);
    }
}
