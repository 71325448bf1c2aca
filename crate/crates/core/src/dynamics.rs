//! Vehicle motion: kinematic bicycle integration, pure-pursuit lateral
//! control, IDM longitudinal planning and constant-velocity path
//! prediction.
//!
//! Everything here is a pure function of its inputs.

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Point2};
use crate::road_map::PathRef;

/// Planar vehicle state: position, heading (wrapped to `(-pi, pi]`) and
/// longitudinal velocity. Reverse driving is not modeled, so `v >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        VehicleState { x, y, psi, v }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite() && self.v.is_finite()
    }
}

/// Physical parameters of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Wheelbase in meters.
    pub wheelbase: f64,
    /// Inverse time constant of the velocity lag, 1/s.
    pub alpha: f64,
    pub length: f64,
    pub width: f64,
    pub v_max: f64,
    /// Steering limit in radians.
    pub delta_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 0.175,
            alpha: 4.0,
            length: 0.30,
            width: 0.15,
            v_max: 0.5,
            delta_max: 0.6,
        }
    }
}

/// Commanded reference velocity and steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v_ref: f64,
    pub delta: f64,
}

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed: 0.5,
            time_headway: 1.0,
            min_gap: 0.3,
            max_accel: 0.5,
            comfort_decel: 0.5,
            exponent: 4.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("non-finite vehicle state")]
    NonFiniteState,
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
}

/// Internal Euler sub-step, seconds.
const SUBSTEP: f64 = 0.01;

/// Integrates the bicycle model over `dt` with fixed 0.01 s explicit-Euler
/// sub-steps:
///
/// ```text
/// x' = v cos(psi)    psi' = v tan(delta) / L
/// y' = v sin(psi)    v'   = alpha (v_ref - v)
/// ```
///
/// Inputs are clamped to the vehicle limits; velocity is clamped at zero
/// from below.
pub fn step_bicycle(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    if !(dt > 0.0) {
        return Err(DynamicsError::BadTimeStep(dt));
    }
    let delta = input.delta.clamp(-params.delta_max, params.delta_max);
    let v_ref = input.v_ref.clamp(0.0, params.v_max);

    let mut s = *state;
    let mut remaining = dt;
    while remaining > 1e-9 {
        let h = remaining.min(SUBSTEP);
        // derivatives evaluated on the pre-step state, then applied together
        let dx = s.v * s.psi.cos();
        let dy = s.v * s.psi.sin();
        let dpsi = s.v * delta.tan() / params.wheelbase;
        let dv = params.alpha * (v_ref - s.v);
        s.x += dx * h;
        s.y += dy * h;
        s.psi = wrap_angle(s.psi + dpsi * h);
        s.v = (s.v + dv * h).max(0.0);
        remaining -= h;
    }
    Ok(s)
}

/// Result of the lateral controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteerCommand {
    pub delta: f64,
    /// Set when the vehicle has reached (or passed) the end of the path;
    /// `delta` is zero in that case.
    pub end_of_path: bool,
}

/// Pure-pursuit steering toward a goal point on the path.
///
/// The goal point is the first point on the path at exactly `lookahead`
/// meters from the vehicle, searched forward of the vehicle's projection;
/// when the path ends closer than that, the final waypoint is used. With
/// `eta` the vehicle-frame bearing of the goal point, the command is
/// `delta = atan(2 L sin(eta) / lookahead)`, clamped to the steering limit.
/// Positive `delta` turns left.
pub fn pure_pursuit_steer(
    state: &VehicleState,
    path: &PathRef,
    lookahead: f64,
    params: &VehicleParams,
) -> SteerCommand {
    let pos = state.position();
    let (s_proj, dist) = path.project(pos);
    let total = path.total_length();
    if s_proj >= total - 1e-9 {
        return SteerCommand {
            delta: 0.0,
            end_of_path: true,
        };
    }

    let goal = if dist >= lookahead {
        // too far off the path for a circle crossing; aim at the foot point
        path.pose_at(s_proj).map(|(p, _)| p).unwrap_or(pos)
    } else {
        lookahead_point(path, pos, s_proj, lookahead)
    };

    let bearing = (goal.y - pos.y).atan2(goal.x - pos.x);
    let eta = wrap_angle(bearing - state.psi);
    let delta = (2.0 * params.wheelbase * eta.sin() / lookahead).atan();
    SteerCommand {
        delta: delta.clamp(-params.delta_max, params.delta_max),
        end_of_path: false,
    }
}

/// First polyline point at distance `lookahead` from `pos`, at arclength
/// >= `s_proj`; falls back to the path end.
fn lookahead_point(path: &PathRef, pos: Point2, s_proj: f64, lookahead: f64) -> Point2 {
    let pts = path.polyline();
    let mut acc = 0.0;
    for i in 0..pts.len() - 1 {
        let (a, b) = (pts[i], pts[i + 1]);
        let seg_len = a.dist(b);
        let seg_end = acc + seg_len;
        if seg_end < s_proj {
            acc = seg_end;
            continue;
        }
        // portion of this segment ahead of the projection
        let t0 = if acc < s_proj && seg_len > 0.0 {
            (s_proj - acc) / seg_len
        } else {
            0.0
        };
        let d = b - a;
        // |a + t d - pos|^2 = lookahead^2
        let f = a - pos;
        let qa = d.dot(d);
        let qb = 2.0 * f.dot(d);
        let qc = f.dot(f) - lookahead * lookahead;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 && qa > 0.0 {
            let sq = disc.sqrt();
            for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                if t >= t0 - 1e-12 && t <= 1.0 + 1e-12 {
                    return a + d * t.clamp(0.0, 1.0);
                }
            }
        }
        acc = seg_end;
    }
    *pts.last().unwrap()
}

/// One IDM update. `gap` is the bumper gap to the leader; pass
/// `f64::INFINITY` when there is no leader. Returns the velocity command
/// for the next interval, clamped to `[0, desired_speed]`.
pub fn idm_velocity(ego_v: f64, gap: f64, leader_v: f64, p: &IdmParams, dt: f64) -> f64 {
    let free_term = (ego_v / p.desired_speed).powf(p.exponent);
    let interaction = if gap.is_finite() {
        let dv = ego_v - leader_v;
        let s_star =
            p.min_gap + ego_v * p.time_headway + ego_v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt());
        (s_star / gap).powi(2)
    } else {
        0.0
    };
    let accel = p.max_accel * (1.0 - free_term - interaction);
    (ego_v + accel * dt).clamp(0.0, p.desired_speed)
}

/// Projects `state` onto `path` and rolls the projection forward at
/// constant `v_const`, returning exactly `h` future poses spaced
/// `v_const * dt` apart in arclength. Past the path end the final pose is
/// held.
pub fn predict_trajectory(
    state: &VehicleState,
    path: &PathRef,
    v_const: f64,
    h: usize,
    dt: f64,
) -> Vec<(Point2, f64)> {
    let (s0, _) = path.project(state.position());
    predict_from_arclength(path, s0, v_const, h, dt)
}

/// Same as [`predict_trajectory`] with the projection already done.
pub fn predict_from_arclength(
    path: &PathRef,
    s0: f64,
    v_const: f64,
    h: usize,
    dt: f64,
) -> Vec<(Point2, f64)> {
    let total = path.total_length();
    let mut out = Vec::with_capacity(h);
    for k in 1..=h {
        let s = (s0 + v_const * dt * k as f64).min(total);
        // s0 comes from project() so it is always in range
        let pose = path.pose_at(s).expect("arclength in range");
        out.push(pose);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road_map::RoadGraph;
    use std::f64::consts::TAU;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    /// Straight path along +x built through a tiny graph so the PathRef is
    /// a validated one.
    fn straight_path(len: f64) -> PathRef {
        let g = graph_line(len);
        g.shortest_path(0, 1).unwrap()
    }

    fn graph_line(len: f64) -> RoadGraph {
        let a = Point2::new(0.0, 0.0);
        let b = Point2::new(len, 0.0);
        let n = (len / 0.05).ceil() as usize;
        let mut wps = Vec::new();
        for i in 0..=n {
            wps.push(a + (b - a) * (i as f64 / n as f64));
        }
        let text = format!(
            "roadmap v1\n[nodes]\n0 0 0\n1 {len} 0\n[segments]\n0 0 1 {}\n",
            wps.iter()
                .map(|p| format!("{} {}", p.x, p.y))
                .collect::<Vec<_>>()
                .join(" ")
        );
        RoadGraph::parse(&text).unwrap()
    }

    #[test]
    fn zero_velocity_is_fixed_point() {
        let s = VehicleState::new(1.0, 2.0, 0.7, 0.0);
        let input = ControlInput {
            v_ref: 0.0,
            delta: 0.3,
        };
        let out = step_bicycle(&s, &input, &params(), 1.0).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn straight_line_advance() {
        // v held at 0.5 (v_ref = v), no steering: 0.5 m in 1 s
        let s = VehicleState::new(0.0, 0.0, 0.0, 0.5);
        let input = ControlInput {
            v_ref: 0.5,
            delta: 0.0,
        };
        let out = step_bicycle(&s, &input, &params(), 1.0).unwrap();
        assert!((out.x - 0.5).abs() < 1e-9);
        assert!(out.y.abs() < 1e-12);
        assert!(out.psi.abs() < 1e-12);
        assert!((out.v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn yaw_rate_matches_model() {
        // v = 0.5, tan(delta) = 0.35, L = 0.175  =>  psi' = 1 rad/s
        let delta = 0.35_f64.atan();
        let s = VehicleState::new(0.0, 0.0, 0.0, 0.5);
        let input = ControlInput { v_ref: 0.5, delta };
        let out = step_bicycle(&s, &input, &params(), 1.0).unwrap();
        assert!((out.psi - 1.0).abs() < 1e-9);

        // a full 2*pi seconds closes the circle: heading back to start
        let out = step_bicycle(&s, &input, &params(), TAU).unwrap();
        assert!(wrap_angle(out.psi).abs() < 1e-6);
    }

    #[test]
    fn circle_radius_error_below_one_percent() {
        let delta = 0.35_f64.atan();
        let p = params();
        let radius = p.wheelbase / 0.35; // 0.5 m
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 0.5);
        let center = Point2::new(0.0, radius); // left turn from heading +x
        let input = ControlInput { v_ref: 0.5, delta };
        let mut s = s0;
        let mut max_err: f64 = 0.0;
        let steps = (TAU / 0.01).ceil() as usize;
        for _ in 0..steps {
            s = step_bicycle(&s, &input, &p, 0.01).unwrap();
            let r = s.position().dist(center);
            max_err = max_err.max((r - radius).abs());
        }
        assert!(
            max_err < 0.01 * radius,
            "radial deviation {max_err:.5} exceeds 1% of {radius}"
        );
    }

    #[test]
    fn velocity_lag_monotone() {
        let p = params();
        let s = VehicleState::new(0.0, 0.0, 0.0, 0.1);
        let input = ControlInput {
            v_ref: 0.5,
            delta: 0.0,
        };
        let mut prev_gap = (0.1_f64 - 0.5).abs();
        let mut state = s;
        for _ in 0..100 {
            state = step_bicycle(&state, &input, &p, 0.01).unwrap();
            let gap = (state.v - 0.5).abs();
            assert!(gap <= prev_gap + 1e-15);
            prev_gap = gap;
        }
        assert!(prev_gap < 0.01);
    }

    #[test]
    fn pursuit_zero_on_path() {
        let path = straight_path(3.0);
        let s = VehicleState::new(0.5, 0.0, 0.0, 0.3);
        let cmd = pure_pursuit_steer(&s, &path, 0.3, &params());
        assert!(!cmd.end_of_path);
        assert!(cmd.delta.abs() < 1e-12);
    }

    #[test]
    fn pursuit_sign_convention() {
        let path = straight_path(3.0);
        // offset left of the path, aligned: must steer right (delta < 0)
        let s = VehicleState::new(0.5, 0.1, 0.0, 0.3);
        let cmd = pure_pursuit_steer(&s, &path, 0.3, &params());
        assert!(cmd.delta < 0.0);
        // mirrored: offset right steers left
        let s = VehicleState::new(0.5, -0.1, 0.0, 0.3);
        let cmd = pure_pursuit_steer(&s, &path, 0.3, &params());
        assert!(cmd.delta > 0.0);
    }

    #[test]
    fn pursuit_matches_geometric_circle() {
        // independent construction: the pursuit circle is tangent to the
        // heading at the vehicle and passes through the goal point; its
        // center is the intersection of the heading normal with the
        // perpendicular bisector of vehicle->goal
        let path = straight_path(5.0);
        let p = params();
        let lookahead = 0.3;
        let s = VehicleState::new(1.0, 0.1, 0.0, 0.3);
        let cmd = pure_pursuit_steer(&s, &path, lookahead, &p);

        let pos = s.position();
        // goal point: circle-polyline crossing at exact lookahead distance
        let dx = (lookahead * lookahead - 0.1 * 0.1).sqrt();
        let goal = Point2::new(1.0 + dx, 0.0);
        assert!((goal.dist(pos) - lookahead).abs() < 1e-12);

        // tangency puts the center on the heading normal: c = pos + R*(0,1)
        // with signed R; |c - goal| = |R| gives R = -|w|^2 / (2 w.y) for
        // w = pos - goal
        let w = pos - goal;
        let signed_r = -w.dot(w) / (2.0 * w.y);
        let expected = (p.wheelbase / signed_r).atan(); // negative: turn right
        assert!(expected < 0.0);
        assert!(
            (cmd.delta - expected).abs() < 1e-9,
            "pursuit {} vs oracle {}",
            cmd.delta,
            expected
        );
    }

    #[test]
    fn pursuit_end_of_path() {
        let path = straight_path(1.0);
        let s = VehicleState::new(1.5, 0.0, 0.0, 0.3);
        let cmd = pure_pursuit_steer(&s, &path, 0.3, &params());
        assert!(cmd.end_of_path);
        assert_eq!(cmd.delta, 0.0);
    }

    #[test]
    fn idm_free_flow_fixed_point() {
        let p = IdmParams::default();
        let v = idm_velocity(p.desired_speed, f64::INFINITY, 0.0, &p, 0.1);
        assert_eq!(v, p.desired_speed);
    }

    #[test]
    fn idm_standstill_equilibrium() {
        let p = IdmParams::default();
        let v = idm_velocity(0.0, p.min_gap, 0.0, &p, 0.1);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn idm_matches_scalar_oracle() {
        let p = IdmParams::default();
        let (ego_v, leader_v, gap, dt) = (0.5, 0.2, 0.6, 0.1);
        // independent evaluation of the model formula
        let dv: f64 = ego_v - leader_v;
        let s_star = p.min_gap
            + ego_v * p.time_headway
            + ego_v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt());
        let accel =
            p.max_accel * (1.0 - (ego_v / p.desired_speed).powf(p.exponent) - (s_star / gap).powi(2));
        let expect = (ego_v + accel * dt).clamp(0.0, p.desired_speed);
        let got = idm_velocity(ego_v, gap, leader_v, &p, dt);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn idm_bounds() {
        let p = IdmParams::default();
        for i in 0..50 {
            let ego = 0.01 * i as f64;
            let gap = 0.1 + 0.05 * i as f64;
            let v = idm_velocity(ego, gap, 0.0, &p, 0.1);
            assert!((0.0..=p.desired_speed).contains(&v));
        }
    }

    #[test]
    fn predict_zero_velocity_holds_pose() {
        let path = straight_path(2.0);
        let s = VehicleState::new(0.5, 0.02, 0.1, 0.0);
        let out = predict_trajectory(&s, &path, 0.0, 10, 0.1);
        assert_eq!(out.len(), 10);
        for (p, _) in &out {
            assert!(p.dist(Point2::new(0.5, 0.0)) < 1e-12); // projected pose
        }
    }

    #[test]
    fn predict_spacing_and_on_polyline() {
        let path = straight_path(5.0);
        let s = VehicleState::new(0.3, 0.0, 0.0, 0.5);
        let out = predict_trajectory(&s, &path, 0.5, 30, 0.1);
        assert_eq!(out.len(), 30);
        for w in out.windows(2) {
            let d = w[0].0.dist(w[1].0);
            assert!((d - 0.05).abs() < 1e-9);
        }
        for (p, _) in &out {
            assert!(path.distance_to(*p) < 1e-9);
        }
    }

    #[test]
    fn predict_holds_final_pose_past_end() {
        let path = straight_path(1.0);
        let s = VehicleState::new(0.9, 0.0, 0.0, 0.5);
        let out = predict_trajectory(&s, &path, 0.5, 10, 0.1);
        let last = out.last().unwrap().0;
        assert!(last.dist(Point2::new(1.0, 0.0)) < 1e-12);
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn heading_preserved_straight() {
        let p = params();
        let mut s = VehicleState::new(0.0, 0.0, 0.3, 0.4);
        let input = ControlInput {
            v_ref: 0.4,
            delta: 0.0,
        };
        let dir = Point2::new(0.3_f64.cos(), 0.3_f64.sin());
        for _ in 0..100 {
            s = step_bicycle(&s, &input, &p, 0.01).unwrap();
            assert_eq!(s.psi, 0.3);
            // lateral error vs the initial heading line
            let lateral = s.position().cross(dir);
            assert!(lateral.abs() < 1e-12);
        }
    }
}
