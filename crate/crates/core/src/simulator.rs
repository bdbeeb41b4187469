//! Step-based driving environment.
//!
//! The ego follows a kinematic bicycle model driven by normalized actions, the
//! adversary replays its override and every other vehicle replays its log.
//! Observations are 80 values: 4 ego features, 4 navigation features toward
//! the next two route checkpoints and 72 normalized lidar ranges.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    obb_overlap, ray_segment_distance, segments_intersect, Dims, OrientedBox, Polyline, Pose2, Vec2,
};
use crate::scenario::{AdversarialScenario, VehicleState};

pub const LIDAR_RAYS: usize = 72;
pub const OBS_DIM: usize = 8 + LIDAR_RAYS;
const SPEED_SCALE: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("step called after the episode ended")]
    StepAfterDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleLimits {
    /// Maximum steering angle (rad).
    pub max_steer: f64,
    /// Full-throttle acceleration (m/s^2).
    pub max_accel: f64,
    /// Full-brake deceleration (m/s^2).
    pub max_brake: f64,
    pub wheelbase: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        Self {
            max_steer: 0.6,
            max_accel: 4.0,
            max_brake: 8.0,
            wheelbase: 2.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub eta_crash: f64,
    pub out_of_road_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            eta_crash: 1.0,
            out_of_road_penalty: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub limits: VehicleLimits,
    pub reward: RewardConfig,
    pub destination_tolerance: f64,
    pub checkpoint_spacing: f64,
    pub lidar_range: f64,
    /// Keep a per-step state trace for rendering.
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            limits: VehicleLimits::default(),
            reward: RewardConfig::default(),
            destination_tolerance: 5.0,
            checkpoint_spacing: 10.0,
            lidar_range: 50.0,
            record_trace: false,
        }
    }
}

/// Normalized control; both channels are clamped to [-1, 1] on construction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub a1: f64,
    pub a2: f64,
}

impl Action {
    pub fn new(a1: f64, a2: f64) -> Self {
        let clamp = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Self {
            a1: clamp(a1),
            a2: clamp(a2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Speed, heading error, last steering, last throttle.
    pub fn ego(&self) -> &[f64] {
        &self.0[..4]
    }

    /// Distance and bearing to the next two checkpoints.
    pub fn navigation(&self) -> &[f64] {
        &self.0[4..8]
    }

    pub fn lidar(&self) -> &[f64] {
        &self.0[8..]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub crash: bool,
    /// Id of the vehicle hit, if any.
    pub crash_with: Option<String>,
    pub out_of_road: bool,
    pub arrived: bool,
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub route_completion: f64,
    pub crashed: bool,
    pub crash_with: Option<String>,
    /// The crash involved the adversary.
    pub adversary_collision: bool,
    pub out_of_road: bool,
    pub arrived: bool,
    pub steps: usize,
    #[serde(rename = "return")]
    pub total_return: f64,
    /// Ego states over the prediction window; steps after termination hold the
    /// last pose marked invalid, so they never take part in collision checks.
    pub ego_trajectory: Vec<VehicleState>,
    pub log_prob_sum: f64,
}

/// States of all tracks at one step, in track order, with the simulated ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub step: usize,
    pub states: Vec<VehicleState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub scenario: AdversarialScenario,
    pub frames: Vec<Frame>,
}

/// Lidar ranges around `origin`, normalized by `range`.
/// Ray `i` points at `origin.heading + 2*pi*i/72`.
pub fn lidar_scan(origin: Pose2, boxes: &[OrientedBox], segments: &[(Vec2, Vec2)], range: f64) -> Vec<f64> {
    let mut hits = vec![range; LIDAR_RAYS];
    let o = origin.position();
    let step = TAU / LIDAR_RAYS as f64;
    let dirs: Vec<Vec2> = (0..LIDAR_RAYS)
        .map(|i| Vec2::from_angle(origin.heading + step * i as f64))
        .collect();
    let mut cast = |a: Vec2, b: Vec2| {
        let (pa, pb) = (a - o, b - o);
        if point_segment_distance(o, a, b) > range {
            return;
        }
        let near = point_segment_distance(o, a, b) < 1e-9;
        let rays: Box<dyn Iterator<Item = usize>> = if near {
            Box::new(0..LIDAR_RAYS)
        } else {
            let alpha = (pa.angle() - origin.heading).rem_euclid(TAU);
            let mut width = crate::geometry::normalize_angle(pb.angle() - pa.angle());
            let mut start = alpha;
            if width < 0.0 {
                start = (alpha + width).rem_euclid(TAU);
                width = -width;
            }
            let first = (start / step).floor() as i64;
            let last = ((start + width) / step).ceil() as i64;
            Box::new((first..=last).map(|i| i.rem_euclid(LIDAR_RAYS as i64) as usize))
        };
        for i in rays {
            if let Some(d) = ray_segment_distance(o, dirs[i], a, b) {
                if d < hits[i] {
                    hits[i] = d;
                }
            }
        }
    };
    for &(a, b) in segments {
        cast(a, b);
    }
    for bx in boxes {
        if bx.center.position().distance(o) > range + 0.5 * bx.length.hypot(bx.width) {
            continue;
        }
        for (a, b) in bx.edges() {
            cast(a, b);
        }
    }
    hits.into_iter().map(|d| (d / range).min(1.0)).collect()
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_sq();
    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.distance(a + ab * t)
}

/// Advances a bicycle-model state by `dt` under a constant action.
pub fn bicycle_step(state: &VehicleState, action: Action, limits: &VehicleLimits, dt: f64) -> VehicleState {
    let steer = limits.max_steer * action.a1;
    let accel = limits.max_accel * action.a2.max(0.0) - limits.max_brake * (-action.a2).max(0.0);
    let v0 = state.speed;
    let v_free = v0 + accel * dt;
    let (v1, ds) = if v_free >= 0.0 {
        (v_free, 0.5 * (v0 + v_free) * dt)
    } else {
        (0.0, v0 * v0 / (2.0 * -accel))
    };
    let kappa = steer.tan() / limits.wheelbase;
    let dtheta = kappa * ds;
    let h = state.heading;
    let (dx, dy) = if dtheta.abs() < 1e-9 {
        (ds * h.cos(), ds * h.sin())
    } else {
        (
            ((h + dtheta).sin() - h.sin()) / kappa,
            (h.cos() - (h + dtheta).cos()) / kappa,
        )
    };
    VehicleState::new(Pose2::new(state.x + dx, state.y + dy, h + dtheta), v1)
}

/// One episode on one adversarial scenario.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    scenario: &'a AdversarialScenario,
    config: SimConfig,
    ego_index: usize,
    adversary_index: usize,
    ego_dims: Dims,
    route: Polyline,
    /// (end arc length, lane width) per route lane.
    route_widths: Vec<(f64, f64)>,
    boundary_segments: Vec<(Vec2, Vec2)>,
    checkpoints: Vec<f64>,
    d_reset: f64,
    d_dest: f64,
    // Episode state.
    clock: usize,
    ego: VehicleState,
    last_action: Action,
    progress: f64,
    done: bool,
    steps: usize,
    total_return: f64,
    crashed: bool,
    crash_with: Option<String>,
    out_of_road: bool,
    arrived: bool,
    log_prob_sum: f64,
    ego_trajectory: Vec<VehicleState>,
    frames: Vec<Frame>,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a AdversarialScenario, config: SimConfig) -> Self {
        let base = scenario.base();
        let route = base.route_polyline();
        let mut route_widths = Vec::new();
        let mut acc = 0.0;
        for id in &base.ego_route {
            let lane = base.map.lane(id).expect("validated route");
            acc += lane.centerline.total_length();
            route_widths.push((acc, lane.lane_width));
        }
        let boundary_segments = base
            .map
            .boundaries
            .iter()
            .flat_map(|b| b.segments().collect::<Vec<_>>())
            .collect();
        let d_dest = route.project(base.destination).arc_length;
        let mut checkpoints = Vec::new();
        let mut s = config.checkpoint_spacing;
        while s < d_dest {
            checkpoints.push(s);
            s += config.checkpoint_spacing;
        }
        checkpoints.push(d_dest);
        let ego_index = base.track_index(&base.ego_id).expect("validated ego");
        let adversary_index = base.track_index(&base.adversary_id).expect("validated adversary");
        let mut sim = Self {
            scenario,
            config,
            ego_index,
            adversary_index,
            ego_dims: base.tracks[ego_index].dims(),
            route,
            route_widths,
            boundary_segments,
            checkpoints,
            d_reset: 0.0,
            d_dest,
            clock: 0,
            ego: VehicleState::invalid(),
            last_action: Action::default(),
            progress: 0.0,
            done: false,
            steps: 0,
            total_return: 0.0,
            crashed: false,
            crash_with: None,
            out_of_road: false,
            arrived: false,
            log_prob_sum: 0.0,
            ego_trajectory: Vec::new(),
            frames: Vec::new(),
        };
        sim.reset();
        sim
    }

    /// Places every vehicle at its state at the history cutoff.
    pub fn reset(&mut self) -> Observation {
        let base = self.scenario.base();
        self.clock = base.history_steps - 1;
        self.ego = base.tracks[self.ego_index].states[self.clock];
        self.last_action = Action::default();
        self.d_reset = self.route_arc(self.ego.position()).min(self.d_dest);
        self.progress = self.d_reset;
        self.done = false;
        self.steps = 0;
        self.total_return = 0.0;
        self.crashed = false;
        self.crash_with = None;
        self.out_of_road = false;
        self.arrived = false;
        self.log_prob_sum = 0.0;
        self.ego_trajectory.clear();
        self.frames.clear();
        if self.config.record_trace {
            self.record_frame();
        }
        self.observe()
    }

    pub fn scenario(&self) -> &'a AdversarialScenario {
        self.scenario
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego
    }

    pub fn ego_dims(&self) -> Dims {
        self.ego_dims
    }

    /// Absolute step index of the current world state.
    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn route(&self) -> &Polyline {
        &self.route
    }

    /// Current progress along the route (arc length, capped at the destination).
    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Remaining route length from the reset position to the destination.
    pub fn route_length(&self) -> f64 {
        (self.d_dest - self.d_reset).max(0.0)
    }

    /// Valid non-ego vehicles at the current step: (track index, state, dims).
    pub fn others(&self) -> impl Iterator<Item = (usize, VehicleState, Dims)> + '_ {
        self.others_at(self.clock)
    }

    fn others_at(&self, step: usize) -> impl Iterator<Item = (usize, VehicleState, Dims)> + '_ {
        let base = self.scenario.base();
        base.tracks.iter().enumerate().filter_map(move |(i, t)| {
            if i == self.ego_index {
                return None;
            }
            let s = self.scenario.state(i, step);
            s.valid.then(|| (i, s, t.dims()))
        })
    }

    fn route_arc(&self, p: Vec2) -> f64 {
        self.route.project(p).arc_length
    }

    fn lane_width_at(&self, arc: f64) -> f64 {
        self.route_widths
            .iter()
            .find(|(end, _)| arc <= *end)
            .or(self.route_widths.last())
            .map_or(3.5, |(_, w)| *w)
    }

    fn record_frame(&mut self) {
        let base = self.scenario.base();
        let states = (0..base.tracks.len())
            .map(|i| {
                if i == self.ego_index {
                    self.ego
                } else {
                    self.scenario.state(i, self.clock)
                }
            })
            .collect();
        self.frames.push(Frame {
            step: self.clock,
            states,
        });
    }

    pub fn observe(&self) -> Observation {
        let mut v = Vec::with_capacity(OBS_DIM);
        let pose = self.ego.pose();
        let proj = self.route.project(pose.position());
        let tangent = self.route.heading_at(proj.arc_length);
        v.push((self.ego.speed / SPEED_SCALE).clamp(0.0, 1.0));
        v.push(crate::geometry::normalize_angle(pose.heading - tangent) / PI);
        v.push(self.last_action.a1);
        v.push(self.last_action.a2);
        let next = self
            .checkpoints
            .iter()
            .position(|&c| c > proj.arc_length)
            .unwrap_or(self.checkpoints.len() - 1);
        for k in [next, (next + 1).min(self.checkpoints.len() - 1)] {
            let target = self.route.point_at(self.checkpoints[k]);
            let local = pose.to_local(target);
            v.push((local.norm() / self.config.lidar_range).min(1.0));
            v.push(local.angle() / PI);
        }
        let boxes: Vec<OrientedBox> = self
            .others()
            .map(|(_, s, d)| OrientedBox::from_dims(s.pose(), d))
            .collect();
        v.extend(lidar_scan(pose, &boxes, &self.boundary_segments, self.config.lidar_range));
        Observation(v)
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, SimError> {
        if self.done {
            return Err(SimError::StepAfterDone);
        }
        let next = bicycle_step(&self.ego, action, &self.config.limits, self.scenario.base().dt);
        self.last_action = action;
        Ok(self.advance(next))
    }

    /// Advances with a policy action and records its log-probability.
    pub fn step_with_log_prob(&mut self, action: Action, log_prob: f64) -> Result<StepOutcome, SimError> {
        let out = self.step(action)?;
        self.log_prob_sum += log_prob;
        Ok(out)
    }

    /// Moves the ego directly to `state` (log replay).
    pub fn step_teleport(&mut self, state: VehicleState) -> Result<StepOutcome, SimError> {
        if self.done {
            return Err(SimError::StepAfterDone);
        }
        Ok(self.advance(state))
    }

    fn advance(&mut self, next: VehicleState) -> StepOutcome {
        let base = self.scenario.base();
        let prev = self.ego;
        self.ego = next;
        self.clock += 1;
        self.steps += 1;

        let mut info = StepInfo::default();
        let ego_box = OrientedBox::from_dims(self.ego.pose(), self.ego_dims);
        let reach = 0.5 * self.ego_dims.length.hypot(self.ego_dims.width);
        for (i, s, d) in self.others_at(self.clock) {
            if s.position().distance(self.ego.position()) > reach + 0.5 * d.length.hypot(d.width) {
                continue;
            }
            if obb_overlap(&ego_box, &OrientedBox::from_dims(s.pose(), d)) {
                info.crash = true;
                info.crash_with = Some(base.tracks[i].id.clone());
                if i == self.adversary_index {
                    break;
                }
            }
        }

        let p0 = prev.position();
        let p1 = self.ego.position();
        let crossed = self.boundary_segments.iter().any(|&(a, b)| {
            let lo = Vec2::new(a.x.min(b.x), a.y.min(b.y));
            let hi = Vec2::new(a.x.max(b.x), a.y.max(b.y));
            let (mx, my) = (p0.x.min(p1.x), p0.y.min(p1.y));
            let (nx, ny) = (p0.x.max(p1.x), p0.y.max(p1.y));
            if nx < lo.x || mx > hi.x || ny < lo.y || my > hi.y {
                return false;
            }
            segments_intersect(p0, p1, a, b)
        });
        let proj = self.route.project(p1);
        info.out_of_road = crossed || proj.lateral_offset.abs() > self.lane_width_at(proj.arc_length);

        let mut d_new = proj.arc_length.min(self.d_dest);
        if !info.crash && p1.distance(base.destination) <= self.config.destination_tolerance {
            info.arrived = true;
            d_new = self.d_dest;
        }
        let delta = d_new - self.progress;
        self.progress = d_new;
        info.progress = delta;

        let reward_cfg = self.config.reward;
        let mut reward = delta;
        if info.crash {
            reward -= reward_cfg.eta_crash;
        }
        if info.out_of_road {
            reward -= reward_cfg.out_of_road_penalty;
        }
        self.total_return += reward;
        self.crashed |= info.crash;
        if info.crash && self.crash_with.is_none() {
            self.crash_with = info.crash_with.clone();
        }
        self.out_of_road |= info.out_of_road;
        self.arrived |= info.arrived;
        self.ego_trajectory.push(self.ego);
        if self.config.record_trace {
            self.record_frame();
        }
        self.done = info.crash || info.out_of_road || info.arrived || self.clock >= base.horizon_steps - 1;
        StepOutcome {
            observation: self.observe(),
            reward,
            done: self.done,
            info,
        }
    }

    pub fn route_completion(&self) -> f64 {
        let total = self.route_length();
        if total <= 0.0 {
            return 1.0;
        }
        ((self.progress - self.d_reset) / total).clamp(0.0, 1.0)
    }

    pub fn result(&self) -> EpisodeResult {
        let window = self.scenario.base().prediction_steps();
        let mut traj = self.ego_trajectory.clone();
        let gone = VehicleState {
            valid: false,
            ..traj.last().copied().unwrap_or(self.ego)
        };
        traj.resize(window, gone);
        let adversary_id = &self.scenario.base().adversary_id;
        EpisodeResult {
            route_completion: self.route_completion(),
            crashed: self.crashed,
            crash_with: self.crash_with.clone(),
            adversary_collision: self.crash_with.as_ref() == Some(adversary_id),
            out_of_road: self.out_of_road,
            arrived: self.arrived && !self.crashed,
            steps: self.steps,
            total_return: self.total_return,
            ego_trajectory: traj,
            log_prob_sum: self.log_prob_sum,
        }
    }

    pub fn trace(&self) -> Trace {
        Trace {
            scenario: self.scenario.clone(),
            frames: self.frames.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{forge_scenario, ForgeConfig, Template};
    use crate::scenario::{tests::minimal_json, Scenario};
    use proptest::prelude::*;

    fn straight() -> Scenario {
        Scenario::from_json(&minimal_json()).unwrap()
    }

    /// The straight fixture with the adversary parked far away.
    fn lonely(x_adv: f64) -> AdversarialScenario {
        let mut s = straight();
        let i = s.track_index("adv").unwrap();
        for st in &mut s.tracks[i].states {
            st.x = x_adv;
            st.y = 0.0;
            st.speed = 0.0;
        }
        s.map.boundaries.clear();
        AdversarialScenario::identity(&s)
    }

    #[test]
    fn steps_after_termination_are_invalid() {
        let adv = AdversarialScenario::identity(&straight());
        let mut sim = Simulator::new(&adv, SimConfig::default());
        while !sim.is_done() {
            sim.step(Action::new(0.0, 1.0)).unwrap();
        }
        let r = sim.result();
        assert!(r.crashed && r.steps < 80);
        assert_eq!(r.ego_trajectory.len(), 80);
        assert_eq!(r.ego_trajectory.iter().filter(|s| s.valid).count(), r.steps);
        assert!(r.ego_trajectory[..r.steps].iter().all(|s| s.valid));
    }

    #[test]
    fn bicycle_straight_step() {
        let s = VehicleState::new(Pose2::new(0.0, 0.0, 0.0), 10.0);
        let n = bicycle_step(&s, Action::new(0.0, 1.0), &VehicleLimits::default(), 0.1);
        assert!((n.x - (10.0 + 0.5 * 4.0 * 0.1) * 0.1).abs() < 1e-12);
        assert!((n.speed - 10.4).abs() < 1e-12);
        let stop = bicycle_step(&VehicleState::new(Pose2::new(0.0, 0.0, 0.0), 0.4), Action::new(0.0, -1.0), &VehicleLimits::default(), 0.1);
        assert_eq!(stop.speed, 0.0);
        assert!((stop.x - 0.16 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn bicycle_turn_matches_fine_integration() {
        let limits = VehicleLimits::default();
        let s = VehicleState::new(Pose2::new(1.0, 2.0, 0.3), 8.0);
        let a = Action::new(0.5, 0.3);
        let exact = bicycle_step(&s, a, &limits, 0.1);
        // Euler oracle with 100k substeps.
        let (mut x, mut y, mut h, mut v) = (1.0f64, 2.0f64, 0.3f64, 8.0f64);
        let n = 100_000;
        let dt = 0.1 / n as f64;
        let acc = 4.0 * 0.3;
        for _ in 0..n {
            x += v * h.cos() * dt;
            y += v * h.sin() * dt;
            h += v * (0.6f64 * 0.5).tan() / 2.8 * dt;
            v += acc * dt;
        }
        assert!((exact.x - x).abs() < 1e-4 && (exact.y - y).abs() < 1e-4 && (exact.heading - h).abs() < 1e-4);
    }

    #[test]
    fn reset_is_deterministic_and_aligned() {
        let adv = AdversarialScenario::identity(&straight());
        let mut sim = Simulator::new(&adv, SimConfig::default());
        let a = sim.reset();
        let b = sim.reset();
        assert_eq!(a, b);
        assert_eq!(a.values().len(), OBS_DIM);
        assert_eq!(a.lidar().len(), LIDAR_RAYS);
        assert!(a.ego()[1].abs() < 1e-12);
    }

    #[test]
    fn lidar_clear_when_alone() {
        let adv = lonely(150.0);
        let sim = Simulator::new(&adv, SimConfig::default());
        assert!(sim.observe().lidar().iter().all(|&r| r == 1.0));
        assert!(lidar_scan(Pose2::new(0.0, 0.0, 0.0), &[], &[], 50.0).iter().all(|&r| r == 1.0));
    }

    #[test]
    fn lidar_vehicle_ahead() {
        // Box centered 12 m ahead, 4 m long: near edge at 10 m.
        let b = OrientedBox::new(Pose2::new(12.0, 0.0, 0.0), 4.0, 2.0).unwrap();
        let r = lidar_scan(Pose2::new(0.0, 0.0, 0.0), &[b], &[], 50.0);
        assert_eq!(r.len(), 72);
        assert!((r[0] - 0.2).abs() < 1e-12);
        assert_eq!(r[36], 1.0);
        // Rotated origin: ray 18 points along +y.
        let r = lidar_scan(Pose2::new(0.0, 0.0, -PI / 2.0), &[b], &[], 50.0);
        assert!((r[18] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn lidar_binning_matches_brute_force() {
        let s = forge_scenario(&ForgeConfig::new(Template::Curve, 5).with_background(3));
        let adv = AdversarialScenario::identity(&s);
        let sim = Simulator::new(&adv, SimConfig::default());
        let pose = sim.ego().pose();
        let boxes: Vec<_> = sim.others().map(|(_, st, d)| OrientedBox::from_dims(st.pose(), d)).collect();
        let fast = lidar_scan(pose, &boxes, &sim.boundary_segments, 50.0);
        for (i, f) in fast.iter().enumerate() {
            let dir = Vec2::from_angle(pose.heading + TAU * i as f64 / 72.0);
            let mut best = 50.0f64;
            let all = sim.boundary_segments.iter().copied().chain(boxes.iter().flat_map(|b| b.edges()));
            for (a, b) in all {
                if let Some(d) = ray_segment_distance(pose.position(), dir, a, b) {
                    best = best.min(d);
                }
            }
            assert!((f - best / 50.0).abs() < 1e-12, "ray {i}");
        }
    }

    #[test]
    fn crash_step_penalty() {
        // Adversary parked 6 m ahead of the ego's front: driving into it crashes.
        let s = straight();
        let ego0 = s.ego().states[s.history_steps - 1];
        let adv = lonely(ego0.x + 5.5);
        let mut sim = Simulator::new(&adv, SimConfig::default());
        let mut last = None;
        for _ in 0..20 {
            let out = sim.step(Action::new(0.0, 0.0)).unwrap();
            let done = out.done;
            last = Some(out);
            if done {
                break;
            }
        }
        let out = last.unwrap();
        assert!(out.info.crash);
        assert_eq!(out.info.crash_with.as_deref(), Some("adv"));
        assert!((out.reward - (out.info.progress - 1.0)).abs() < 1e-12);
        assert!(out.done);
        assert_eq!(sim.step(Action::default()), Err(SimError::StepAfterDone));
        let r = sim.result();
        assert!(r.crashed && r.adversary_collision && !r.arrived);
        assert_eq!(r.ego_trajectory.len(), s.prediction_steps());
    }

    #[test]
    fn out_of_road_penalty() {
        let s = straight();
        let adv = AdversarialScenario::identity(&s);
        let mut sim = Simulator::new(&adv, SimConfig::default());
        let out = loop {
            let out = sim.step(Action::new(1.0, 1.0)).unwrap();
            if out.done {
                break out;
            }
        };
        assert!(out.info.out_of_road && !out.info.crash);
        assert!((out.reward - (out.info.progress - 10.0)).abs() < 1e-12);
    }

    #[test]
    fn progress_accounting() {
        let adv = lonely(500.0);
        let mut sim = Simulator::new(&adv, SimConfig::default());
        let mut sum = 0.0;
        let mut ret = 0.0;
        loop {
            let out = sim.step(Action::new(0.0, 0.2)).unwrap();
            sum += out.info.progress;
            ret += out.reward;
            if out.done {
                break;
            }
        }
        let r = sim.result();
        assert!((sum - (sim.progress() - sim.d_reset)).abs() < 1e-6);
        assert!((ret - r.route_completion * sim.route_length()).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_actions_stay_bounded(seed in 0u64..40, actions in prop::collection::vec((-1.5..1.5f64, -1.5..1.5f64), 80)) {
            let t = Template::ALL[(seed % 5) as usize];
            let s = forge_scenario(&ForgeConfig::new(t, seed).with_background(2));
            let adv = AdversarialScenario::identity(&s);
            let run = || {
                let mut sim = Simulator::new(&adv, SimConfig::default());
                let mut obs = vec![sim.reset()];
                let mut rewards = vec![];
                for &(a1, a2) in &actions {
                    let out = sim.step(Action::new(a1, a2)).unwrap();
                    rewards.push(out.reward);
                    obs.push(out.observation);
                    if out.done { break; }
                }
                (obs, rewards, sim.result())
            };
            let (obs, rewards, result) = run();
            for o in &obs {
                prop_assert_eq!(o.values().len(), OBS_DIM);
                prop_assert!(o.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
            for st in &result.ego_trajectory {
                prop_assert!(st.speed >= 0.0 && st.x.is_finite() && st.y.is_finite() && st.heading.is_finite());
            }
            let (obs2, rewards2, result2) = run();
            prop_assert_eq!(obs, obs2);
            prop_assert_eq!(rewards.iter().map(|r| r.to_bits()).collect::<Vec<_>>(), rewards2.iter().map(|r| r.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(result, result2);
        }
    }
}
