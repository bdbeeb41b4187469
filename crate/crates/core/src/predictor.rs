//! Traffic prior over an opponent's future.
//!
//! The built-in [`KinematicPrior`] is goal based: it samples goal points on
//! lane centerlines reachable within the horizon, scores each goal by how much
//! heading, lateral position and speed the vehicle would have to change to get
//! there, and turns the best goals into kinematically bounded trajectories.
//! Probabilities are the softmax of the goal scores. Any other predictor can be
//! plugged in through [`TrafficPrior`] or the candidate JSON format.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bezier_point, normalize_angle, Polyline, Pose2, Vec2};
use crate::scenario::{parse_json, read_file, HistoryView, ScenarioError, VehicleState};

/// Longitudinal acceleration bound for feasible candidates (m/s^2).
pub const MAX_ACCEL: f64 = 6.0;
/// Lateral acceleration bound for feasible candidates (m/s^2).
pub const MAX_LATERAL_ACCEL: f64 = 8.0;
/// Slack on finite-difference acceleration estimates from positions.
const FD_SLACK: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("unknown vehicle `{0}`")]
    UnknownVehicle(String),
    #[error("vehicle `{id}` has {valid} valid history states, need at least 2")]
    ShortHistory { id: String, valid: usize },
    #[error("vehicle `{0}` is not observed at the history cutoff")]
    NotObserved(String),
    #[error("need at least one candidate")]
    ZeroCandidates,
    #[error("no feasible goal for vehicle `{0}`")]
    NoFeasibleGoal(String),
    #[error("candidate probabilities sum to {0}, more than 1e-3 away from 1")]
    ProbabilitySum(f64),
    #[error("candidate {candidate} has invalid probability {value}")]
    BadProbability { candidate: usize, value: f64 },
    #[error("candidate {candidate} is infeasible at step {step}: {what}")]
    Infeasible {
        candidate: usize,
        step: usize,
        what: String,
    },
    #[error("candidate {candidate} has {got} states, expected {expected}")]
    CandidateLength {
        candidate: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    File(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Weights on |heading change|, lateral offset and |required mean-speed change|.
    pub weights: [f64; 3],
    pub temperature: f64,
    /// Spacing of goal samples along centerlines (m).
    pub goal_spacing: f64,
    /// Minimum distance between two selected goals (m); grows while m goals still fit.
    pub nms_radius: f64,
    /// Default ramp acceleration of the trapezoidal speed profile (m/s^2).
    pub ramp_accel: f64,
    /// Goals whose lane heading differs more than this from the vehicle are dropped (rad).
    pub max_heading_change: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            weights: [1.0, 0.5, 0.2],
            temperature: 1.0,
            goal_spacing: 2.0,
            nms_radius: 3.0,
            ramp_accel: 2.0,
            max_heading_change: 1.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    pub point: Vec2,
    pub heading: f64,
    pub score: f64,
    /// Lane the goal lies on (`None` for ballistic goals).
    pub lane: Option<String>,
    /// Path from the current pose to the goal.
    path: Option<Polyline>,
}

impl Goal {
    pub fn path(&self) -> Option<&Polyline> {
        self.path.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCandidate {
    pub probability: f64,
    #[serde(with = "candidate_states")]
    pub states: Vec<VehicleState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane: Option<String>,
}

mod candidate_states {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Row {
        x: f64,
        y: f64,
        heading: f64,
        speed: f64,
    }

    pub fn serialize<S: serde::Serializer>(v: &[VehicleState], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Row> = v
            .iter()
            .map(|st| Row {
                x: st.x,
                y: st.y,
                heading: st.heading,
                speed: st.speed,
            })
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<VehicleState>, D::Error> {
        let rows = Vec::<Row>::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|r| VehicleState {
                x: r.x,
                y: r.y,
                heading: r.heading,
                speed: r.speed,
                valid: true,
            })
            .collect())
    }
}

/// `M` candidate futures whose probabilities sum to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    pub vehicle_id: String,
    candidates: Vec<TrajectoryCandidate>,
}

#[derive(Deserialize)]
struct RawCandidateSet {
    vehicle_id: String,
    candidates: Vec<TrajectoryCandidate>,
}

impl CandidateSet {
    /// Normalizes probabilities exactly; callers enforce any tolerance first.
    pub fn new(vehicle_id: impl Into<String>, mut candidates: Vec<TrajectoryCandidate>) -> Result<Self, PredictError> {
        if candidates.is_empty() {
            return Err(PredictError::ZeroCandidates);
        }
        for (i, c) in candidates.iter().enumerate() {
            if !(c.probability >= 0.0 && c.probability.is_finite()) {
                return Err(PredictError::BadProbability {
                    candidate: i,
                    value: c.probability,
                });
            }
        }
        let sum: f64 = candidates.iter().map(|c| c.probability).sum();
        if !(sum > 0.0) {
            return Err(PredictError::ProbabilitySum(sum));
        }
        for c in &mut candidates {
            c.probability /= sum;
        }
        Ok(Self {
            vehicle_id: vehicle_id.into(),
            candidates,
        })
    }

    pub fn candidates(&self) -> &[TrajectoryCandidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("candidates serialize")
    }

    /// Parses and validates an external candidate file. Probabilities within
    /// 1e-3 of summing to one are renormalized; kinematics are checked at `dt`.
    pub fn from_json(text: &str, dt: f64) -> Result<Self, PredictError> {
        let raw: RawCandidateSet = parse_json(text)?;
        if raw.candidates.is_empty() {
            return Err(PredictError::ZeroCandidates);
        }
        for (i, c) in raw.candidates.iter().enumerate() {
            if !(c.probability >= 0.0 && c.probability.is_finite()) {
                return Err(PredictError::BadProbability {
                    candidate: i,
                    value: c.probability,
                });
            }
        }
        let sum: f64 = raw.candidates.iter().map(|c| c.probability).sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(PredictError::ProbabilitySum(sum));
        }
        let expected = raw.candidates[0].states.len();
        for (i, c) in raw.candidates.iter().enumerate() {
            if c.states.len() != expected || expected < 2 {
                return Err(PredictError::CandidateLength {
                    candidate: i,
                    expected,
                    got: c.states.len(),
                });
            }
            check_feasibility(&c.states, dt).map_err(|(step, what)| PredictError::Infeasible {
                candidate: i,
                step,
                what,
            })?;
        }
        CandidateSet::new(raw.vehicle_id, raw.candidates)
    }
}

pub fn load_external_candidates(path: impl AsRef<Path>, dt: f64) -> Result<CandidateSet, PredictError> {
    CandidateSet::from_json(&read_file(path.as_ref())?, dt)
}

/// Checks longitudinal and lateral acceleration bounds; returns the first
/// offending step and a description.
pub fn check_feasibility(states: &[VehicleState], dt: f64) -> Result<(), (usize, String)> {
    for k in 0..states.len().saturating_sub(1) {
        let (a, b) = (&states[k], &states[k + 1]);
        let accel = (b.speed - a.speed) / dt;
        if accel.abs() > MAX_ACCEL + 1e-6 {
            return Err((k, format!("longitudinal acceleration {accel:.2} m/s^2")));
        }
        let ds = a.position().distance(b.position());
        if ds > 1e-3 {
            let curvature = normalize_angle(b.heading - a.heading).abs() / ds;
            let v = a.speed.max(b.speed);
            let lateral = curvature * v * v;
            if lateral > MAX_LATERAL_ACCEL + 1e-6 {
                return Err((k, format!("lateral acceleration {lateral:.2} m/s^2")));
            }
        }
    }
    // Accelerations implied by positions alone.
    let implied: Vec<f64> = states
        .windows(2)
        .map(|w| w[0].position().distance(w[1].position()) / dt)
        .collect();
    for k in 0..implied.len().saturating_sub(1) {
        let accel = (implied[k + 1] - implied[k]) / dt;
        if accel.abs() > MAX_ACCEL + FD_SLACK {
            return Err((k + 1, format!("implied acceleration {accel:.2} m/s^2")));
        }
    }
    Ok(())
}

/// Source of candidate futures for one vehicle.
pub trait TrafficPrior: Sync {
    fn propose(&self, x: &HistoryView<'_>, vehicle_id: &str, m: usize) -> Result<CandidateSet, PredictError>;
}

/// Goal-softmax kinematic sampler on the lane graph.
#[derive(Debug, Clone, Default)]
pub struct KinematicPrior {
    pub config: PredictorConfig,
}

impl TrafficPrior for KinematicPrior {
    fn propose(&self, x: &HistoryView<'_>, vehicle_id: &str, m: usize) -> Result<CandidateSet, PredictError> {
        generate_candidates(x, vehicle_id, m, &self.config)
    }
}

/// Replays a fixed candidate set (for example one loaded from disk).
#[derive(Debug, Clone)]
pub struct FixedPrior(pub CandidateSet);

impl TrafficPrior for FixedPrior {
    fn propose(&self, _x: &HistoryView<'_>, _vehicle_id: &str, _m: usize) -> Result<CandidateSet, PredictError> {
        Ok(self.0.clone())
    }
}

/// Trapezoidal speed profile covering a fixed distance in a fixed time.
#[derive(Debug, Clone, Copy, PartialEq)]
enum SpeedProfile {
    /// Ramp from `v0` at signed acceleration `accel` for `ramp` seconds, then hold.
    Cruise { v0: f64, accel: f64, ramp: f64 },
    /// Constant deceleration to a standstill at `stop` seconds.
    Stop { v0: f64, decel: f64, stop: f64 },
    Still,
}

impl SpeedProfile {
    fn solve(v0: f64, distance: f64, horizon: f64, ramp_accel: f64) -> Option<Self> {
        if distance <= 1e-6 {
            return (v0 <= 1e-6).then_some(SpeedProfile::Still);
        }
        let cruise_distance = v0 * horizon;
        let needed = 2.0 * (distance - cruise_distance).abs() / (horizon * horizon);
        let a = ramp_accel.max(needed * (1.0 + 1e-9));
        if a <= MAX_ACCEL {
            let t = horizon;
            let delta = if distance >= cruise_distance {
                a * (t - (t * t - 2.0 * (distance - cruise_distance) / a).max(0.0).sqrt())
            } else {
                -a * (t - (t * t - 2.0 * (cruise_distance - distance) / a).max(0.0).sqrt())
            };
            if v0 + delta >= 0.0 {
                return Some(SpeedProfile::Cruise {
                    v0,
                    accel: a * delta.signum(),
                    ramp: delta.abs() / a,
                });
            }
        }
        let decel = v0 * v0 / (2.0 * distance);
        if decel <= MAX_ACCEL && 2.0 * distance / v0 <= horizon {
            return Some(SpeedProfile::Stop {
                v0,
                decel,
                stop: v0 / decel,
            });
        }
        None
    }

    fn distance_at(&self, t: f64) -> f64 {
        match *self {
            SpeedProfile::Cruise { v0, accel, ramp } => {
                let tr = t.min(ramp);
                let ramp_dist = v0 * tr + 0.5 * accel * tr * tr;
                ramp_dist + (v0 + accel * ramp) * (t - ramp).max(0.0)
            }
            SpeedProfile::Stop { v0, decel, stop } => {
                let ts = t.min(stop);
                v0 * ts - 0.5 * decel * ts * ts
            }
            SpeedProfile::Still => 0.0,
        }
    }

    fn speed_at(&self, t: f64) -> f64 {
        match *self {
            SpeedProfile::Cruise { v0, accel, ramp } => v0 + accel * t.min(ramp),
            SpeedProfile::Stop { v0, decel, stop } => (v0 - decel * t.min(stop)).max(0.0),
            SpeedProfile::Still => 0.0,
        }
    }
}

struct LaneStart {
    lane: usize,
    arc: f64,
    lateral: f64,
    lane_change: bool,
}

/// Lanes the vehicle can continue on from its current pose.
fn start_lanes(x: &HistoryView<'_>, pose: &Pose2) -> Vec<LaneStart> {
    let p = pose.position();
    let mut out = Vec::new();
    for (i, lane) in x.map().lanes.iter().enumerate() {
        let proj = lane.centerline.project(p);
        let inside = proj.arc_length > 0.0 && proj.arc_length < lane.centerline.total_length();
        let aligned = normalize_angle(lane.centerline.heading_at(proj.arc_length) - pose.heading).cos() > 0.9;
        if inside && aligned && proj.lateral_offset.abs() <= 1.6 * lane.lane_width {
            out.push(LaneStart {
                lane: i,
                arc: proj.arc_length,
                lateral: proj.lateral_offset.abs(),
                lane_change: proj.lateral_offset.abs() > 0.5 * lane.lane_width,
            });
        }
    }
    // Only allow lane changes when there is a lane to change from.
    if out.iter().all(|s| s.lane_change) {
        out.clear();
    }
    out
}

#[derive(Clone)]
struct Piece {
    lane: usize,
    from: f64,
    to: f64,
}

fn cubic_join(p0: Vec2, h0: f64, p3: Vec2, h3: f64) -> Vec<Vec2> {
    let d = p0.distance(p3);
    if d < 1e-6 {
        return vec![p0];
    }
    let k = d / 3.0;
    let ctrl = [
        p0,
        p0 + Vec2::from_angle(h0) * k,
        p3 - Vec2::from_angle(h3) * k,
        p3,
    ];
    let n = (d / 0.5).ceil().max(2.0) as usize;
    (0..=n).map(|i| bezier_point(&ctrl, i as f64 / n as f64)).collect()
}

/// Candidate goals for `vehicle_id` over the next `horizon_s` seconds.
pub fn propose_goals(
    x: &HistoryView<'_>,
    vehicle_id: &str,
    horizon_s: f64,
    cfg: &PredictorConfig,
) -> Result<Vec<Goal>, PredictError> {
    let track = x
        .track(vehicle_id)
        .ok_or_else(|| PredictError::UnknownVehicle(vehicle_id.to_string()))?;
    let valid = track.valid_count();
    if valid < 2 {
        return Err(PredictError::ShortHistory {
            id: vehicle_id.to_string(),
            valid,
        });
    }
    let current = *track.last();
    if !current.valid {
        return Err(PredictError::NotObserved(vehicle_id.to_string()));
    }
    let pose = current.pose();
    let v0 = current.speed;
    let reach = v0 * horizon_s + 0.5 * MAX_ACCEL * horizon_s * horizon_s;
    let min_dist = v0 * v0 / (2.0 * MAX_ACCEL);
    let [w_heading, w_lateral, w_speed] = cfg.weights;
    let score = |heading: f64, lateral: f64, dist: f64| {
        -(w_heading * normalize_angle(heading - pose.heading).abs()
            + w_lateral * lateral
            + w_speed * (dist / horizon_s - v0).abs())
    };
    let mut goals = Vec::new();
    let lanes = &x.map().lanes;

    if min_dist <= 1e-9 {
        goals.push(Goal {
            point: pose.position(),
            heading: pose.heading,
            score: score(pose.heading, 0.0, 0.0),
            lane: None,
            path: None,
        });
    }

    let starts = start_lanes(x, &pose);
    if starts.is_empty() {
        // Off the lane graph: keep going along the current heading.
        let dir = pose.direction();
        let mut d = cfg.goal_spacing;
        while d <= reach {
            if d >= min_dist {
                let end = pose.position() + dir * d;
                goals.push(Goal {
                    point: end,
                    heading: pose.heading,
                    score: score(pose.heading, 0.0, d),
                    lane: None,
                    path: Polyline::new(vec![pose.position(), end]).ok(),
                });
            }
            d += cfg.goal_spacing;
        }
        return Ok(goals);
    }

    for start in &starts {
        let lane0 = &lanes[start.lane];
        let join = if start.lane_change {
            (v0 * 2.0).clamp(10.0, 30.0)
        } else {
            (v0 * 1.0).clamp(3.0, 12.0)
        };
        // Breadth-first over successors; each entry is a lane piece chain.
        let mut queue = VecDeque::new();
        queue.push_back((vec![Piece { lane: start.lane, from: start.arc, to: lane0.centerline.total_length() }], 0.0f64));
        let mut visited = vec![false; lanes.len()];
        visited[start.lane] = true;
        while let Some((pieces, dist_before)) = queue.pop_front() {
            let last = pieces.last().expect("nonempty chain").clone();
            let lane = &lanes[last.lane];
            let mut arc = last.from + if pieces.len() == 1 { cfg.goal_spacing } else { 0.0 };
            while arc <= last.to && dist_before + (arc - last.from) <= reach {
                let along = dist_before + (arc - last.from);
                if along >= join.min(min_dist.max(cfg.goal_spacing)) || along >= min_dist {
                    let heading = lane.centerline.heading_at(arc);
                    if normalize_angle(heading - pose.heading).abs() <= cfg.max_heading_change {
                        let point = lane.centerline.point_at(arc);
                        let mut chain = pieces.clone();
                        chain.last_mut().expect("nonempty").to = arc;
                        if let Some(path) = build_path(x, &pose, &chain, join, point, heading) {
                            if path.total_length() >= min_dist {
                                goals.push(Goal {
                                    point,
                                    heading,
                                    score: score(heading, start.lateral, path.total_length()),
                                    lane: Some(lane.id.clone()),
                                    path: Some(path),
                                });
                            }
                        }
                    }
                }
                arc += cfg.goal_spacing;
            }
            let dist_after = dist_before + (last.to - last.from);
            if dist_after >= reach {
                continue;
            }
            for succ in &lane.successors {
                let Some(j) = x.map().lane_index(succ) else { continue };
                if visited[j] {
                    continue;
                }
                visited[j] = true;
                let mut chain = pieces.clone();
                chain.push(Piece {
                    lane: j,
                    from: 0.0,
                    to: lanes[j].centerline.total_length(),
                });
                queue.push_back((chain, dist_after));
            }
        }
    }
    Ok(goals)
}

/// Smoothed path: a cubic join from the pose onto the lane chain, then the chain to the goal.
fn build_path(
    x: &HistoryView<'_>,
    pose: &Pose2,
    chain: &[Piece],
    join: f64,
    goal: Vec2,
    goal_heading: f64,
) -> Option<Polyline> {
    let lanes = &x.map().lanes;
    let mut remaining_join = join;
    let mut pts: Vec<Vec2> = Vec::new();
    let mut joined = false;
    for piece in chain {
        let line = &lanes[piece.lane].centerline;
        let len = piece.to - piece.from;
        if !joined {
            if len < remaining_join {
                remaining_join -= len;
                continue;
            }
            let at = piece.from + remaining_join;
            let q = line.point_at(at);
            pts.extend(cubic_join(pose.position(), pose.heading, q, line.heading_at(at)));
            joined = true;
            let rest = line.slice(at, piece.to).ok();
            if let Some(rest) = rest {
                pts.extend_from_slice(&rest.points()[1..]);
            }
            continue;
        }
        if let Ok(seg) = line.slice(piece.from, piece.to) {
            pts.extend_from_slice(seg.points());
        }
    }
    if !joined {
        pts = cubic_join(pose.position(), pose.heading, goal, goal_heading);
    }
    Polyline::new_dedup(pts).ok()
}

fn heading_along(path: &Polyline, s: f64) -> f64 {
    let total = path.total_length();
    let a = path.point_at((s - 0.5).max(0.0));
    let b = path.point_at((s + 0.5).min(total));
    if a.distance(b) < 1e-9 {
        path.heading_at(s)
    } else {
        (b - a).angle()
    }
}

fn trajectory(
    start: &VehicleState,
    path: Option<&Polyline>,
    profile: SpeedProfile,
    steps: usize,
    dt: f64,
) -> Vec<VehicleState> {
    (1..=steps)
        .map(|k| {
            let t = k as f64 * dt;
            let speed = profile.speed_at(t);
            match path {
                Some(path) => {
                    let s = profile.distance_at(t).min(path.total_length());
                    let p = path.point_at(s);
                    VehicleState::new(Pose2::new(p.x, p.y, heading_along(path, s)), speed)
                }
                None => VehicleState::new(start.pose(), speed),
            }
        })
        .collect()
}

/// Ramp accelerations used to diversify duplicated goals.
const RAMP_VARIANTS: [f64; 5] = [1.0, 3.5, 0.5, 5.0, 1.5];
const NMS_GROWTH: f64 = 1.25;

/// `m` candidate futures for `vehicle_id`, probabilities from a softmax over goal scores.
pub fn generate_candidates(
    x: &HistoryView<'_>,
    vehicle_id: &str,
    m: usize,
    cfg: &PredictorConfig,
) -> Result<CandidateSet, PredictError> {
    if m == 0 {
        return Err(PredictError::ZeroCandidates);
    }
    let steps = x.prediction_steps();
    let dt = x.dt();
    let horizon = steps as f64 * dt;
    let mut goals = propose_goals(x, vehicle_id, horizon, cfg)?;
    goals.sort_by(|a, b| b.score.total_cmp(&a.score));
    let start = *x.track(vehicle_id).expect("checked by propose_goals").last();

    let build = |goal: &Goal, ramp: f64| -> Option<Vec<VehicleState>> {
        let distance = goal.path.as_ref().map_or(0.0, |p| p.total_length());
        let profile = SpeedProfile::solve(start.speed, distance, horizon, ramp)?;
        let states = trajectory(&start, goal.path.as_ref(), profile, steps, dt);
        check_feasibility(&states, dt).ok()?;
        Some(states)
    };

    let feasible: Vec<(usize, Vec<VehicleState>)> = goals
        .iter()
        .enumerate()
        .filter_map(|(i, g)| build(g, cfg.ramp_accel).map(|states| (i, states)))
        .collect();
    // Goals grouped by lane, groups ordered by their best score.
    let mut groups: Vec<(Option<&String>, Vec<usize>)> = Vec::new();
    for (k, (i, _)) in feasible.iter().enumerate() {
        let lane = goals[*i].lane.as_ref();
        match groups.iter_mut().find(|(l, _)| *l == lane) {
            Some((_, members)) => members.push(k),
            None => groups.push((lane, vec![k])),
        }
    }
    // Round-robin over lanes so every reachable maneuver is represented.
    let suppress = |radius: f64| -> Vec<usize> {
        let mut kept: Vec<usize> = Vec::new();
        let mut cursor = vec![0usize; groups.len()];
        loop {
            let mut progressed = false;
            for (g, (_, members)) in groups.iter().enumerate() {
                if kept.len() == m {
                    return kept;
                }
                while let Some(&k) = members.get(cursor[g]) {
                    cursor[g] += 1;
                    let p = goals[feasible[k].0].point;
                    if kept.iter().all(|&j| goals[feasible[j].0].point.distance(p) >= radius) {
                        kept.push(k);
                        progressed = true;
                        break;
                    }
                }
            }
            if !progressed {
                return kept;
            }
        }
    };
    // Widest suppression radius that still leaves m goals, so the set spans the reachable area.
    let mut kept = suppress(cfg.nms_radius);
    let mut radius = cfg.nms_radius;
    while kept.len() == m && m > 1 {
        radius *= NMS_GROWTH;
        let wider = suppress(radius);
        if wider.len() < m {
            break;
        }
        kept = wider;
    }
    let mut picked: Vec<(usize, Vec<VehicleState>)> = kept.into_iter().map(|k| feasible[k].clone()).collect();
    if picked.is_empty() {
        return Err(PredictError::NoFeasibleGoal(vehicle_id.to_string()));
    }
    // Shortfall: replay the best goals with other ramp accelerations.
    let base = picked.len();
    'fill: for ramp in RAMP_VARIANTS {
        for r in 0..base {
            if picked.len() == m {
                break 'fill;
            }
            let gi = picked[r].0;
            if let Some(states) = build(&goals[gi], ramp) {
                picked.push((gi, states));
            }
        }
    }
    let mut r = 0;
    while picked.len() < m {
        let dup = picked[r % base].clone();
        picked.push(dup);
        r += 1;
    }

    let t = cfg.temperature.max(1e-9);
    let max_score = picked
        .iter()
        .map(|(i, _)| goals[*i].score)
        .fold(f64::NEG_INFINITY, f64::max);
    let candidates = picked
        .into_iter()
        .map(|(i, states)| TrajectoryCandidate {
            probability: ((goals[i].score - max_score) / t).exp(),
            states,
            goal: Some(goals[i].point.into()),
            lane: goals[i].lane.clone(),
        })
        .collect();
    CandidateSet::new(vehicle_id, candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{forge_scenario, ForgeConfig, Template};
    use crate::scenario::{splice_gap, tests::minimal_json, Scenario, SPLICE_TOLERANCE};

    fn straight() -> Scenario {
        Scenario::from_json(&minimal_json()).unwrap()
    }

    #[test]
    fn goals_respect_reachability() {
        let s = straight();
        let x = s.history();
        let goals = propose_goals(&x, "adv", 8.0, &PredictorConfig::default()).unwrap();
        assert!(!goals.is_empty());
        let origin = x.track("adv").unwrap().last().position();
        let line = &s.map.lanes[0].centerline;
        let start = line.project(origin).arc_length;
        for g in &goals {
            let ahead = line.project(g.point).arc_length - start;
            assert!((0.0..=10.0 * 8.0 + 0.5 * 6.0 * 64.0).contains(&ahead), "{ahead}");
            assert!(g.score.is_finite());
        }
    }

    #[test]
    fn candidates_span_lanes_and_speeds() {
        let cfg = PredictorConfig::default();
        for seed in 0..6 {
            let s = forge_scenario(&ForgeConfig::new(Template::StraightMultilane, seed));
            let x = s.history();
            let set = generate_candidates(&x, &s.adversary_id, 32, &cfg).unwrap();
            let lanes: std::collections::BTreeSet<_> = set.candidates().iter().filter_map(|c| c.lane.clone()).collect();
            let own = x.track(&s.adversary_id).unwrap().last().position();
            let lane_of = |id: &str| s.map.lane(id).unwrap().centerline.project(own).lateral_offset.abs() < 1.0;
            assert!(lanes.iter().any(|l| !lane_of(l)), "seed {seed}: no lane change in {lanes:?}");
            let travel: Vec<f64> = set
                .candidates()
                .iter()
                .map(|c| c.states.last().unwrap().position().distance(c.states[0].position()))
                .collect();
            let (lo, hi) = travel.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &d| (a.min(d), b.max(d)));
            let v0 = x.track(&s.adversary_id).unwrap().last().speed;
            let cruise = v0 * x.prediction_steps() as f64 * x.dt();
            assert!(lo < 0.5 * cruise && hi > 1.5 * cruise, "seed {seed}: travel {lo:.1}..{hi:.1} vs {cruise:.1}");
        }
    }

    #[test]
    fn stationary_vehicle_keeps_its_position_as_goal() {
        let mut s = straight();
        let idx = s.track_index("adv").unwrap();
        for st in &mut s.tracks[idx].states {
            st.x = 30.0;
            st.speed = 0.0;
        }
        let x = s.history();
        let goals = propose_goals(&x, "adv", 8.0, &PredictorConfig::default()).unwrap();
        assert!(goals.iter().any(|g| g.point.distance(Vec2::new(30.0, 0.0)) < 1e-9));
    }

    #[test]
    fn unknown_vehicle_and_short_history() {
        let s = straight();
        let cfg = PredictorConfig::default();
        assert!(matches!(
            propose_goals(&s.history(), "nobody", 8.0, &cfg),
            Err(PredictError::UnknownVehicle(_))
        ));
        let mut s1 = s.clone();
        s1.history_steps = 1;
        assert!(matches!(
            propose_goals(&s1.history(), "adv", 8.0, &cfg),
            Err(PredictError::ShortHistory { .. })
        ));
    }

    fn fork_scene() -> Scenario {
        // Ego well behind; adversary approaching the intersection from the south is
        // replaced by the ego here so the fork is in front of the predicted vehicle.
        forge_scenario(&ForgeConfig::new(Template::FourWayIntersection, 4))
    }

    #[test]
    fn fork_goals_cover_branches() {
        let s = fork_scene();
        let x = s.history();
        let goals = propose_goals(&x, "ego", 8.0, &PredictorConfig::default()).unwrap();
        let lanes: std::collections::HashSet<_> = goals.iter().filter_map(|g| g.lane.clone()).collect();
        for branch in ["S_straight", "S_left", "S_right"] {
            assert!(lanes.contains(branch), "missing {branch}: {lanes:?}");
        }
        let set = generate_candidates(&x, "ego", 32, &PredictorConfig::default()).unwrap();
        let exits: std::collections::HashSet<_> = set
            .candidates()
            .iter()
            .filter_map(|c| c.lane.clone())
            .filter(|l| l.starts_with("out_") || l.starts_with("S_"))
            .collect();
        assert!(exits.len() >= 2, "{exits:?}");
    }

    #[test]
    fn single_candidate_has_unit_probability() {
        let s = straight();
        let set = generate_candidates(&s.history(), "adv", 1, &PredictorConfig::default()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.candidates()[0].probability, 1.0);
    }

    #[test]
    fn candidates_are_consistent_and_feasible() {
        let cfg = PredictorConfig::default();
        for t in Template::ALL {
            for seed in 0..6 {
                let s = forge_scenario(&ForgeConfig::new(t, seed));
                let x = s.history();
                let set = generate_candidates(&x, &s.adversary_id, 32, &cfg).unwrap();
                assert_eq!(set.len(), 32);
                let sum: f64 = set.candidates().iter().map(|c| c.probability).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for c in set.candidates() {
                    assert_eq!(c.states.len(), 80);
                    assert!(splice_gap(&s, &c.states[0]) <= SPLICE_TOLERANCE, "{}", t.name());
                    check_feasibility(&c.states, s.dt).unwrap();
                    for k in 0..79 {
                        let fd = c.states[k].position().distance(c.states[k + 1].position()) / s.dt;
                        assert!((fd - c.states[k].speed).abs() <= 0.5, "{} step {k}: {fd} vs {}", t.name(), c.states[k].speed);
                    }
                }
                let again = generate_candidates(&x, &s.adversary_id, 32, &cfg).unwrap();
                assert_eq!(set, again);
            }
        }
    }

    #[test]
    fn speed_profiles_cover_distance() {
        for (v0, d) in [(10.0, 80.0), (10.0, 120.0), (10.0, 30.0), (0.0, 40.0), (12.0, 13.0), (5.0, 150.0)] {
            let p = SpeedProfile::solve(v0, d, 8.0, 2.0).unwrap();
            assert!((p.distance_at(8.0) - d).abs() < 1e-6, "{v0} {d}: {p:?}");
            assert!(p.speed_at(8.0) >= 0.0);
        }
        assert!(SpeedProfile::solve(10.0, 5.0, 8.0, 2.0).is_none());
        assert!(SpeedProfile::solve(10.0, 300.0, 8.0, 2.0).is_none());
    }

    fn external_json(sum: f64, accel_spike: bool) -> String {
        let states = |v: f64| -> Vec<serde_json::Value> {
            let mut x = 0.0;
            (0..80)
                .map(|k| {
                    let speed = if accel_spike && k >= 40 { v + 5.0 } else { v };
                    x += speed * 0.1;
                    serde_json::json!({"x": x, "y": 0.0, "heading": 0.0, "speed": speed})
                })
                .collect()
        };
        serde_json::json!({
            "vehicle_id": "adv",
            "candidates": [
                {"probability": 0.5 * sum, "states": states(10.0)},
                {"probability": 0.5 * sum, "states": states(8.0)}
            ]
        })
        .to_string()
    }

    #[test]
    fn external_candidates_tolerance() {
        let set = CandidateSet::from_json(&external_json(1.0005, false), 0.1).unwrap();
        let sum: f64 = set.candidates().iter().map(|c| c.probability).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(matches!(
            CandidateSet::from_json(&external_json(0.5, false), 0.1),
            Err(PredictError::ProbabilitySum(_))
        ));
    }

    #[test]
    fn external_candidates_kinematics() {
        match CandidateSet::from_json(&external_json(1.0, true), 0.1) {
            Err(PredictError::Infeasible { candidate: 0, step, what }) => {
                assert_eq!(step, 39, "{what}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn candidate_json_round_trip() {
        let s = straight();
        let set = generate_candidates(&s.history(), "adv", 4, &PredictorConfig::default()).unwrap();
        let back = CandidateSet::from_json(&set.to_json(), s.dt).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in set.candidates().iter().zip(back.candidates()) {
            assert_eq!(a.states, b.states);
            assert!((a.probability - b.probability).abs() < 1e-15);
        }
    }
}
