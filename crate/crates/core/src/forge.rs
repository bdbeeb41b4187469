//! Seeded synthetic scenario generator.
//!
//! Five road templates cover turns, crossing paths, merges, lane changes and
//! car following. Every forged scenario replays without any collision between
//! its logged tracks; adversarial behaviour only appears once the adversary's
//! future is resampled.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bezier_point, closest_approach, Dims, Polyline, Pose2, Vec2};
use crate::scenario::{
    write_file, LaneSegment, Scenario, ScenarioError, Track, TrafficMap, VehicleState,
    DEFAULT_DT, DEFAULT_HISTORY_STEPS, DEFAULT_HORIZON_STEPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    FourWayIntersection,
    TJunction,
    StraightMultilane,
    Curve,
    Merge,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::FourWayIntersection,
        Template::TJunction,
        Template::StraightMultilane,
        Template::Curve,
        Template::Merge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::FourWayIntersection => "four_way_intersection",
            Template::TJunction => "t_junction",
            Template::StraightMultilane => "straight_multilane",
            Template::Curve => "curve",
            Template::Merge => "merge",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Template::FourWayIntersection => 0x4a11,
            Template::TJunction => 0x7e57,
            Template::StraightMultilane => 0x5a1e,
            Template::Curve => 0xc0fe,
            Template::Merge => 0x3e6e,
        }
    }
}

impl std::str::FromStr for Template {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown template `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub template: Template,
    pub seed: u64,
    pub n_background_vehicles: usize,
    /// Range of logged cruise speeds in m/s.
    pub speed_range: (f64, f64),
}

impl ForgeConfig {
    pub fn new(template: Template, seed: u64) -> Self {
        Self {
            template,
            seed,
            n_background_vehicles: 2,
            speed_range: (7.0, 12.0),
        }
    }

    pub fn with_background(mut self, n: usize) -> Self {
        self.n_background_vehicles = n.min(6);
        self
    }
}

const LANE_WIDTH: f64 = 3.5;
const SAMPLE_STEP: f64 = 1.0;
/// Minimum footprint gap between any two logged tracks.
const LOG_MARGIN: f64 = 1.0;

struct MapBuilder {
    lanes: Vec<LaneSegment>,
    boundaries: Vec<Polyline>,
}

impl MapBuilder {
    fn new() -> Self {
        Self {
            lanes: Vec::new(),
            boundaries: Vec::new(),
        }
    }

    fn lane(&mut self, id: &str, pts: Vec<Vec2>, successors: &[&str]) {
        self.lanes.push(LaneSegment {
            id: id.to_string(),
            lane_width: LANE_WIDTH,
            successors: successors.iter().map(|s| s.to_string()).collect(),
            centerline: Polyline::new_dedup(pts).expect("template lanes are valid"),
            extra: Default::default(),
        });
    }

    fn boundary(&mut self, pts: Vec<Vec2>) {
        self.boundaries
            .push(Polyline::new_dedup(pts).expect("template boundaries are valid"));
    }

    fn path(&self, ids: &[&str]) -> Polyline {
        let mut pts = Vec::new();
        for id in ids {
            let lane = self
                .lanes
                .iter()
                .find(|l| l.id == *id)
                .expect("template path uses known lanes");
            pts.extend_from_slice(lane.centerline.points());
        }
        Polyline::new_dedup(pts).expect("template path is valid")
    }

    fn finish(self) -> TrafficMap {
        TrafficMap {
            lanes: self.lanes,
            boundaries: self.boundaries,
            extra: Default::default(),
        }
    }
}

fn segment(a: Vec2, b: Vec2) -> Vec<Vec2> {
    let n = ((b - a).norm() / SAMPLE_STEP).ceil().max(1.0) as usize;
    (0..=n).map(|i| a.lerp(b, i as f64 / n as f64)).collect()
}

/// Cubic Bezier leaving `p0` along `h0` and arriving at `p3` along `h3`.
fn smooth_turn(p0: Vec2, h0: f64, p3: Vec2, h3: f64) -> Vec<Vec2> {
    let d = p0.distance(p3);
    let k = 0.39 * d;
    let ctrl = [
        p0,
        p0 + Vec2::from_angle(h0) * k,
        p3 - Vec2::from_angle(h3) * k,
        p3,
    ];
    let n = (1.3 * d / SAMPLE_STEP).ceil().max(2.0) as usize;
    (0..=n)
        .map(|i| bezier_point(&ctrl, i as f64 / n as f64))
        .collect()
}

fn path_heading(path: &Polyline, s: f64) -> f64 {
    let a = path.point_at(s - 0.5);
    let b = path.point_at(s + 0.5);
    (b - a).angle()
}

/// Constant-speed drive along `path` from arc length `s0`.
fn drive(path: &Polyline, s0: f64, speed: f64, steps: usize, dt: f64) -> Vec<VehicleState> {
    (0..steps)
        .map(|k| {
            let s = s0 + speed * dt * k as f64;
            let p = path.point_at(s);
            let v = if s >= path.total_length() { 0.0 } else { speed };
            VehicleState::new(Pose2::new(p.x, p.y, path_heading(path, s)), v)
        })
        .collect()
}

fn vehicle_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims::new(rng.random_range(4.3..4.9), rng.random_range(1.8..2.0))
}

struct Draft {
    map: MapBuilder,
    dt: f64,
    steps: usize,
    ego: (Dims, Vec<VehicleState>),
    adversary: (Dims, Vec<VehicleState>),
    route: Vec<String>,
    /// Lane paths a background vehicle may be spawned on, with their flow speeds.
    spawn_paths: Vec<(Vec<&'static str>, Option<f64>)>,
}

fn clear_of(states: &[VehicleState], dims: Dims, others: &[(Dims, Vec<VehicleState>)]) -> bool {
    others
        .iter()
        .all(|(d, s)| closest_approach(states, dims, s, *d) >= LOG_MARGIN)
}

pub fn forge_scenario(cfg: &ForgeConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ cfg.template.salt());
    let draft = loop {
        let attempt = match cfg.template {
            Template::StraightMultilane => straight_multilane(cfg, &mut rng),
            Template::Curve => curve(cfg, &mut rng),
            Template::Merge => merge(cfg, &mut rng),
            Template::FourWayIntersection => four_way(cfg, &mut rng),
            Template::TJunction => t_junction(cfg, &mut rng),
        };
        if let Some(d) = attempt {
            if closest_approach(&d.ego.1, d.ego.0, &d.adversary.1, d.adversary.0) >= LOG_MARGIN {
                break d;
            }
        }
    };
    let mut placed = vec![draft.ego.clone(), draft.adversary.clone()];
    let mut background = Vec::new();
    let mut tries = 0;
    while background.len() < cfg.n_background_vehicles && tries < 400 {
        tries += 1;
        let (ids, flow) = &draft.spawn_paths[rng.random_range(0..draft.spawn_paths.len())];
        let path = draft.map.path(ids);
        let speed = flow.unwrap_or_else(|| rng.random_range(cfg.speed_range.0..cfg.speed_range.1));
        let s0 = rng.random_range(0.0..(path.total_length() * 0.6));
        let dims = vehicle_dims(&mut rng);
        let states = drive(&path, s0, speed, draft.steps, draft.dt);
        if clear_of(&states, dims, &placed) {
            placed.push((dims, states.clone()));
            background.push((dims, states));
        }
    }
    while background.len() < cfg.n_background_vehicles {
        // Parked well off the road network.
        let i = background.len() as f64;
        let dims = vehicle_dims(&mut rng);
        let pose = Pose2::new(-400.0 - 10.0 * i, -400.0, 0.0);
        background.push((dims, vec![VehicleState::new(pose, 0.0); draft.steps]));
    }

    let track = |id: &str, (dims, states): (Dims, Vec<VehicleState>)| Track {
        id: id.to_string(),
        length: dims.length,
        width: dims.width,
        states,
        extra: Default::default(),
    };
    let destination = draft.ego.1.last().expect("ego has states").position();
    let mut tracks = vec![track("ego", draft.ego), track("adv", draft.adversary)];
    for (i, b) in background.into_iter().enumerate() {
        tracks.push(track(&format!("bg{i}"), b));
    }
    let mut scenario = Scenario {
        dt: draft.dt,
        horizon_steps: draft.steps,
        history_steps: DEFAULT_HISTORY_STEPS,
        map: draft.map.finish(),
        tracks,
        ego_id: "ego".into(),
        adversary_id: "adv".into(),
        ego_route: draft.route,
        destination,
        extra: Default::default(),
    };
    scenario
        .extra
        .insert("template".into(), cfg.template.name().into());
    scenario.extra.insert("seed".into(), cfg.seed.into());
    let rotation = rng.random_range(0.0..TAU);
    let offset = Vec2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
    transform_scenario(&mut scenario, rotation, offset);
    scenario
        .validate()
        .expect("forged scenarios satisfy every invariant");
    scenario
}

/// Applies a rigid motion (rotation about the origin, then translation).
pub fn transform_scenario(s: &mut Scenario, rotation: f64, offset: Vec2) {
    let tf = |p: Vec2| p.rotate(rotation) + offset;
    let tf_line = |l: &Polyline| {
        Polyline::new(l.points().iter().map(|p| tf(*p)).collect()).expect("rigid motion keeps polylines valid")
    };
    for lane in &mut s.map.lanes {
        lane.centerline = tf_line(&lane.centerline);
    }
    for b in &mut s.map.boundaries {
        *b = tf_line(b);
    }
    for t in &mut s.tracks {
        for st in t.states.iter_mut().filter(|st| st.valid) {
            let p = tf(st.position());
            let pose = Pose2::new(p.x, p.y, st.heading + rotation);
            *st = VehicleState {
                x: pose.x,
                y: pose.y,
                heading: pose.heading,
                ..*st
            };
        }
    }
    s.destination = tf(s.destination);
}

fn base_draft(map: MapBuilder) -> (MapBuilder, f64, usize) {
    (map, DEFAULT_DT, DEFAULT_HORIZON_STEPS)
}

fn straight_multilane(cfg: &ForgeConfig, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let mut map = MapBuilder::new();
    let (x0, x1, x2) = (-60.0, 60.0, 260.0);
    let names = [["L0a", "L0b"], ["L1a", "L1b"], ["L2a", "L2b"]];
    for (i, [a, b]) in names.iter().enumerate() {
        let y = i as f64 * LANE_WIDTH;
        map.lane(a, segment(Vec2::new(x0, y), Vec2::new(x1, y)), &[b]);
        map.lane(b, segment(Vec2::new(x1, y), Vec2::new(x2, y)), &[]);
    }
    map.boundary(vec![Vec2::new(x0, -0.5 * LANE_WIDTH), Vec2::new(x2, -0.5 * LANE_WIDTH)]);
    map.boundary(vec![Vec2::new(x0, 2.5 * LANE_WIDTH), Vec2::new(x2, 2.5 * LANE_WIDTH)]);
    let (map, dt, steps) = base_draft(map);

    let ve = rng.random_range(cfg.speed_range.0..cfg.speed_range.1);
    let ego_path = map.path(&names[1]);
    let s_ego = 60.0;
    let ego_dims = vehicle_dims(rng);
    let ego = drive(&ego_path, s_ego, ve, steps, dt);

    // Adjacent lane (side swipe / cut-in) or same lane ahead (car following).
    let same_lane = rng.random_bool(0.3);
    let (adv_lane, offset, va) = if same_lane {
        (1, rng.random_range(18.0..32.0), ve + rng.random_range(0.0..2.0))
    } else {
        let lane = if rng.random_bool(0.5) { 0 } else { 2 };
        (lane, rng.random_range(-12.0..25.0), ve + rng.random_range(-3.0..2.0))
    };
    let adv_path = map.path(&names[adv_lane]);
    let adv_dims = vehicle_dims(rng);
    let adversary = drive(&adv_path, s_ego + offset, va.max(2.0), steps, dt);

    let flows = [
        if adv_lane == 0 { Some(va) } else { None },
        Some(if adv_lane == 1 { va } else { ve }),
        if adv_lane == 2 { Some(va) } else { None },
    ];
    let spawn_paths = (0..3)
        .map(|i| (names[i].to_vec(), flows[i]))
        .collect();
    Some(Draft {
        map,
        dt,
        steps,
        ego: (ego_dims, ego),
        adversary: (adv_dims, adversary),
        route: names[1].iter().map(|s| s.to_string()).collect(),
        spawn_paths,
    })
}

fn curve(cfg: &ForgeConfig, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let radius: f64 = rng.random_range(40.0..75.0);
    let sweep: f64 = rng.random_range(1.0..1.75);
    let turn = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let lead_in = 50.0;
    let lead_out = 160.0;
    // Reference line: straight east, arc, straight; lanes are lateral offsets of it.
    let reference = |s: f64| -> (Vec2, f64) {
        if s <= lead_in {
            (Vec2::new(s - lead_in, 0.0), 0.0)
        } else if s <= lead_in + radius * sweep {
            let a = (s - lead_in) / radius;
            let c = Vec2::new(0.0, turn * radius);
            let p = c + Vec2::new(a.sin() * radius, -turn * a.cos() * radius);
            (p, turn * a)
        } else {
            let a = sweep;
            let c = Vec2::new(0.0, turn * radius);
            let end = c + Vec2::new(a.sin() * radius, -turn * a.cos() * radius);
            let h = turn * a;
            (end + Vec2::from_angle(h) * (s - lead_in - radius * sweep), h)
        }
    };
    let offset_pts = |lat: f64, from: f64, to: f64| -> Vec<Vec2> {
        let n = ((to - from) / SAMPLE_STEP).ceil() as usize;
        (0..=n)
            .map(|i| {
                let s = from + (to - from) * i as f64 / n as f64;
                let (p, h) = reference(s);
                p + Vec2::from_angle(h).perp() * lat
            })
            .collect()
    };
    let arc_end = lead_in + radius * sweep;
    let total = arc_end + lead_out;
    let mut map = MapBuilder::new();
    let names = [["C0a", "C0b", "C0c"], ["C1a", "C1b", "C1c"]];
    for (i, [a, b, c]) in names.iter().enumerate() {
        let lat = -(i as f64) * LANE_WIDTH;
        map.lane(a, offset_pts(lat, 0.0, lead_in), &[b]);
        map.lane(b, offset_pts(lat, lead_in, arc_end), &[c]);
        map.lane(c, offset_pts(lat, arc_end, total), &[]);
    }
    map.boundary(offset_pts(0.5 * LANE_WIDTH, 0.0, total));
    map.boundary(offset_pts(-1.5 * LANE_WIDTH, 0.0, total));
    let (map, dt, steps) = base_draft(map);

    let ve = rng.random_range(cfg.speed_range.0..cfg.speed_range.1);
    let ego_lane = rng.random_range(0..2);
    let ego_path = map.path(&names[ego_lane]);
    let s_ego = rng.random_range(5.0..30.0);
    let ego_dims = vehicle_dims(rng);
    let ego = drive(&ego_path, s_ego, ve, steps, dt);

    let same_lane = rng.random_bool(0.3);
    let (adv_lane, offset, va) = if same_lane {
        (ego_lane, rng.random_range(18.0..32.0), ve + rng.random_range(0.0..2.0))
    } else {
        (1 - ego_lane, rng.random_range(-12.0..25.0), ve + rng.random_range(-3.0..2.0))
    };
    let adv_path = map.path(&names[adv_lane]);
    let adv_dims = vehicle_dims(rng);
    // Parallel lanes have different arc lengths through the bend; offset is measured at the start.
    let adversary = drive(&adv_path, (s_ego + offset).max(0.0), va.max(2.0), steps, dt);

    let spawn_paths = (0..2)
        .map(|i| {
            let flow = if i == adv_lane { va } else { ve };
            (names[i].to_vec(), Some(flow))
        })
        .collect();
    Some(Draft {
        map,
        dt,
        steps,
        ego: (ego_dims, ego),
        adversary: (adv_dims, adversary),
        route: names[ego_lane].iter().map(|s| s.to_string()).collect(),
        spawn_paths,
    })
}

fn merge(cfg: &ForgeConfig, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let mut map = MapBuilder::new();
    let (x0, x1) = (-90.0, 250.0);
    let ramp_start = Vec2::new(-90.0, -18.0);
    map.lane("Ma", segment(Vec2::new(x0, 0.0), Vec2::new(0.0, 0.0)), &["Mb"]);
    map.lane("Mb", segment(Vec2::new(0.0, 0.0), Vec2::new(x1, 0.0)), &[]);
    map.lane("Na", segment(Vec2::new(x0, LANE_WIDTH), Vec2::new(0.0, LANE_WIDTH)), &["Nb"]);
    map.lane("Nb", segment(Vec2::new(0.0, LANE_WIDTH), Vec2::new(x1, LANE_WIDTH)), &[]);
    let ramp = smooth_turn(ramp_start, 0.0, Vec2::new(0.0, 0.0), 0.0);
    map.lane("R", ramp.clone(), &["Mb"]);
    map.boundary(vec![Vec2::new(x0, 1.5 * LANE_WIDTH), Vec2::new(x1, 1.5 * LANE_WIDTH)]);
    map.boundary(vec![Vec2::new(0.0, -0.5 * LANE_WIDTH), Vec2::new(x1, -0.5 * LANE_WIDTH)]);
    map.boundary(vec![Vec2::new(x0, -0.5 * LANE_WIDTH), Vec2::new(-35.0, -0.5 * LANE_WIDTH)]);
    let outer: Vec<Vec2> = ramp
        .windows(2)
        .map(|w| w[0] + (w[1] - w[0]).perp() * (-0.5 * LANE_WIDTH / (w[1] - w[0]).norm()))
        .chain(std::iter::once(Vec2::new(0.0, -0.5 * LANE_WIDTH)))
        .collect();
    map.boundary(outer);
    let (map, dt, steps) = base_draft(map);

    let ve = rng.random_range(cfg.speed_range.0..cfg.speed_range.1);
    let ego_path = map.path(&["Ma", "Mb"]);
    let t_ego = rng.random_range(2.5..4.5);
    let s_ego = -x0 - ve * t_ego;
    let ego_dims = vehicle_dims(rng);
    let ego = drive(&ego_path, s_ego, ve, steps, dt);

    let behind = rng.random_bool(0.5);
    let delta = rng.random_range(1.8..3.0);
    let (t_adv, va) = if behind {
        (t_ego + delta, ve - rng.random_range(0.0..2.5))
    } else {
        (t_ego - delta, ve + rng.random_range(0.0..2.5))
    };
    let adv_path = map.path(&["R", "Mb"]);
    let ramp_len = map.path(&["R"]).total_length();
    let s_adv = ramp_len - va * t_adv;
    if t_adv < 1.2 || s_adv < 0.0 || va < 3.0 {
        return None;
    }
    let adv_dims = vehicle_dims(rng);
    let adversary = drive(&adv_path, s_adv, va, steps, dt);

    Some(Draft {
        map,
        dt,
        steps,
        ego: (ego_dims, ego),
        adversary: (adv_dims, adversary),
        route: vec!["Ma".into(), "Mb".into()],
        spawn_paths: vec![(vec!["Na", "Nb"], None)],
    })
}

/// Approach directions of the four-way intersection, as travel headings.
const APPROACHES: [(&str, f64); 4] = [
    ("S", FRAC_PI_2),
    ("W", 0.0),
    ("N", -FRAC_PI_2),
    ("E", PI),
];

fn four_way(cfg: &ForgeConfig, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let b = 10.0;
    let arm = 80.0;
    let mut map = MapBuilder::new();
    let right_of = |h: f64| Vec2::from_angle(h - FRAC_PI_2);
    for (name, h) in APPROACHES {
        let u = Vec2::from_angle(h);
        let r = right_of(h) * (0.5 * LANE_WIDTH);
        let entry = r - u * b;
        // Travel heading `h` leaves the box on the far side.
        let exit_name = |heading: f64| {
            APPROACHES
                .iter()
                .find(|(_, hh)| (crate::geometry::normalize_angle(hh - heading)).abs() < 1e-6)
                .map(|(n, _)| *n)
                .expect("quarter turns map onto approaches")
        };
        let straight = format!("{name}_straight");
        let left = format!("{name}_left");
        let right = format!("{name}_right");
        let out_s = format!("out_{}", exit_name(h));
        let out_l = format!("out_{}", exit_name(h + FRAC_PI_2));
        let out_r = format!("out_{}", exit_name(h - FRAC_PI_2));
        map.lane(
            &format!("in_{name}"),
            segment(entry - u * arm, entry),
            &[&straight, &left, &right],
        );
        map.lane(&straight, segment(entry, r + u * b), &[&out_s]);
        let hl = h + FRAC_PI_2;
        let exit_l = Vec2::from_angle(hl) * b + right_of(hl) * (0.5 * LANE_WIDTH);
        map.lane(&left, smooth_turn(entry, h, exit_l, hl), &[&out_l]);
        let hr = h - FRAC_PI_2;
        let exit_r = Vec2::from_angle(hr) * b + right_of(hr) * (0.5 * LANE_WIDTH);
        map.lane(&right, smooth_turn(entry, h, exit_r, hr), &[&out_r]);
    }
    // Outgoing lanes, named by the approach whose heading they continue.
    for (name, h) in APPROACHES {
        let u = Vec2::from_angle(h);
        let start = u * b + right_of(h) * (0.5 * LANE_WIDTH);
        map.lane(&format!("out_{name}"), segment(start, start + u * arm * 1.8), &[]);
    }
    // Kerbs at the four corners.
    for (_, h) in APPROACHES {
        let u = Vec2::from_angle(h);
        let r = right_of(h);
        let corner_in = r * LANE_WIDTH - u * b;
        let corner_out = -u * LANE_WIDTH + r * b;
        let mut pts = segment(corner_in - u * arm, corner_in);
        pts.extend(smooth_turn(corner_in, h, corner_out, h - FRAC_PI_2));
        pts.extend(segment(corner_out, corner_out + r * arm));
        map.boundary(pts);
    }
    let (map, dt, steps) = base_draft(map);

    let ego_dims = vehicle_dims(rng);
    let turn_right = rng.random_bool(0.25);
    let route: Vec<&str> = if turn_right {
        vec!["in_S", "S_right", "out_W"]
    } else {
        vec!["in_S", "S_straight", "out_S"]
    };
    let ve = if turn_right {
        rng.random_range(5.5..7.5)
    } else {
        rng.random_range(cfg.speed_range.0..cfg.speed_range.1)
    };
    let to_box = rng.random_range(15.0..35.0);
    let ego_path = map.path(&route);
    let ego = drive(&ego_path, arm - to_box, ve, steps, dt);
    let t_in = to_box / ve;
    let t_out = (to_box + 2.0 * b + ego_dims.length + 2.0) / ve;

    let adv_dims = vehicle_dims(rng);
    let adv_from = ["W", "E", "N"][rng.random_range(0..3)];
    let va = rng.random_range(cfg.speed_range.0..cfg.speed_range.1);
    let adv_route_owned = [
        format!("in_{adv_from}"),
        format!("{adv_from}_straight"),
        format!("out_{adv_from}"),
    ];
    let adv_route: Vec<&str> = adv_route_owned.iter().map(|s| s.as_str()).collect();
    let adv_path = map.path(&adv_route);
    let box_time = (2.0 * b + adv_dims.length + 2.0) / va;
    // Crossing traffic passes either well before or well after the ego.
    let arrive = if adv_from == "N" {
        rng.random_range(0.5..4.0)
    } else if rng.random_bool(0.5) {
        t_out + rng.random_range(1.0..2.5)
    } else {
        t_in - box_time - rng.random_range(1.0..2.0)
    };
    if arrive < 1.2 {
        return None;
    }
    let s_adv = arm - arrive * va;
    if s_adv < 0.0 {
        return None;
    }
    let adversary = drive(&adv_path, s_adv, va, steps, dt);

    let spawn: Vec<(Vec<&'static str>, Option<f64>)> = vec![
        (vec!["in_E", "E_right", "out_S"], None),
        (vec!["in_N", "N_straight", "out_N"], None),
        (vec!["in_W", "W_right", "out_N"], None),
        (vec!["in_S", "S_straight", "out_S"], Some(ve)),
        (vec!["in_E", "E_straight", "out_E"], None),
    ];
    Some(Draft {
        map,
        dt,
        steps,
        ego: (ego_dims, ego),
        adversary: (adv_dims, adversary),
        route: route.iter().map(|s| s.to_string()).collect(),
        spawn_paths: spawn,
    })
}

fn t_junction(cfg: &ForgeConfig, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let b = 10.0;
    let (west, east) = (-110.0, 170.0);
    let hw = 0.5 * LANE_WIDTH;
    let mut map = MapBuilder::new();
    map.lane("E_a", segment(Vec2::new(west, -hw), Vec2::new(-b, -hw)), &["E_mid", "E_to_side"]);
    map.lane("E_mid", segment(Vec2::new(-b, -hw), Vec2::new(b, -hw)), &["E_b"]);
    map.lane("E_b", segment(Vec2::new(b, -hw), Vec2::new(east, -hw)), &[]);
    map.lane("W_a", segment(Vec2::new(east, hw), Vec2::new(b, hw)), &["W_mid", "W_to_side"]);
    map.lane("W_mid", segment(Vec2::new(b, hw), Vec2::new(-b, hw)), &["W_b"]);
    map.lane("W_b", segment(Vec2::new(-b, hw), Vec2::new(west, hw)), &[]);
    let side_entry = Vec2::new(hw, -b);
    map.lane("side_in", segment(Vec2::new(hw, -b - 70.0), side_entry), &["side_right", "side_left"]);
    map.lane(
        "side_right",
        smooth_turn(side_entry, FRAC_PI_2, Vec2::new(b, -hw), 0.0),
        &["E_b"],
    );
    map.lane(
        "side_left",
        smooth_turn(side_entry, FRAC_PI_2, Vec2::new(-b, hw), PI),
        &["W_b"],
    );
    let side_exit = Vec2::new(-hw, -b);
    map.lane("side_out", segment(side_exit, Vec2::new(-hw, -b - 70.0)), &[]);
    map.lane(
        "E_to_side",
        smooth_turn(Vec2::new(-b, -hw), 0.0, side_exit, -FRAC_PI_2),
        &["side_out"],
    );
    map.lane(
        "W_to_side",
        smooth_turn(Vec2::new(b, hw), PI, side_exit, -FRAC_PI_2),
        &["side_out"],
    );
    map.boundary(vec![Vec2::new(west, LANE_WIDTH), Vec2::new(east, LANE_WIDTH)]);
    let mut left_kerb = segment(Vec2::new(west, -LANE_WIDTH), Vec2::new(-b, -LANE_WIDTH));
    left_kerb.extend(smooth_turn(
        Vec2::new(-b, -LANE_WIDTH),
        0.0,
        Vec2::new(-LANE_WIDTH, -b),
        -FRAC_PI_2,
    ));
    left_kerb.extend(segment(Vec2::new(-LANE_WIDTH, -b), Vec2::new(-LANE_WIDTH, -b - 70.0)));
    map.boundary(left_kerb);
    let mut right_kerb = segment(Vec2::new(LANE_WIDTH, -b - 70.0), Vec2::new(LANE_WIDTH, -b));
    right_kerb.extend(smooth_turn(Vec2::new(LANE_WIDTH, -b), FRAC_PI_2, Vec2::new(b, -LANE_WIDTH), 0.0));
    right_kerb.extend(segment(Vec2::new(b, -LANE_WIDTH), Vec2::new(east, -LANE_WIDTH)));
    map.boundary(right_kerb);
    let (map, dt, steps) = base_draft(map);

    let ve = rng.random_range(cfg.speed_range.0..cfg.speed_range.1);
    let route = ["E_a", "E_mid", "E_b"];
    let ego_path = map.path(&route);
    let to_junction = rng.random_range(15.0..40.0);
    let ego_dims = vehicle_dims(rng);
    let ego = drive(&ego_path, (-b - west) - to_junction, ve, steps, dt);

    let adv_dims = vehicle_dims(rng);
    let waiting = rng.random_bool(0.65);
    let adversary = if waiting {
        let side = map.path(&["side_in"]);
        let s = side.total_length() - 0.5 * adv_dims.length - rng.random_range(0.5..3.0);
        drive(&side, s, 0.0, steps, dt)
    } else {
        let path = map.path(&["W_a", "W_mid", "W_b"]);
        let va = rng.random_range(cfg.speed_range.0..cfg.speed_range.1);
        drive(&path, rng.random_range(0.0..70.0), va, steps, dt)
    };

    Some(Draft {
        map,
        dt,
        steps,
        ego: (ego_dims, ego),
        adversary: (adv_dims, adversary),
        route: route.iter().map(|s| s.to_string()).collect(),
        spawn_paths: vec![
            (vec!["E_a", "E_mid", "E_b"], Some(ve)),
            (vec!["W_a", "W_mid", "W_b"], None),
            (vec!["W_a", "W_to_side", "side_out"], Some(6.0)),
        ],
    })
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("corpus needs at least 2 scenarios, got {0}")]
    TooSmall(usize),
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error(transparent)]
    Io(#[from] ScenarioError),
}

#[derive(Debug, Clone)]
pub struct NamedScenario {
    pub name: String,
    pub scenario: Scenario,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<NamedScenario>,
    pub test: Vec<NamedScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub train_fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Config for the `index`-th scenario of a corpus: templates cycle, background counts vary.
pub fn corpus_config(seed: u64, index: usize) -> ForgeConfig {
    let template = Template::ALL[index % Template::ALL.len()];
    let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0xbac6);
    ForgeConfig::new(template, scene_seed).with_background(rng.random_range(0..=3))
}

pub fn forge_corpus(n: usize, train_fraction: f64, seed: u64) -> Result<Corpus, ForgeError> {
    if n < 2 {
        return Err(ForgeError::TooSmall(n));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ForgeError::BadFraction(train_fraction));
    }
    let scenes: Vec<NamedScenario> = (0..n)
        .map(|i| NamedScenario {
            name: format!("scene_{i:04}"),
            scenario: forge_scenario(&corpus_config(seed, i)),
        })
        .collect();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b117);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut test_idx: Vec<usize> = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| scenes[i].clone()).collect();
    Ok(Corpus {
        train: pick(&train_idx),
        test: pick(&test_idx),
    })
}

impl Corpus {
    pub fn manifest(&self, seed: u64, train_fraction: f64) -> Manifest {
        Manifest {
            seed,
            train_fraction,
            train: self.train.iter().map(|s| format!("{}.json", s.name)).collect(),
            test: self.test.iter().map(|s| format!("{}.json", s.name)).collect(),
        }
    }

    /// Writes one JSON file per scenario plus `manifest.json`.
    pub fn write(&self, dir: &Path, seed: u64, train_fraction: f64) -> Result<(), ForgeError> {
        std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for s in self.train.iter().chain(&self.test) {
            s.scenario.save(dir.join(format!("{}.json", s.name)))?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest(seed, train_fraction))
            .expect("manifest serializes");
        write_file(&dir.join("manifest.json"), &manifest)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::earliest_collision_step;

    #[test]
    fn forging_is_deterministic() {
        for t in Template::ALL {
            let a = forge_scenario(&ForgeConfig::new(t, 17));
            let b = forge_scenario(&ForgeConfig::new(t, 17));
            assert_eq!(a.to_json(), b.to_json());
            let c = forge_scenario(&ForgeConfig::new(t, 18));
            assert_ne!(a.to_json(), c.to_json());
        }
    }

    #[test]
    fn background_count() {
        let s = forge_scenario(&ForgeConfig::new(Template::StraightMultilane, 3).with_background(3));
        assert_eq!(s.tracks.len(), 5);
    }

    #[test]
    fn logs_never_collide() {
        for t in Template::ALL {
            for seed in 0..40 {
                let s = forge_scenario(&ForgeConfig::new(t, seed).with_background(4));
                for (i, a) in s.tracks.iter().enumerate() {
                    for b in &s.tracks[i + 1..] {
                        let k = earliest_collision_step(&a.states, a.dims(), &b.states, b.dims()).unwrap();
                        assert_eq!(k, None, "{} seed {seed}: {} vs {}", t.name(), a.id, b.id);
                    }
                }
            }
        }
    }

    #[test]
    fn routes_are_long_enough() {
        for t in Template::ALL {
            for seed in 0..20 {
                let s = forge_scenario(&ForgeConfig::new(t, seed));
                let route = s.route_polyline();
                assert!(route.total_length() >= 40.0);
                let start = route.project(s.ego().states[s.history_steps - 1].position());
                let goal = route.project(s.destination);
                assert!(goal.arc_length - start.arc_length >= 40.0, "{} seed {seed}", t.name());
                assert!(goal.lateral_offset.abs() < 0.5);
            }
        }
    }

    #[test]
    fn corpus_split() {
        let c = forge_corpus(10, 0.8, 5).unwrap();
        assert_eq!((c.train.len(), c.test.len()), (8, 2));
        let names: HashSet<_> = c.train.iter().map(|s| &s.name).collect();
        assert!(c.test.iter().all(|s| !names.contains(&s.name)));
        let again = forge_corpus(10, 0.8, 5).unwrap();
        let m1 = c.manifest(5, 0.8);
        assert_eq!(m1, again.manifest(5, 0.8));
        assert!(forge_corpus(1, 0.8, 5).is_err());
    }

    use std::collections::HashSet;

    #[test]
    fn large_split_counts() {
        // Only the split arithmetic matters here; scenario content is covered elsewhere.
        let n = 500usize;
        let n_train = ((n as f64 * 0.8).round() as usize).clamp(1, n - 1);
        assert_eq!((n_train, n - n_train), (400, 100));
    }
}
