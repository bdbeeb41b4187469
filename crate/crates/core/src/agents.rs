//! Driving agents and the policy optimizer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::normalize_angle;
use crate::scenario::{parse_json, read_file, write_file, AdversarialScenario, ScenarioError, VehicleState};
use crate::simulator::{
    Action, EpisodeResult, Observation, SimConfig, Simulator, Trace, VehicleLimits, OBS_DIM,
};

pub const HIDDEN: usize = 64;
pub const ACTION_DIM: usize = 2;
pub const CHECKPOINT_VERSION: u32 = 1;
const MIN_STD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("observation has {got} values, the network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("observation value {index} is not finite")]
    NonFiniteObservation { index: usize },
    #[error("parameter vector has {got} entries, the architecture needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown agent `{0}` (expected replay, idm or policy:<checkpoint>)")]
    UnknownAgent(String),
    #[error(transparent)]
    File(#[from] ScenarioError),
}

// ---------------------------------------------------------------- IDM

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Time headway (s).
    pub headway: f64,
    /// Jam distance (m).
    pub s0: f64,
    pub a_max: f64,
    /// Comfortable deceleration (m/s^2).
    pub b: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 15.0,
            headway: 1.5,
            s0: 2.0,
            a_max: 1.5,
            b: 2.0,
            delta: 4.0,
        }
    }
}

/// Emergency braking returned for a nonpositive gap.
pub const IDM_EMERGENCY_DECEL: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub speed: f64,
    /// Bumper-to-bumper gap (m).
    pub gap: f64,
}

/// Intelligent-driver acceleration; the caller clamps to vehicle limits.
pub fn idm_accel(v: f64, leader: Option<Leader>, p: &IdmParams) -> f64 {
    let free = 1.0 - (v / p.v0).powf(p.delta);
    match leader {
        None => p.a_max * free,
        Some(l) if l.gap <= 0.0 => -IDM_EMERGENCY_DECEL,
        Some(l) => {
            let dv = v - l.speed;
            let s_star = p.s0 + (v * p.headway + v * dv / (2.0 * (p.a_max * p.b).sqrt())).max(0.0);
            p.a_max * (free - (s_star / l.gap).powi(2))
        }
    }
}

/// Steady-state gap behind a leader driving at `v`.
pub fn idm_equilibrium_gap(v: f64, p: &IdmParams) -> f64 {
    (p.s0 + v * p.headway) / (1.0 - (v / p.v0).powf(p.delta)).sqrt()
}

// ---------------------------------------------------------------- policy network

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input: OBS_DIM,
            hidden: vec![HIDDEN, HIDDEN],
            output: ACTION_DIM,
            activation: "tanh".to_string(),
        }
    }
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        let mut sizes = vec![self.input];
        sizes.extend(&self.hidden);
        sizes.push(self.output);
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

pub fn param_count() -> usize {
    Architecture::default().param_count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub params: Vec<f64>,
    /// Exploration standard deviation per action channel, before squashing.
    pub action_std: [f64; 2],
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; param_count()],
            action_std: [0.3, 0.3],
        }
    }

    /// Scaled uniform initialization with a small output layer.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count());
        for (fan_in, fan_out, gain) in [(OBS_DIM, HIDDEN, 1.0), (HIDDEN, HIDDEN, 1.0), (HIDDEN, ACTION_DIM, 0.1)] {
            let bound = gain / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            params,
            action_std: [0.3, 0.3],
        }
    }

    pub fn with_params(&self, params: Vec<f64>) -> Self {
        Self {
            params,
            action_std: self.action_std,
        }
    }

    /// Pre-squash action means.
    pub fn forward(&self, obs: &[f64]) -> Result<[f64; 2], AgentError> {
        if self.params.len() != param_count() {
            return Err(AgentError::ParamCount {
                expected: param_count(),
                got: self.params.len(),
            });
        }
        if obs.len() != OBS_DIM {
            return Err(AgentError::DimensionMismatch {
                expected: OBS_DIM,
                got: obs.len(),
            });
        }
        if let Some(index) = obs.iter().position(|v| !v.is_finite()) {
            return Err(AgentError::NonFiniteObservation { index });
        }
        let mut offset = 0;
        let h1 = dense(&self.params, &mut offset, obs, HIDDEN, true);
        let h2 = dense(&self.params, &mut offset, &h1, HIDDEN, true);
        let out = dense(&self.params, &mut offset, &h2, ACTION_DIM, false);
        Ok([out[0], out[1]])
    }
}

/// Row-major weights followed by biases.
fn dense(params: &[f64], offset: &mut usize, x: &[f64], out: usize, squash: bool) -> Vec<f64> {
    let n = x.len();
    let w = &params[*offset..*offset + n * out];
    let b = &params[*offset + n * out..*offset + n * out + out];
    *offset += n * out + out;
    (0..out)
        .map(|o| {
            let row = &w[o * n..(o + 1) * n];
            let z = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o];
            if squash {
                z.tanh()
            } else {
                z
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Deterministic,
    Stochastic,
}

fn log_normal_pdf(z: f64, mean: f64, std: f64) -> f64 {
    let u = (z - mean) / std;
    -0.5 * u * u - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `ln(1 - tanh(z)^2)` without cancellation.
fn log_one_minus_tanh_sq(z: f64) -> f64 {
    let softplus = |x: f64| if x > 30.0 { x } else { x.exp().ln_1p() };
    2.0 * (std::f64::consts::LN_2 - z - softplus(-2.0 * z))
}

/// Exact log-density of the squashed Gaussian at pre-squash sample `z`.
pub fn squashed_log_density(z: [f64; 2], mean: [f64; 2], std: [f64; 2]) -> f64 {
    (0..2)
        .map(|c| {
            let s = std[c].max(MIN_STD);
            log_normal_pdf(z[c], mean[c], s) - log_one_minus_tanh_sq(z[c])
        })
        .sum()
}

/// Deterministic mode returns `tanh(mean)` with log-prob 0. Stochastic mode
/// samples pre-squash Gaussian noise; the standard deviation is floored at
/// 1e-6 so the log-density stays finite as the noise vanishes.
pub fn policy_act<R: Rng + ?Sized>(
    params: &PolicyParams,
    obs: &Observation,
    mode: ActMode,
    rng: &mut R,
) -> Result<(Action, f64), AgentError> {
    let mean = params.forward(obs.values())?;
    match mode {
        ActMode::Deterministic => Ok((Action::new(mean[0].tanh(), mean[1].tanh()), 0.0)),
        ActMode::Stochastic => {
            let mut z = [0.0; 2];
            for c in 0..2 {
                let eps: f64 = StandardNormal.sample(rng);
                z[c] = mean[c] + params.action_std[c].max(MIN_STD) * eps;
            }
            let log_prob = squashed_log_density(z, mean, params.action_std);
            Ok((Action::new(z[0].tanh(), z[1].tanh()), log_prob))
        }
    }
}

// ---------------------------------------------------------------- checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub speed_scale: f64,
    pub lidar_range: f64,
    pub checkpoint_spacing: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            speed_scale: 30.0,
            lidar_range: sim.lidar_range,
            checkpoint_spacing: sim.checkpoint_spacing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub action_std: [f64; 2],
    pub normalization: Normalization,
}

impl PolicyCheckpoint {
    pub fn from_policy(p: &PolicyParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            architecture: Architecture::default(),
            params: p.params.clone(),
            action_std: p.action_std,
            normalization: Normalization::default(),
        }
    }

    pub fn into_policy(self) -> Result<PolicyParams, AgentError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!("version {}", self.version)));
        }
        if self.architecture != Architecture::default() {
            return Err(AgentError::Checkpoint(format!("architecture {:?}", self.architecture)));
        }
        if self.normalization != Normalization::default() {
            return Err(AgentError::Checkpoint("observation normalization differs".into()));
        }
        if self.params.len() != param_count() {
            return Err(AgentError::ParamCount {
                expected: param_count(),
                got: self.params.len(),
            });
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(AgentError::Checkpoint("non-finite parameter".into()));
        }
        Ok(PolicyParams {
            params: self.params,
            action_std: self.action_std,
        })
    }
}

pub fn save_policy(p: &PolicyParams, path: impl AsRef<Path>) -> Result<(), AgentError> {
    let text = serde_json::to_string(&PolicyCheckpoint::from_policy(p)).expect("checkpoint serializes");
    Ok(write_file(path.as_ref(), &text)?)
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<PolicyParams, AgentError> {
    let ck: PolicyCheckpoint = parse_json(&read_file(path.as_ref())?)?;
    ck.into_policy()
}

// ---------------------------------------------------------------- agents

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Control {
    Act { action: Action, log_prob: f64 },
    /// Place the ego at a state directly (log replay).
    Teleport(VehicleState),
}

pub trait Agent {
    fn name(&self) -> String;
    fn act(&mut self, sim: &Simulator<'_>, obs: &Observation) -> Control;
}

/// Replays the logged ego trajectory.
#[derive(Debug, Clone, Default)]
pub struct ReplayAgent;

impl Agent for ReplayAgent {
    fn name(&self) -> String {
        "replay".into()
    }

    fn act(&mut self, sim: &Simulator<'_>, _obs: &Observation) -> Control {
        let base = sim.scenario().base();
        let ego = base.ego();
        Control::Teleport(ego.states[(sim.clock() + 1).min(ego.states.len() - 1)])
    }
}

/// IDM along the route with pure-pursuit steering.
#[derive(Debug, Clone, Default)]
pub struct IdmAgent {
    pub params: IdmParams,
}

const LEADER_RANGE: f64 = 40.0;

impl IdmAgent {
    fn leader(&self, sim: &Simulator<'_>) -> Option<Leader> {
        let route = sim.route();
        let ego = sim.ego();
        let here = route.project(ego.position()).arc_length;
        let ego_half = 0.5 * sim.ego_dims().length;
        let mut best: Option<(f64, Leader)> = None;
        for (_, s, d) in sim.others() {
            let proj = route.project(s.position());
            let ahead = proj.arc_length - here;
            if ahead <= 0.0 || ahead > LEADER_RANGE || proj.lateral_offset.abs() > 0.5 * (3.5 + d.width) {
                continue;
            }
            let lane_heading = route.heading_at(proj.arc_length);
            let leader = Leader {
                speed: s.speed * normalize_angle(s.heading - lane_heading).cos(),
                gap: ahead - ego_half - 0.5 * d.length,
            };
            if best.as_ref().is_none_or(|(a, _)| ahead < *a) {
                best = Some((ahead, leader));
            }
        }
        best.map(|(_, l)| l)
    }
}

impl Agent for IdmAgent {
    fn name(&self) -> String {
        "idm".into()
    }

    fn act(&mut self, sim: &Simulator<'_>, _obs: &Observation) -> Control {
        let limits: VehicleLimits = sim.config().limits;
        let ego = sim.ego();
        let accel = idm_accel(ego.speed, self.leader(sim), &self.params).clamp(-limits.max_brake, limits.max_accel);
        let a2 = if accel >= 0.0 {
            accel / limits.max_accel
        } else {
            accel / limits.max_brake
        };
        Control::Act {
            action: Action::new(pure_pursuit(sim), a2),
            log_prob: 0.0,
        }
    }
}

/// Normalized steering toward a lookahead point on the route.
pub fn pure_pursuit(sim: &Simulator<'_>) -> f64 {
    let limits = sim.config().limits;
    let route = sim.route();
    let pose = sim.ego().pose();
    let lookahead = (0.8 * sim.ego().speed).max(6.0);
    let here = route.project(pose.position()).arc_length;
    let target = route.point_at(here + lookahead);
    let local = pose.to_local(target);
    let ld = local.norm().max(1e-6);
    let curvature = 2.0 * local.y / (ld * ld);
    (curvature * limits.wheelbase).atan() / limits.max_steer
}

/// Trainable policy.
#[derive(Debug, Clone)]
pub struct PolicyAgent {
    pub params: PolicyParams,
    pub mode: ActMode,
    rng: ChaCha8Rng,
}

impl PolicyAgent {
    pub fn new(params: PolicyParams, mode: ActMode, seed: u64) -> Self {
        Self {
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for PolicyAgent {
    fn name(&self) -> String {
        "policy".into()
    }

    fn act(&mut self, _sim: &Simulator<'_>, obs: &Observation) -> Control {
        let (action, log_prob) = policy_act(&self.params, obs, self.mode, &mut self.rng)
            .expect("simulator observations match the network");
        Control::Act { action, log_prob }
    }
}

/// Applies one fixed action forever.
#[derive(Debug, Clone, Copy)]
pub struct ConstantAgent(pub Action);

impl Agent for ConstantAgent {
    fn name(&self) -> String {
        "constant".into()
    }

    fn act(&mut self, _sim: &Simulator<'_>, _obs: &Observation) -> Control {
        Control::Act {
            action: self.0,
            log_prob: 0.0,
        }
    }
}

/// Agent selection as used on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentSpec {
    Replay,
    Idm,
    Policy(Box<PolicyParams>),
}

impl AgentSpec {
    /// `replay`, `idm` or `policy:<checkpoint path>`.
    pub fn parse(text: &str) -> Result<Self, AgentError> {
        match text {
            "replay" => Ok(AgentSpec::Replay),
            "idm" => Ok(AgentSpec::Idm),
            _ => match text.strip_prefix("policy:") {
                Some(path) => Ok(AgentSpec::Policy(Box::new(load_policy(path)?))),
                None => Err(AgentError::UnknownAgent(text.to_string())),
            },
        }
    }

    pub fn build(&self) -> Box<dyn Agent + Send> {
        match self {
            AgentSpec::Replay => Box::new(ReplayAgent),
            AgentSpec::Idm => Box::new(IdmAgent::default()),
            AgentSpec::Policy(p) => Box::new(PolicyAgent::new((**p).clone(), ActMode::Deterministic, 0)),
        }
    }
}

/// Runs one episode to termination.
pub fn run_episode(
    scenario: &AdversarialScenario,
    agent: &mut dyn Agent,
    config: &SimConfig,
) -> (EpisodeResult, Option<Trace>) {
    let mut sim = Simulator::new(scenario, *config);
    let mut obs = sim.observe();
    while !sim.is_done() {
        let out = match agent.act(&sim, &obs) {
            Control::Act { action, log_prob } => sim.step_with_log_prob(action, log_prob),
            Control::Teleport(state) => sim.step_teleport(state),
        }
        .expect("loop stops at done");
        obs = out.observation;
    }
    let trace = config.record_trace.then(|| sim.trace());
    (sim.result(), trace)
}

// ---------------------------------------------------------------- CEM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub init_std: f64,
    pub std_decay: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            population: 32,
            elite_fraction: 0.25,
            init_std: 0.05,
            std_decay: 0.995,
        }
    }
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).ceil() as usize).clamp(1, self.population)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemState {
    pub mean: Vec<f64>,
    pub std: f64,
    pub generation: u64,
}

impl CemState {
    pub fn new(mean: Vec<f64>, cfg: &CemConfig) -> Self {
        Self {
            mean,
            std: cfg.init_std,
            generation: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub population_mean: f64,
    pub elite_mean: f64,
    pub best: f64,
}

/// Random stream for generation `generation` of a run seeded with `seed`.
pub fn generation_rng(seed: u64, generation: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(generation);
    rng
}

/// One cross-entropy generation: member 0 is the current mean, the others add
/// isotropic Gaussian noise. The new mean averages the elite members and the
/// noise scale decays geometrically. Fitness is evaluated in parallel.
pub fn optimize_policy<E, F>(
    state: &CemState,
    cfg: &CemConfig,
    seed: u64,
    fitness: F,
) -> Result<(CemState, GenerationStats), E>
where
    E: Send,
    F: Fn(&[f64]) -> Result<f64, E> + Sync,
{
    let mut rng = generation_rng(seed, state.generation);
    let dim = state.mean.len();
    let members: Vec<Vec<f64>> = (0..cfg.population.max(1))
        .map(|i| {
            if i == 0 {
                state.mean.clone()
            } else {
                state
                    .mean
                    .iter()
                    .map(|m| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        m + state.std * eps
                    })
                    .collect()
            }
        })
        .collect();
    let scores = members
        .par_iter()
        .map(|m| fitness(m))
        .collect::<Result<Vec<f64>, E>>()?;
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let elites = &order[..cfg.elite_count().min(members.len())];
    let mut mean = vec![0.0; dim];
    for &e in elites {
        for (m, v) in mean.iter_mut().zip(&members[e]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= elites.len() as f64;
    }
    let population_mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let elite_mean = elites.iter().map(|&e| scores[e]).sum::<f64>() / elites.len() as f64;
    Ok((
        CemState {
            mean,
            std: state.std * cfg.std_decay,
            generation: state.generation + 1,
        },
        GenerationStats {
            population_mean,
            elite_mean,
            best: scores[order[0]],
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{forge_scenario, ForgeConfig, Template};
    use crate::geometry::Pose2;
    use crate::scenario::{tests::minimal_json, Scenario};
    use proptest::prelude::*;
    use std::convert::Infallible;
    use rand::Rng;

    #[test]
    fn idm_examples() {
        let p = IdmParams::default();
        assert!((idm_accel(0.0, None, &p) - 1.5).abs() < 1e-12);
        assert!(idm_accel(15.0, None, &p).abs() < 1e-12);
        let a = idm_accel(10.0, Some(Leader { speed: 10.0, gap: 34.0 }), &p);
        let oracle = 1.5 * (1.0 - (10.0f64 / 15.0).powi(4) - (17.0f64 / 34.0).powi(2));
        assert!((a - oracle).abs() < 1e-12);
        assert!((a - 0.8287).abs() < 1e-4);
        assert_eq!(idm_accel(5.0, Some(Leader { speed: 5.0, gap: 0.0 }), &p), -IDM_EMERGENCY_DECEL);
    }

    #[test]
    fn idm_follower_reaches_equilibrium() {
        let p = IdmParams::default();
        let v_lead = 10.0;
        let (mut x_lead, mut x, mut v) = (60.0, 0.0, 5.0);
        let dt = 0.01;
        let mut a = 0.0;
        for _ in 0..200_000 {
            a = idm_accel(v, Some(Leader { speed: v_lead, gap: x_lead - x }), &p);
            v += a * dt;
            x += v * dt;
            x_lead += v_lead * dt;
        }
        let gap = x_lead - x;
        assert!(a.abs() < 1e-3);
        let eq = idm_equilibrium_gap(v_lead, &p);
        assert!((gap - eq).abs() / eq < 0.01, "{gap} vs {eq}");
    }

    #[test]
    fn architecture_size() {
        assert_eq!(param_count(), 80 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
        assert_eq!(PolicyParams::random(1).params.len(), param_count());
    }

    fn obs(seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Observation((0..OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_network_acts_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, lp) = policy_act(&PolicyParams::zeros(), &obs(1), ActMode::Deterministic, &mut rng).unwrap();
        assert_eq!((a.a1, a.a2, lp), (0.0, 0.0, 0.0));
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyParams::zeros();
        assert!(matches!(
            policy_act(&p, &Observation(vec![0.0; 3]), ActMode::Deterministic, &mut rng),
            Err(AgentError::DimensionMismatch { expected: 80, got: 3 })
        ));
        let mut bad = obs(2);
        bad.0[5] = f64::NAN;
        assert!(matches!(
            policy_act(&p, &bad, ActMode::Deterministic, &mut rng),
            Err(AgentError::NonFiniteObservation { index: 5 })
        ));
    }

    #[test]
    fn vanishing_noise_approaches_deterministic() {
        let mut p = PolicyParams::random(4);
        let o = obs(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (det, _) = policy_act(&p, &o, ActMode::Deterministic, &mut rng).unwrap();
        p.action_std = [1e-12, 1e-12];
        let (sto, lp) = policy_act(&p, &o, ActMode::Stochastic, &mut rng).unwrap();
        assert!((det.a1 - sto.a1).abs() < 1e-5 && (det.a2 - sto.a2).abs() < 1e-5);
        assert!(lp.is_finite() && lp > 20.0);
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn log_density_matches_cell_probability() {
        let mut p = PolicyParams::random(8);
        p.action_std = [0.4, 0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in 0..20 {
            let o = obs(100 + k);
            let mean = p.forward(o.values()).unwrap();
            let (a, lp) = policy_act(&p, &o, ActMode::Stochastic, &mut rng).unwrap();
            let h = 1e-4;
            // Probability of the action cell, integrating the Gaussian over its pre-image.
            let mut prob = 1.0;
            for (c, ac) in [a.a1, a.a2].into_iter().enumerate() {
                let (lo, hi) = ((ac - h).atanh(), (ac + h).atanh());
                let s = p.action_std[c];
                let pdf = |z: f64| (-(z - mean[c]).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                prob *= simpson(pdf, lo, hi, 64);
            }
            let density = prob / (2.0 * h).powi(2);
            assert!((density / lp.exp() - 1.0).abs() < 1e-3, "{density} vs {}", lp.exp());
        }
    }

    proptest! {
        #[test]
        fn sampled_log_probs_are_finite(seed in 0u64..1000, s1 in 0.01..3.0f64, s2 in 0.01..3.0f64) {
            let mut p = PolicyParams::random(seed);
            p.action_std = [s1, s2];
            // Saturate the output bias to push samples toward the squash boundary.
            let n = p.params.len();
            p.params[n - 2] = 8.0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, lp) = policy_act(&p, &obs(seed), ActMode::Stochastic, &mut rng).unwrap();
            prop_assert!(lp.is_finite());
        }

        #[test]
        fn deterministic_mode_is_pure(seed in 0u64..1000) {
            let p = PolicyParams::random(seed);
            let o = obs(seed);
            let a = policy_act(&p, &o, ActMode::Deterministic, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let b = policy_act(&p, &o, ActMode::Deterministic, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let p = PolicyParams::random(5);
        save_policy(&p, &path).unwrap();
        assert_eq!(load_policy(&path).unwrap(), p);
        let mut ck = PolicyCheckpoint::from_policy(&p);
        ck.version = 9;
        assert!(matches!(ck.into_policy(), Err(AgentError::Checkpoint(_))));
    }

    #[test]
    fn cem_quadratic() {
        let cfg = CemConfig {
            init_std: 1.0,
            ..CemConfig::default()
        };
        let mut state = CemState::new(vec![0.0], &cfg);
        for _ in 0..50 {
            state = optimize_policy(&state, &cfg, 7, |t: &[f64]| Ok::<_, Infallible>(-(t[0] - 3.0).powi(2)))
                .unwrap()
                .0;
        }
        assert!((state.mean[0] - 3.0).abs() < 0.1, "{}", state.mean[0]);
    }

    #[test]
    fn cem_flat_objective_and_reproducibility() {
        let cfg = CemConfig::default();
        let state = CemState::new(vec![0.5; 10], &cfg);
        let flat = |_: &[f64]| Ok::<_, Infallible>(0.0);
        let (next, stats) = optimize_policy(&state, &cfg, 3, flat).unwrap();
        assert_eq!(stats.population_mean, 0.0);
        assert_eq!(stats.elite_mean, 0.0);
        // The mean moves by an average of 7 noise draws at most.
        for m in &next.mean {
            assert!((m - 0.5).abs() < 6.0 * cfg.init_std);
        }
        assert!((next.std - cfg.init_std * 0.995).abs() < 1e-15);
        let (again, _) = optimize_policy(&state, &cfg, 3, flat).unwrap();
        assert_eq!(next, again);
        let quad = |t: &[f64]| Ok::<_, Infallible>(-t.iter().map(|x| x * x).sum::<f64>());
        let (_, stats) = optimize_policy(&state, &cfg, 3, quad).unwrap();
        assert!(stats.elite_mean >= stats.population_mean);
    }

    fn straight() -> Scenario {
        Scenario::from_json(&minimal_json()).unwrap()
    }

    #[test]
    fn replay_agent_follows_log() {
        let s = straight();
        let adv = AdversarialScenario::identity(&s);
        let (r, _) = run_episode(&adv, &mut ReplayAgent, &SimConfig::default());
        assert!(!r.crashed && !r.out_of_road);
        assert_eq!(r.ego_trajectory[0], s.ego().states[s.history_steps]);
    }

    #[test]
    fn replay_never_crashes_on_corpus() {
        for t in Template::ALL {
            for seed in 0..20 {
                let s = forge_scenario(&ForgeConfig::new(t, seed).with_background(3));
                let (r, _) = run_episode(&AdversarialScenario::identity(&s), &mut ReplayAgent, &SimConfig::default());
                assert!(!r.crashed, "{} seed {seed}: {:?}", t.name(), r.crash_with);
            }
        }
    }

    #[test]
    fn idm_agent_drives_routes() {
        for t in Template::ALL {
            for seed in 0..6 {
                let s = forge_scenario(&ForgeConfig::new(t, seed));
                let (r, _) = run_episode(&AdversarialScenario::identity(&s), &mut IdmAgent::default(), &SimConfig::default());
                assert!(!r.out_of_road, "{} seed {seed}", t.name());
                assert!(r.route_completion > 0.3, "{} seed {seed}: {}", t.name(), r.route_completion);
            }
        }
    }

    #[test]
    fn idm_agent_brakes_for_stopped_leader() {
        let mut s = straight();
        let i = s.track_index("adv").unwrap();
        for st in &mut s.tracks[i].states {
            *st = VehicleState::new(Pose2::new(60.0, 0.0, 0.0), 0.0);
        }
        let (r, _) = run_episode(&AdversarialScenario::identity(&s), &mut IdmAgent::default(), &SimConfig::default());
        assert!(!r.crashed);
    }

    #[test]
    fn braking_agent_stops() {
        let s = straight();
        let mut agent = ConstantAgent(Action::new(0.0, -1.0));
        let (r, _) = run_episode(&AdversarialScenario::identity(&s), &mut agent, &SimConfig::default());
        assert!(!r.crashed);
        assert!(r.ego_trajectory.last().unwrap().speed == 0.0);
        assert!(r.route_completion < 0.1);
    }
}
