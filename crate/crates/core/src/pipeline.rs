//! Training pipelines: no adversary, rule-based adversary, open-loop and
//! closed-loop adversarial generation.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use web_time::Instant;

use crate::agents::{generation_rng, optimize_policy, run_episode, ActMode, AgentError, CemConfig, CemState, PolicyAgent, PolicyParams};
use crate::geometry::{bezier_point, earliest_collision_step, GeometryError, Polyline, Pose2, Vec2};
use crate::predictor::{CandidateSet, KinematicPrior, PredictError, PredictorConfig, TrafficPrior};
use crate::resampler::{posterior_scores, select_adversarial, EgoRolloutBuffer, PosteriorScore, ResampleError};
use crate::scenario::{apply_adversary, parse_json, read_file, write_file, AdversarialScenario, Scenario, ScenarioError, VehicleState};
use crate::simulator::{EpisodeResult, SimConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scenario pool is empty")]
    EmptyPool,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ego route ahead is only {0:.1} m long, need at least 10 m")]
    RouteTooShort(f64),
    #[error("checkpoint does not match this run: {0}")]
    CheckpointMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoAdv,
    RuleBased,
    OpenLoop,
    ClosedLoop,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::NoAdv, Mode::RuleBased, Mode::OpenLoop, Mode::ClosedLoop];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NoAdv => "no_adv",
            Mode::RuleBased => "rule_based",
            Mode::OpenLoop => "open_loop",
            Mode::ClosedLoop => "closed_loop",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown mode `{s}`")))
    }
}

/// How the adversary future is chosen among the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    /// Keep the logged future.
    None,
    /// Posterior argmax over prior, ego buffer and collision likelihood.
    Cat,
    /// Most likely candidate under the prior alone.
    PriorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    /// Fractions of the logged ego progress where waypoints are placed.
    pub waypoint_fractions: Vec<f64>,
    pub samples: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            waypoint_fractions: vec![0.25, 0.5, 0.75],
            samples: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatConfig {
    pub mode: Mode,
    /// Candidates per generated scene.
    pub m: usize,
    /// Ego rollouts kept per scene.
    pub n: usize,
    pub alpha: f64,
    pub generations: u64,
    pub seed: u64,
    /// Scenes sampled per optimizer generation.
    pub scenes_per_generation: usize,
    pub cem: CemConfig,
    pub predictor: PredictorConfig,
    pub sim: SimConfig,
    pub rule: RuleConfig,
}

impl Default for CatConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ClosedLoop,
            m: 32,
            n: 5,
            alpha: 0.99,
            generations: 100,
            seed: 0,
            scenes_per_generation: 2,
            cem: CemConfig::default(),
            predictor: PredictorConfig::default(),
            sim: SimConfig::default(),
            rule: RuleConfig::default(),
        }
    }
}

impl CatConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.m < 1 || self.n < 1 {
            return Err(PipelineError::Config("m and n must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(PipelineError::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.scenes_per_generation < 1 || self.cem.population < 1 {
            return Err(PipelineError::Config("empty population or scene batch".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- generation

/// Counts calls into the traffic prior.
pub struct CountingPrior<'a> {
    inner: &'a dyn TrafficPrior,
    calls: AtomicUsize,
}

impl<'a> CountingPrior<'a> {
    pub fn new(inner: &'a dyn TrafficPrior) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl TrafficPrior for CountingPrior<'_> {
    fn propose(&self, x: &crate::scenario::HistoryView<'_>, vehicle_id: &str, m: usize) -> Result<CandidateSet, PredictError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.propose(x, vehicle_id, m)
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub adversarial: AdversarialScenario,
    pub candidates: CandidateSet,
    pub scores: Vec<PosteriorScore>,
    pub selected: usize,
    /// Predict, score and select time.
    pub elapsed_ms: f64,
}

/// Picks the adversary future for `s` against the ego rollouts in `buf`.
pub fn generate_adversarial(
    s: &Scenario,
    buf: &EgoRolloutBuffer,
    prior: &dyn TrafficPrior,
    m: usize,
    alpha: f64,
    method: AttackMethod,
) -> Result<Generated, PipelineError> {
    let start = Instant::now();
    let candidates = prior.propose(&s.history(), &s.adversary_id, m)?;
    let scores = posterior_scores(&candidates, buf, s.ego().dims(), s.adversary().dims(), alpha)?;
    let selected = match method {
        AttackMethod::Cat | AttackMethod::None => select_adversarial(&scores)?,
        AttackMethod::PriorOnly => scores
            .iter()
            .min_by(|a, b| b.prior.total_cmp(&a.prior).then(a.index.cmp(&b.index)))
            .map(|s| s.index)
            .ok_or(ResampleError::EmptyScores)?,
    };
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let future = candidates.candidates()[selected].states.clone();
    let adversarial = freeze_conflicting_background(&apply_adversary(s, future)?);
    Ok(Generated {
        adversarial,
        candidates,
        scores,
        selected,
        elapsed_ms,
    })
}

/// Background vehicles whose replay would hit the new adversary path stop
/// early enough to stay clear of it, when possible.
pub fn freeze_conflicting_background(adv: &AdversarialScenario) -> AdversarialScenario {
    let base = adv.base();
    let h = base.history_steps;
    let adv_states = adv.adversary_states();
    let adv_dims = base.adversary().dims();
    let mut out = adv.clone();
    for (i, t) in base.tracks.iter().enumerate() {
        if t.id == base.ego_id || t.id == base.adversary_id {
            continue;
        }
        let conflict = |sc: &AdversarialScenario| {
            let states: Vec<VehicleState> = (h..base.horizon_steps).map(|k| sc.state(i, k)).collect();
            earliest_collision_step(&adv_states[h..], adv_dims, &states, t.dims()).ok().flatten()
        };
        let Some(k) = conflict(&out) else { continue };
        let mut freeze_at = (h + k).saturating_sub(10).max(h - 1);
        loop {
            let candidate = out.freeze_track_from(i, freeze_at);
            if conflict(&candidate).is_none() || freeze_at == h - 1 {
                out = candidate;
                break;
            }
            freeze_at = freeze_at.saturating_sub(10).max(h - 1);
        }
    }
    out
}

/// Solves for the Bezier control points whose curve passes through
/// `waypoints` at chord-length parameters, then samples it.
fn interpolating_bezier(waypoints: &[Vec2], samples: usize) -> Option<Polyline> {
    let n = waypoints.len();
    let mut chord = vec![0.0];
    for w in waypoints.windows(2) {
        chord.push(chord.last().unwrap() + w[0].distance(w[1]));
    }
    let total = *chord.last()?;
    if total <= 0.0 {
        return None;
    }
    let ts: Vec<f64> = chord.iter().map(|c| c / total).collect();
    // Bernstein matrix, solved by Gaussian elimination with partial pivoting.
    let binom = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    let mut a: Vec<Vec<f64>> = ts
        .iter()
        .map(|&t| (0..n).map(|j| binom(n - 1, j) * t.powi(j as i32) * (1.0 - t).powi((n - 1 - j) as i32)).collect())
        .collect();
    let mut rhs: Vec<Vec2> = waypoints.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        rhs.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                rhs[r] = rhs[r] - rhs[col] * f;
            }
        }
    }
    let ctrl: Vec<Vec2> = (0..n).map(|i| rhs[i] * (1.0 / a[i][i])).collect();
    let pts: Vec<Vec2> = (0..samples)
        .map(|i| bezier_point(&ctrl, i as f64 / (samples - 1) as f64))
        .collect();
    Polyline::new_dedup(pts).ok()
}

/// Heuristic adversary: a Bezier path from the adversary through points on
/// the ego's route to the adversary's logged endpoint, timed to reach the
/// first route point together with the logged ego.
pub fn rule_based_adversary(s: &Scenario, cfg: &RuleConfig) -> Result<AdversarialScenario, PipelineError> {
    let h = s.history_steps;
    let dt = s.dt;
    let route = s.route_polyline();
    let ego = s.ego();
    let ego_future = s.future_of(ego);
    let d0 = route.project(ego.states[h - 1].position()).arc_length;
    let d_end = ego_future
        .iter()
        .filter(|st| st.valid)
        .map(|st| route.project(st.position()).arc_length)
        .fold(d0, f64::max);
    let progress = d_end - d0;
    if progress < 10.0 {
        return Err(PipelineError::RouteTooShort(progress));
    }
    let adv = s.adversary();
    let last = adv.states[h - 1];
    let lead = last.speed.max(2.0) * 1.0;
    let mut waypoints = vec![last.position(), last.position() + Pose2::new(0.0, 0.0, last.heading).direction() * lead];
    let targets: Vec<f64> = cfg.waypoint_fractions.iter().map(|f| d0 + f * progress).collect();
    waypoints.extend(targets.iter().map(|&d| route.point_at(d)));
    let end = s
        .future_of(adv)
        .iter()
        .rev()
        .find(|st| st.valid)
        .map_or(last.position(), |st| st.position());
    waypoints.push(end);
    // A straight lead-in along the current heading keeps the splice continuous.
    let curve = interpolating_bezier(&waypoints[1..], cfg.samples)
        .ok_or_else(|| PipelineError::Config("degenerate rule-based waypoints".into()))?;
    let mut pts = vec![waypoints[0]];
    pts.extend_from_slice(curve.points());
    let path = Polyline::new_dedup(pts)?;

    // Arc length along the sampled path to the first route waypoint.
    let l1 = path.project(waypoints[2]).arc_length;
    let t1 = ego_future
        .iter()
        .position(|st| st.valid && route.project(st.position()).arc_length >= targets[0])
        .map_or(ego_future.len() as f64 * dt, |k| (k + 1) as f64 * dt);
    let v0 = last.speed;
    let accel = (2.0 * (l1 - v0 * t1) / (t1 * t1)).clamp(-6.0, 6.0);
    let total = path.total_length();
    let states = (1..=s.prediction_steps())
        .map(|k| {
            let t = k as f64 * dt;
            let t_stop = if accel < 0.0 { v0 / -accel } else { f64::INFINITY };
            let te = t.min(t_stop);
            let dist = (v0 * te + 0.5 * accel * te * te).min(total);
            let mut speed = (v0 + accel * te).max(0.0);
            if dist >= total {
                speed = 0.0;
            }
            let p = path.point_at(dist);
            let a = path.point_at((dist - 0.5).max(0.0));
            let b = path.point_at((dist + 0.5).min(total));
            let heading = if a.distance(b) > 1e-9 { (b - a).angle() } else { last.heading };
            VehicleState::new(Pose2::new(p.x, p.y, heading), speed)
        })
        .collect();
    Ok(freeze_conflicting_background(&apply_adversary(s, states)?))
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallCounts {
    pub predictor: usize,
    pub resampler: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub generation: u64,
    pub mean_return: f64,
    pub crash_rate: f64,
    pub route_completion: f64,
    /// Mean predict+score+select time per generated scene (0 without generation).
    pub gen_time_ms: f64,
    pub scenes: usize,
    pub skipped: usize,
}

impl GenerationMetrics {
    pub const CSV_HEADER: &'static str = "generation,mean_return,crash_rate,route_completion,gen_time_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.generation, self.mean_return, self.crash_rate, self.route_completion, self.gen_time_ms
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub config: CatConfig,
    pub cem: CemState,
    pub action_std: [f64; 2],
    /// One per pool scenario, seeded with its logged ego future.
    pub buffers: Vec<EgoRolloutBuffer>,
    pub metrics: Vec<GenerationMetrics>,
    pub calls: CallCounts,
    /// Generated adversarial scenes selected in closed-loop mode, per generation.
    #[serde(default)]
    pub selections: Vec<SelectionRecord>,
    /// Fixed scene sets of the rule-based and open-loop modes (rebuilt on demand).
    #[serde(skip)]
    fixed: Vec<Option<AdversarialScenario>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub generation: u64,
    pub scene: usize,
    pub selected: usize,
    pub max_posterior: f64,
    /// The selected future differs from the logged adversary future.
    pub differs_from_log: bool,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.cem == other.cem
            && self.action_std == other.action_std
            && self.buffers == other.buffers
            && self.metrics == other.metrics
            && self.calls == other.calls
            && self.selections == other.selections
    }
}

impl TrainState {
    pub fn new(cfg: &CatConfig, pool: &[Scenario]) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(PipelineError::EmptyPool);
        }
        let init = PolicyParams::random(cfg.seed);
        Ok(Self {
            config: cfg.clone(),
            cem: CemState::new(init.params, &cfg.cem),
            action_std: init.action_std,
            buffers: pool
                .iter()
                .map(|s| EgoRolloutBuffer::seeded(cfg.n, s.future_of(s.ego()).to_vec()))
                .collect(),
            metrics: Vec::new(),
            calls: CallCounts::default(),
            selections: Vec::new(),
            fixed: Vec::new(),
        })
    }

    pub fn generation(&self) -> u64 {
        self.cem.generation
    }

    pub fn policy(&self) -> PolicyParams {
        PolicyParams {
            params: self.cem.mean.clone(),
            action_std: self.action_std,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let text = serde_json::to_string(self).expect("state serializes");
        Ok(write_file(path.as_ref(), &text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Ok(parse_json(&read_file(path.as_ref())?)?)
    }

    fn scene_for(
        &mut self,
        idx: usize,
        pool: &[Scenario],
        prior: &CountingPrior<'_>,
    ) -> Result<(AdversarialScenario, Option<f64>), PipelineError> {
        let cfg = &self.config;
        let s = &pool[idx];
        if self.fixed.len() != pool.len() {
            self.fixed = vec![None; pool.len()];
        }
        match cfg.mode {
            Mode::NoAdv => Ok((AdversarialScenario::identity(s), None)),
            Mode::RuleBased => {
                if self.fixed[idx].is_none() {
                    self.fixed[idx] = Some(rule_based_adversary(s, &cfg.rule)?);
                }
                Ok((self.fixed[idx].clone().expect("filled"), None))
            }
            Mode::OpenLoop => {
                if self.fixed[idx].is_none() {
                    let log_only = EgoRolloutBuffer::seeded(1, s.future_of(s.ego()).to_vec());
                    let g = generate_adversarial(s, &log_only, prior, cfg.m, cfg.alpha, AttackMethod::Cat)?;
                    self.calls.resampler += 1;
                    self.fixed[idx] = Some(g.adversarial);
                }
                Ok((self.fixed[idx].clone().expect("filled"), None))
            }
            Mode::ClosedLoop => {
                let g = generate_adversarial(s, &self.buffers[idx], prior, cfg.m, cfg.alpha, AttackMethod::Cat)?;
                self.calls.resampler += 1;
                let logged = s.future_of(s.adversary());
                let max_posterior = g.scores.iter().map(|x| x.posterior).fold(0.0, f64::max);
                self.selections.push(SelectionRecord {
                    generation: self.cem.generation,
                    scene: idx,
                    selected: g.selected,
                    max_posterior,
                    differs_from_log: g.adversarial.adversary_override() != logged,
                });
                Ok((g.adversarial, Some(g.elapsed_ms)))
            }
        }
    }

    /// Builds every fixed scene of the rule-based and open-loop modes up front.
    pub fn prepare_fixed(&mut self, pool: &[Scenario], prior: &dyn TrafficPrior) {
        if !matches!(self.config.mode, Mode::RuleBased | Mode::OpenLoop) {
            return;
        }
        let counting = CountingPrior::new(prior);
        for idx in 0..pool.len() {
            // Failures are retried (and skipped) when the scene is sampled.
            let _ = self.scene_for(idx, pool, &counting);
        }
        self.calls.predictor += counting.calls();
    }

    /// One optimizer generation over a fresh batch of sampled scenes.
    pub fn step(&mut self, pool: &[Scenario], prior: &dyn TrafficPrior) -> Result<GenerationMetrics, PipelineError> {
        if pool.is_empty() {
            return Err(PipelineError::EmptyPool);
        }
        if self.buffers.len() != pool.len() {
            return Err(PipelineError::CheckpointMismatch(format!(
                "{} buffers for a pool of {}",
                self.buffers.len(),
                pool.len()
            )));
        }
        let counting = CountingPrior::new(prior);
        let generation = self.cem.generation;
        let mut rng = generation_rng(self.config.seed ^ 0x9e37_79b9_7f4a_7c15, generation);
        let mut scenes = Vec::new();
        let mut times = Vec::new();
        let mut skipped = 0;
        for _ in 0..self.config.scenes_per_generation {
            let idx = rng.random_range(0..pool.len());
            match self.scene_for(idx, pool, &counting) {
                Ok((sc, t)) => {
                    scenes.push((idx, sc));
                    times.extend(t);
                }
                Err(_) => skipped += 1,
            }
        }
        self.calls.predictor += counting.calls();
        let sim = SimConfig {
            record_trace: false,
            ..self.config.sim
        };
        let std = self.action_std;
        let evaluate = |params: &[f64]| -> Result<f64, PipelineError> {
            if scenes.is_empty() {
                return Ok(0.0);
            }
            let p = PolicyParams {
                params: params.to_vec(),
                action_std: std,
            };
            let mut total = 0.0;
            for (_, sc) in &scenes {
                let mut agent = PolicyAgent::new(p.clone(), ActMode::Deterministic, 0);
                total += run_episode(sc, &mut agent, &sim).0.total_return;
            }
            Ok(total / scenes.len() as f64)
        };
        let cem_seed = self.config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(1);
        let (next, _) = optimize_policy(&self.cem, &self.config.cem, cem_seed, evaluate)?;
        self.cem = next;

        let policy = self.policy();
        let results: Vec<EpisodeResult> = scenes
            .iter()
            .map(|(_, sc)| run_episode(sc, &mut PolicyAgent::new(policy.clone(), ActMode::Deterministic, 0), &sim).0)
            .collect();
        if self.config.mode == Mode::ClosedLoop {
            for ((idx, _), r) in scenes.iter().zip(&results) {
                self.buffers[*idx].push(r.ego_trajectory.clone(), r.log_prob_sum);
            }
        }
        let n = results.len().max(1) as f64;
        let metrics = GenerationMetrics {
            generation,
            mean_return: results.iter().map(|r| r.total_return).sum::<f64>() / n,
            crash_rate: results.iter().filter(|r| r.crashed).count() as f64 / n,
            route_completion: results.iter().map(|r| r.route_completion).sum::<f64>() / n,
            gen_time_ms: if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 },
            scenes: results.len(),
            skipped,
        };
        self.metrics.push(metrics.clone());
        Ok(metrics)
    }
}

/// Trains from scratch for `cfg.generations` generations, calling `on_generation`
/// after each one (for logging and checkpoints).
pub fn run_pipeline(
    cfg: &CatConfig,
    pool: &[Scenario],
    prior: &dyn TrafficPrior,
    mut on_generation: impl FnMut(&TrainState) -> Result<(), PipelineError>,
) -> Result<TrainState, PipelineError> {
    let mut state = TrainState::new(cfg, pool)?;
    state.prepare_fixed(pool, prior);
    while state.generation() < cfg.generations {
        state.step(pool, prior)?;
        on_generation(&state)?;
    }
    Ok(state)
}

/// Continues a saved run up to `cfg.generations`.
pub fn resume_pipeline(
    mut state: TrainState,
    pool: &[Scenario],
    prior: &dyn TrafficPrior,
    generations: u64,
    mut on_generation: impl FnMut(&TrainState) -> Result<(), PipelineError>,
) -> Result<TrainState, PipelineError> {
    state.prepare_fixed(pool, prior);
    while state.generation() < generations {
        state.step(pool, prior)?;
        on_generation(&state)?;
    }
    Ok(state)
}

fn with_mode(cfg: &CatConfig, mode: Mode) -> CatConfig {
    CatConfig { mode, ..cfg.clone() }
}

fn default_prior(cfg: &CatConfig) -> KinematicPrior {
    KinematicPrior {
        config: cfg.predictor.clone(),
    }
}

pub fn run_closed_loop(cfg: &CatConfig, pool: &[Scenario]) -> Result<TrainState, PipelineError> {
    run_pipeline(&with_mode(cfg, Mode::ClosedLoop), pool, &default_prior(cfg), |_| Ok(()))
}

pub fn run_open_loop(cfg: &CatConfig, pool: &[Scenario]) -> Result<TrainState, PipelineError> {
    run_pipeline(&with_mode(cfg, Mode::OpenLoop), pool, &default_prior(cfg), |_| Ok(()))
}

pub fn run_no_adv(cfg: &CatConfig, pool: &[Scenario]) -> Result<TrainState, PipelineError> {
    run_pipeline(&with_mode(cfg, Mode::NoAdv), pool, &default_prior(cfg), |_| Ok(()))
}

pub fn run_rule_based(cfg: &CatConfig, pool: &[Scenario]) -> Result<TrainState, PipelineError> {
    run_pipeline(&with_mode(cfg, Mode::RuleBased), pool, &default_prior(cfg), |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{forge_corpus, forge_scenario, ForgeConfig, Template};
    use crate::scenario::{splice_gap, SPLICE_TOLERANCE};

    fn tiny(mode: Mode, generations: u64) -> CatConfig {
        CatConfig {
            mode,
            generations,
            cem: CemConfig {
                population: 4,
                ..CemConfig::default()
            },
            scenes_per_generation: 1,
            ..CatConfig::default()
        }
    }

    fn pool(n: usize) -> Vec<Scenario> {
        forge_corpus(n + 1, n as f64 / (n + 1) as f64, 5).unwrap().train.into_iter().map(|s| s.scenario).collect()
    }

    #[test]
    fn interpolating_bezier_hits_waypoints() {
        let w = vec![Vec2::new(0.0, 0.0), Vec2::new(5.0, 3.0), Vec2::new(12.0, -1.0), Vec2::new(20.0, 4.0)];
        let path = interpolating_bezier(&w, 2000).unwrap();
        for p in &w {
            let proj = path.project(*p);
            assert!(proj.lateral_offset.abs() < 0.05, "{p:?}");
        }
    }

    #[test]
    fn rule_based_contract() {
        let cfg = RuleConfig::default();
        for t in Template::ALL {
            for seed in 0..8 {
                let s = forge_scenario(&ForgeConfig::new(t, seed).with_background(2));
                let adv = rule_based_adversary(&s, &cfg).unwrap();
                assert_eq!(adv.adversary_override().len(), s.horizon_steps - s.history_steps);
                assert!(splice_gap(&s, &adv.adversary_override()[0]) <= SPLICE_TOLERANCE);
            }
        }
    }

    #[test]
    fn rule_based_crosses_ego_lane_on_straight_roads() {
        let cfg = RuleConfig::default();
        for seed in 0..10 {
            let s = forge_scenario(&ForgeConfig::new(Template::StraightMultilane, seed));
            let adv = rule_based_adversary(&s, &cfg).unwrap();
            let route = s.route_polyline();
            let offsets: Vec<f64> = adv
                .adversary_states()
                .iter()
                .map(|st| route.project(st.position()).lateral_offset)
                .collect();
            let crosses = offsets.windows(2).any(|w| w[0] * w[1] <= 0.0);
            assert!(crosses, "seed {seed}");
        }
    }

    #[test]
    fn rule_based_rejects_short_routes() {
        let mut s = forge_scenario(&ForgeConfig::new(Template::StraightMultilane, 1));
        let i = s.track_index(&s.ego_id.clone()).unwrap();
        let hold = s.tracks[i].states[s.history_steps - 1];
        for st in &mut s.tracks[i].states[s.history_steps..] {
            *st = hold;
        }
        assert!(matches!(
            rule_based_adversary(&s, &RuleConfig::default()),
            Err(PipelineError::RouteTooShort(_))
        ));
    }

    #[test]
    fn buffer_grows_by_one_per_visit() {
        let p = pool(1);
        let prior = KinematicPrior::default();
        let mut state = TrainState::new(&tiny(Mode::ClosedLoop, 1), &p).unwrap();
        assert_eq!(state.buffers[0].len(), 1);
        state.step(&p, &prior).unwrap();
        assert_eq!(state.buffers[0].len(), 2);
        for _ in 0..9 {
            state.step(&p, &prior).unwrap();
        }
        assert_eq!(state.buffers[0].len(), 5);
        let entries: Vec<_> = state.buffers[0].entries().collect();
        // The logged seed has been evicted.
        assert!(entries.iter().all(|e| e.trajectory != p[0].future_of(p[0].ego())));
    }

    #[test]
    fn protocols_touch_components_as_expected() {
        let p = pool(3);
        let prior = KinematicPrior::default();
        let no_adv = run_pipeline(&tiny(Mode::NoAdv, 3), &p, &prior, |_| Ok(())).unwrap();
        assert_eq!(no_adv.calls, CallCounts::default());
        let rule = run_pipeline(&tiny(Mode::RuleBased, 3), &p, &prior, |_| Ok(())).unwrap();
        assert_eq!(rule.calls, CallCounts::default());
        let open = run_pipeline(&tiny(Mode::OpenLoop, 3), &p, &prior, |_| Ok(())).unwrap();
        assert_eq!(open.calls.predictor, 3);
        assert_eq!(open.calls.resampler, 3);
        for (b, s) in open.buffers.iter().zip(&p) {
            assert_eq!(b.len(), 1);
            assert_eq!(b.entries().next().unwrap().trajectory, s.future_of(s.ego()));
        }
        let closed = run_pipeline(&tiny(Mode::ClosedLoop, 3), &p, &prior, |_| Ok(())).unwrap();
        assert_eq!(closed.calls.predictor, 3);
        for st in [&no_adv, &rule, &open, &closed] {
            assert_eq!(st.metrics.len(), 3);
        }
        // Same metric schema in every mode.
        let header = |st: &TrainState| serde_json::to_value(&st.metrics[0]).unwrap().as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        assert_eq!(header(&no_adv), header(&closed));
    }

    #[test]
    fn open_loop_set_is_deterministic() {
        let p = pool(3);
        let prior = KinematicPrior::default();
        let build = || {
            let mut st = TrainState::new(&tiny(Mode::OpenLoop, 1), &p).unwrap();
            st.prepare_fixed(&p, &prior);
            st.fixed.clone()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn closed_loop_selection_differs_from_log() {
        let p = pool(4);
        let prior = KinematicPrior::default();
        let st = run_pipeline(&tiny(Mode::ClosedLoop, 6), &p, &prior, |_| Ok(())).unwrap();
        assert!(!st.selections.is_empty());
        for rec in &st.selections {
            if rec.max_posterior > 0.0 {
                assert!(rec.differs_from_log, "{rec:?}");
            }
        }
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = pool(3);
        let prior = KinematicPrior::default();
        let cfg = tiny(Mode::ClosedLoop, 4);
        let full = run_pipeline(&cfg, &p, &prior, |_| Ok(())).unwrap();
        let path = dir.path().join("state.json");
        let partial = run_pipeline(&CatConfig { generations: 2, ..cfg.clone() }, &p, &prior, |_| Ok(())).unwrap();
        partial.save(&path).unwrap();
        let loaded = TrainState::load(&path).unwrap();
        assert_eq!(loaded, partial);
        let resumed = resume_pipeline(loaded, &p, &prior, 4, |_| Ok(())).unwrap();
        assert_eq!(resumed.cem, full.cem);
        // Generation wall time is the only nondeterministic metric.
        let untimed = |m: &[GenerationMetrics]| m.iter().map(|g| GenerationMetrics { gen_time_ms: 0.0, ..g.clone() }).collect::<Vec<_>>();
        assert_eq!(untimed(&resumed.metrics), untimed(&full.metrics));
        assert_eq!(resumed.selections, full.selections);
        assert_eq!(resumed.buffers, full.buffers);
    }

    #[test]
    fn config_validation() {
        let bad = CatConfig { alpha: 0.0, ..CatConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainState::new(&CatConfig::default(), &[]).is_err());
        assert_eq!("closed_loop".parse::<Mode>().unwrap(), Mode::ClosedLoop);
    }
}
