//! Evaluation harness: attack success against fixed agents and policy
//! evaluation under logged or generated traffic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{run_episode, ActMode, Agent, AgentSpec, PolicyAgent, PolicyParams};
use crate::pipeline::{generate_adversarial, AttackMethod, PipelineError};
use crate::predictor::TrafficPrior;
use crate::resampler::{EgoRolloutBuffer, DEFAULT_ALPHA};
use crate::scenario::{AdversarialScenario, Scenario};
use crate::simulator::{EpisodeResult, SimConfig};

/// Version of the attack and policy report JSON schemas.
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scenes to evaluate")]
    EmptyScenes,
    #[error("no seeds to evaluate")]
    NoSeeds,
    #[error("buffer size must be at least 1")]
    EmptyBuffer,
    #[error("scene {index}: {source}")]
    Scene {
        index: usize,
        #[source]
        source: PipelineError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; zeros for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub m: usize,
    pub alpha: f64,
    pub sim: SimConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Cat,
            m: 32,
            alpha: DEFAULT_ALPHA,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAttack {
    pub scene: usize,
    /// The ego collided with the adversary.
    pub collided: bool,
    /// Step of the ego-adversary collision.
    pub earliest_step: Option<usize>,
    /// Predict, score and select time; absent without generation.
    pub generation_ms: Option<f64>,
    /// The ego collided with a background vehicle instead.
    pub background_collision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub version: u32,
    pub agent: String,
    pub method: AttackMethod,
    pub n_buffer: usize,
    pub scenes: Vec<SceneAttack>,
    pub success_rate: f64,
    pub generation_ms: MeanStd,
}

impl AttackReport {
    pub fn collisions(&self) -> usize {
        self.scenes.iter().filter(|s| s.collided).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Buffer of `n` rollouts of `agent` on the raw scene.
pub fn agent_rollout_buffer(agent: &AgentSpec, s: &Scenario, n: usize, sim: &SimConfig) -> EgoRolloutBuffer {
    agent_buffer(s, &|| agent.build(), n, sim)
}

/// Fills a buffer with `n` rollouts of the agent on the raw scene.
fn agent_buffer(s: &Scenario, make: &(dyn Fn() -> Box<dyn Agent + Send> + Sync), n: usize, sim: &SimConfig) -> EgoRolloutBuffer {
    let raw = AdversarialScenario::identity(s);
    let mut buf = EgoRolloutBuffer::new(n);
    for _ in 0..n {
        let r = run_episode(&raw, &mut *make(), sim).0;
        buf.push(r.ego_trajectory, r.log_prob_sum);
    }
    buf
}

fn generate(
    s: &Scenario,
    buf: &EgoRolloutBuffer,
    prior: &dyn TrafficPrior,
    cfg: &AttackConfig,
) -> Result<(AdversarialScenario, Option<f64>), PipelineError> {
    if cfg.method == AttackMethod::None {
        return Ok((AdversarialScenario::identity(s), None));
    }
    let g = generate_adversarial(s, buf, prior, cfg.m, cfg.alpha, cfg.method)?;
    Ok((g.adversarial, Some(g.elapsed_ms)))
}

/// Success rate of adversarial generation against a fixed agent.
///
/// Each scene's buffer holds `n_buffer` rollouts of the agent on the raw
/// scene; the agent is then replayed on the generated scene.
pub fn attack_success_rate(
    agent: &AgentSpec,
    scenes: &[Scenario],
    n_buffer: usize,
    prior: &dyn TrafficPrior,
    cfg: &AttackConfig,
) -> Result<AttackReport, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::EmptyScenes);
    }
    if n_buffer == 0 {
        return Err(EvalError::EmptyBuffer);
    }
    let sim = SimConfig {
        record_trace: false,
        ..cfg.sim
    };
    let make = || agent.build();
    let per_scene: Vec<SceneAttack> = scenes
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let buf = agent_buffer(s, &make, n_buffer, &sim);
            let (adv, generation_ms) = generate(s, &buf, prior, cfg).map_err(|source| EvalError::Scene { index, source })?;
            let r = run_episode(&adv, &mut *agent.build(), &sim).0;
            Ok(SceneAttack {
                scene: index,
                collided: r.adversary_collision,
                earliest_step: r.adversary_collision.then_some(r.steps),
                generation_ms,
                background_collision: r.crashed && !r.adversary_collision,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let times: Vec<f64> = per_scene.iter().filter_map(|s| s.generation_ms).collect();
    let collided = per_scene.iter().filter(|s| s.collided).count();
    Ok(AttackReport {
        version: REPORT_VERSION,
        agent: agent.build().name(),
        method: cfg.method,
        n_buffer,
        success_rate: collided as f64 / per_scene.len() as f64,
        generation_ms: MeanStd::of(&times),
        scenes: per_scene,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traffic {
    /// Raw scenes with logged traffic.
    LogReplay,
    /// One adversarial scene per raw scene, generated against the evaluated agent.
    SafetyCritical,
}

impl Traffic {
    pub fn name(self) -> &'static str {
        match self {
            Traffic::LogReplay => "log_replay",
            Traffic::SafetyCritical => "safety_critical",
        }
    }
}

impl std::str::FromStr for Traffic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Traffic::LogReplay, Traffic::SafetyCritical]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown traffic mode `{s}`, expected log_replay or safety_critical"))
    }
}

/// A trained policy tagged with the training seed it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SeededPolicy {
    pub seed: u64,
    pub policy: PolicyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub episodes: Vec<EpisodeResult>,
    pub route_completion: f64,
    pub crash_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub version: u32,
    pub traffic: Traffic,
    pub seeds: Vec<SeedReport>,
    /// Across seeds.
    pub route_completion: MeanStd,
    pub crash_rate: MeanStd,
}

impl PolicyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluates the agents built by `make(seed)` on every scene.
///
/// Safety-critical traffic generates each scene with a one-rollout buffer of
/// the agent itself.
pub fn eval_agent(
    make: &(dyn Fn(u64) -> Box<dyn Agent + Send> + Sync),
    seeds: &[u64],
    scenes: &[Scenario],
    traffic: Traffic,
    prior: &dyn TrafficPrior,
    cfg: &AttackConfig,
) -> Result<PolicyReport, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::EmptyScenes);
    }
    if seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let sim = SimConfig {
        record_trace: false,
        ..cfg.sim
    };
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let episodes: Vec<EpisodeResult> = scenes
            .par_iter()
            .enumerate()
            .map(|(index, s)| {
                let adv = match traffic {
                    Traffic::LogReplay => AdversarialScenario::identity(s),
                    Traffic::SafetyCritical => {
                        let buf = agent_buffer(s, &|| make(seed), 1, &sim);
                        generate(s, &buf, prior, cfg).map_err(|source| EvalError::Scene { index, source })?.0
                    }
                };
                Ok(run_episode(&adv, &mut *make(seed), &sim).0)
            })
            .collect::<Result<_, EvalError>>()?;
        let n = episodes.len() as f64;
        reports.push(SeedReport {
            seed,
            route_completion: episodes.iter().map(|e| e.route_completion).sum::<f64>() / n,
            crash_rate: episodes.iter().filter(|e| e.crashed).count() as f64 / n,
            episodes,
        });
    }
    let rc: Vec<f64> = reports.iter().map(|r| r.route_completion).collect();
    let cr: Vec<f64> = reports.iter().map(|r| r.crash_rate).collect();
    Ok(PolicyReport {
        version: REPORT_VERSION,
        traffic,
        route_completion: MeanStd::of(&rc),
        crash_rate: MeanStd::of(&cr),
        seeds: reports,
    })
}

/// Evaluates deterministic policies, one per training seed.
pub fn eval_policy(
    policies: &[SeededPolicy],
    scenes: &[Scenario],
    traffic: Traffic,
    prior: &dyn TrafficPrior,
    cfg: &AttackConfig,
) -> Result<PolicyReport, EvalError> {
    let seeds: Vec<u64> = policies.iter().map(|p| p.seed).collect();
    let make = |seed: u64| -> Box<dyn Agent + Send> {
        let p = policies.iter().find(|p| p.seed == seed).expect("seed listed");
        Box::new(PolicyAgent::new(p.policy.clone(), ActMode::Deterministic, seed))
    };
    eval_agent(&make, &seeds, scenes, traffic, prior, cfg)
}
