//! Browser demo: forge a scene, attack a driving agent in it, and measure the
//! attack success rate over a batch of forged scenes.

use catsim_core::agents::{run_episode, AgentError, AgentSpec};
use catsim_core::eval::{agent_rollout_buffer, attack_success_rate, AttackConfig, AttackReport, EvalError};
use catsim_core::forge::{corpus_config, forge_scenario, ForgeConfig, Template};
use catsim_core::pipeline::{generate_adversarial, AttackMethod, PipelineError};
use catsim_core::predictor::KinematicPrior;
use catsim_core::render::{render_svg, RenderError};
use catsim_core::scenario::{AdversarialScenario, Scenario};
use catsim_core::simulator::SimConfig;
use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

const MAX_BATCH: usize = 50;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("{0}")]
    Template(String),
    #[error("unknown agent `{0}`, expected replay or idm")]
    Agent(String),
    #[error("unknown method `{0}`, expected cat, prior_only or none")]
    Method(String),
    #[error("batch size must be between 1 and {MAX_BATCH}, got {0}")]
    Batch(usize),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Policy(#[from] AgentError),
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeView {
    pub svg: String,
    pub crashed: bool,
    pub adversary_collision: bool,
    pub route_completion: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackView {
    pub episode: EpisodeView,
    pub candidates: usize,
    /// Candidates that overlap at least one buffered ego rollout.
    pub colliding_candidates: usize,
    pub selected: usize,
    pub prior: f64,
    pub posterior: f64,
    pub earliest_step: Option<usize>,
    pub generation_ms: f64,
}

fn agent(name: &str) -> Result<AgentSpec, DemoError> {
    match name {
        "replay" => Ok(AgentSpec::Replay),
        "idm" => Ok(AgentSpec::Idm),
        _ => Err(DemoError::Agent(name.to_string())),
    }
}

fn method(name: &str) -> Result<AttackMethod, DemoError> {
    match name {
        "cat" => Ok(AttackMethod::Cat),
        "prior_only" => Ok(AttackMethod::PriorOnly),
        "none" => Ok(AttackMethod::None),
        _ => Err(DemoError::Method(name.to_string())),
    }
}

fn episode(adv: &AdversarialScenario, agent: &AgentSpec) -> Result<EpisodeView, DemoError> {
    let sim = SimConfig {
        record_trace: true,
        ..SimConfig::default()
    };
    let (result, trace) = run_episode(adv, &mut *agent.build(), &sim);
    Ok(EpisodeView {
        svg: render_svg(&trace.expect("trace recorded"))?,
        crashed: result.crashed,
        adversary_collision: result.adversary_collision,
        route_completion: result.route_completion,
        steps: result.steps,
    })
}

/// One forged scene and the operations on it.
#[derive(Debug, Clone)]
pub struct Session {
    scenario: Scenario,
}

impl Session {
    pub fn forge(template: &str, seed: u64, background: usize) -> Result<Self, DemoError> {
        let template: Template = template.parse().map_err(DemoError::Template)?;
        let cfg = ForgeConfig::new(template, seed).with_background(background);
        Ok(Self {
            scenario: forge_scenario(&cfg),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// The agent driving the logged scene.
    pub fn replay(&self, agent_name: &str) -> Result<EpisodeView, DemoError> {
        episode(&AdversarialScenario::identity(&self.scenario), &agent(agent_name)?)
    }

    /// Generates an adversary against one rollout of the agent, then drives the agent in it.
    pub fn attack(&self, agent_name: &str, m: usize, alpha: f64, method_name: &str) -> Result<AttackView, DemoError> {
        let spec = agent(agent_name)?;
        let method = method(method_name)?;
        let sim = SimConfig::default();
        let buf = agent_rollout_buffer(&spec, &self.scenario, 1, &sim);
        let g = generate_adversarial(&self.scenario, &buf, &KinematicPrior::default(), m, alpha, method)?;
        let adv = match method {
            AttackMethod::None => AdversarialScenario::identity(&self.scenario),
            _ => g.adversarial,
        };
        let best = &g.scores[g.selected];
        Ok(AttackView {
            episode: episode(&adv, &spec)?,
            candidates: g.scores.len(),
            colliding_candidates: g.scores.iter().filter(|s| s.earliest_step().is_some()).count(),
            selected: g.selected,
            prior: best.prior,
            posterior: best.posterior,
            earliest_step: best.earliest_step(),
            generation_ms: g.elapsed_ms,
        })
    }
}

/// Attack success rate over `scenes` forged scenes of a corpus seeded with `seed`.
pub fn attack_stats(agent_name: &str, method_name: &str, scenes: usize, seed: u64) -> Result<AttackReport, DemoError> {
    if scenes == 0 || scenes > MAX_BATCH {
        return Err(DemoError::Batch(scenes));
    }
    let spec = agent(agent_name)?;
    let batch: Vec<Scenario> = (0..scenes).map(|i| forge_scenario(&corpus_config(seed, i))).collect();
    let cfg = AttackConfig {
        method: method(method_name)?,
        ..AttackConfig::default()
    };
    Ok(attack_success_rate(&spec, &batch, 1, &KinematicPrior::default(), &cfg)?)
}

fn js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    Ok(serde_json::to_string(&v).expect("view serializes"))
}

/// Template names accepted by [`Demo::new`], as a JSON array.
#[wasm_bindgen]
pub fn templates() -> String {
    let names: Vec<&str> = Template::ALL.iter().map(|t| t.name()).collect();
    serde_json::to_string(&names).expect("names serialize")
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(template: &str, seed: u32, background: u32) -> Result<Demo, JsError> {
        Session::forge(template, seed.into(), background as usize)
            .map(Demo)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    /// Episode view JSON of the agent in the logged scene.
    pub fn replay(&self, agent: &str) -> Result<String, JsError> {
        js(self.0.replay(agent))
    }

    /// Attack view JSON.
    pub fn attack(&self, agent: &str, m: u32, alpha: f64, method: &str) -> Result<String, JsError> {
        js(self.0.attack(agent, m as usize, alpha, method))
    }
}

/// Attack report JSON over a batch of forged scenes.
#[wasm_bindgen(js_name = attackStats)]
pub fn attack_stats_js(agent: &str, method: &str, scenes: u32, seed: u32) -> Result<String, JsError> {
    js(attack_stats(agent, method, scenes as usize, seed.into()))
}
