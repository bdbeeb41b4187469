mod scenes;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use catsim_core::agents::{load_policy, run_episode, save_policy, AgentError, AgentSpec, CemConfig, PolicyParams};
use catsim_core::eval::{
    agent_rollout_buffer, attack_success_rate, eval_agent, eval_policy, AttackConfig, EvalError, SeededPolicy, Traffic,
};
use catsim_core::forge::{forge_corpus, forge_scenario, ForgeConfig, ForgeError, Template};
use catsim_core::pipeline::{
    generate_adversarial, resume_pipeline, run_pipeline, AttackMethod, CatConfig, GenerationMetrics, Mode, PipelineError,
    TrainState,
};
use catsim_core::predictor::{KinematicPrior, PredictError, TrafficPrior};
use catsim_core::render::{load_trace, render_episode, RenderError};
use catsim_core::resampler::DEFAULT_ALPHA;
use catsim_core::scenario::{load_any_scenario, load_scenario, Scenario, ScenarioError};
use catsim_core::simulator::{EpisodeResult, SimConfig, Trace};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use scenes::{create_dir, load_dir, seed_path, write, Split};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "catsim", version, about = "Safety-critical scenario generation and adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forge one scenario from a template, or a whole corpus.
    Forge(ForgeArgs),
    /// Write candidate futures for one vehicle.
    Predict(PredictArgs),
    /// Generate an adversarial scenario against an agent.
    Attack(AttackArgs),
    /// Run one episode and optionally record its trace.
    Rollout(RolloutArgs),
    /// Train a policy with one of the four pipelines.
    Train(TrainArgs),
    /// Evaluate an agent under log-replay or safety-critical traffic.
    Eval(EvalArgs),
    /// Attack success rate of a generation method against an agent.
    EvalAttack(EvalAttackArgs),
    /// Evaluate trained checkpoints, one per seed.
    EvalPolicy(EvalPolicyArgs),
    /// Render a recorded episode to SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct ForgeArgs {
    #[command(subcommand)]
    corpus: Option<ForgeCommand>,
    #[arg(long, required = true)]
    template: Option<Template>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Background vehicles (default 2).
    #[arg(long)]
    background: Option<usize>,
    /// Output directory; the file is named `<template>_<seed>.json`.
    #[arg(long, required = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ForgeCommand {
    /// Forge `n` scenarios with a train/test manifest.
    Corpus {
        #[arg(long)]
        n: usize,
        /// Train fraction.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Track id; defaults to the scenario's adversary.
    #[arg(long)]
    vehicle: Option<String>,
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Cat,
    #[value(name = "prior_only")]
    PriorOnly,
    None,
}

impl From<Method> for AttackMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Cat => AttackMethod::Cat,
            Method::PriorOnly => AttackMethod::PriorOnly,
            Method::None => AttackMethod::None,
        }
    }
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// `replay`, `idm` or `policy:<path>`.
    #[arg(long, default_value = "replay")]
    agent: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 32)]
    m: usize,
    /// Agent rollouts in the ego buffer.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, value_enum, default_value_t = Method::Cat)]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    /// Score report path; defaults to `<out stem>.scores.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    /// Plain or adversarial scenario.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "replay")]
    agent: String,
    /// Episode result plus the full state trace.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Optimizer generations.
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 32)]
    population: usize,
    #[arg(long, default_value_t = 2)]
    scenes_per_generation: usize,
    /// Generations between checkpoints (0 disables them).
    #[arg(long, default_value_t = 10)]
    checkpoint_every: u64,
    /// Continue from a saved training state up to `--steps` generations.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    agent: String,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_enum)]
    split: Option<Split>,
    #[arg(long, default_value = "log_replay")]
    traffic: Traffic,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalAttackArgs {
    #[arg(long)]
    agent: String,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_enum)]
    split: Option<Split>,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = Method::Cat)]
    method: Method,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalPolicyArgs {
    /// Policy or training-state file; `{seed}` is replaced by each seed.
    #[arg(long)]
    ckpt: String,
    #[arg(long)]
    mode: Traffic,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_enum)]
    split: Option<Split>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Rollout record: the episode result next to the trace fields, so the file
/// also loads as a plain trace.
#[derive(Debug, Serialize)]
struct Recording<'a> {
    result: &'a EpisodeResult,
    #[serde(flatten)]
    trace: &'a Trace,
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    version: u32,
    vehicle_id: String,
    method: AttackMethod,
    alpha: f64,
    m: usize,
    n_buffer: usize,
    selected: usize,
    generation_ms: f64,
    candidates: Vec<CandidateScore>,
}

#[derive(Debug, Serialize)]
struct CandidateScore {
    index: usize,
    prior: f64,
    /// Earliest collision step against each buffered ego rollout.
    earliest_steps: Vec<Option<usize>>,
    posterior: f64,
    closest_approach: f64,
}

const SCORE_REPORT_VERSION: u32 = 1;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Forge(a) => forge(a),
        Command::Predict(a) => predict(a),
        Command::Attack(a) => attack(a),
        Command::Rollout(a) => rollout(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::EvalAttack(a) => eval_attack(a),
        Command::EvalPolicy(a) => eval_policies(a),
        Command::Render(a) => render(a),
    }
}

fn prior() -> KinematicPrior {
    KinematicPrior::default()
}

fn forge(a: ForgeArgs) -> Result<(), CliError> {
    if let Some(ForgeCommand::Corpus { n, split, seed, out }) = a.corpus {
        let corpus = forge_corpus(n, split, seed)?;
        corpus.write(&out, seed, split)?;
        println!(
            "wrote {} train and {} test scenes to {}",
            corpus.train.len(),
            corpus.test.len(),
            out.display()
        );
        return Ok(());
    }
    let (Some(template), Some(out)) = (a.template, a.out) else {
        return Err(CliError::Usage("forge needs --template and --out".into()));
    };
    let mut cfg = ForgeConfig::new(template, a.seed);
    if let Some(n) = a.background {
        cfg = cfg.with_background(n);
    }
    create_dir(&out)?;
    let path = out.join(format!("{}_{}.json", template.name(), a.seed));
    forge_scenario(&cfg).save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let s = load_scenario(&a.scenario)?;
    let vehicle = a.vehicle.unwrap_or_else(|| s.adversary_id.clone());
    let set = prior().propose(&s.history(), &vehicle, a.m)?;
    write(&a.out, &set.to_json())?;
    println!("{} candidates for {vehicle} -> {}", set.len(), a.out.display());
    Ok(())
}

fn attack(a: AttackArgs) -> Result<(), CliError> {
    let s = load_scenario(&a.scenario)?;
    let agent = AgentSpec::parse(&a.agent)?;
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let sim = SimConfig::default();
    let buf = agent_rollout_buffer(&agent, &s, a.n, &sim);
    let method = AttackMethod::from(a.method);
    let g = generate_adversarial(&s, &buf, &prior(), a.m, a.alpha, method)?;
    let adversarial = if method == AttackMethod::None {
        catsim_core::scenario::AdversarialScenario::identity(&s)
    } else {
        g.adversarial
    };
    write(&a.out, &adversarial.to_json())?;
    let report = ScoreReport {
        version: SCORE_REPORT_VERSION,
        vehicle_id: s.adversary_id.clone(),
        method,
        alpha: a.alpha,
        m: a.m,
        n_buffer: buf.len(),
        selected: g.selected,
        generation_ms: g.elapsed_ms,
        candidates: g
            .scores
            .iter()
            .map(|sc| CandidateScore {
                index: sc.index,
                prior: sc.prior,
                earliest_steps: sc.terms.iter().map(|t| t.step).collect(),
                posterior: sc.posterior,
                closest_approach: sc.closest_approach,
            })
            .collect(),
    };
    let report_path = a.report.unwrap_or_else(|| sibling(&a.out, "scores.json"));
    write(&report_path, &to_json(&report))?;
    let best = &g.scores[g.selected];
    println!(
        "selected candidate {} (prior {:.4}, posterior {:.4}, earliest step {}) in {:.1} ms",
        g.selected,
        best.prior,
        best.posterior,
        best.earliest_step().map_or("none".to_string(), |k| k.to_string()),
        g.elapsed_ms
    );
    println!("{} and {}", a.out.display(), report_path.display());
    Ok(())
}

/// `dir/name.json` -> `dir/name.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn rollout(a: RolloutArgs) -> Result<(), CliError> {
    let adv = load_any_scenario(&a.scenario)?;
    let agent = AgentSpec::parse(&a.agent)?;
    let sim = SimConfig {
        record_trace: a.record.is_some(),
        ..SimConfig::default()
    };
    let (result, trace) = run_episode(&adv, &mut *agent.build(), &sim);
    println!(
        "steps {} return {:.2} route completion {:.3} crashed {}{} out of road {} arrived {}",
        result.steps,
        result.total_return,
        result.route_completion,
        result.crashed,
        result.crash_with.as_deref().map(|id| format!(" ({id})")).unwrap_or_default(),
        result.out_of_road,
        result.arrived
    );
    if let (Some(path), Some(trace)) = (a.record, trace) {
        write(&path, &to_json(&Recording { result: &result, trace: &trace }))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let pool: Vec<Scenario> = load_dir(&a.pool, a.split, Split::Train)?.into_iter().map(|(_, s)| s).collect();
    create_dir(&a.out)?;
    let ckpt_dir = a.out.join("checkpoints");
    let metrics_path = a.out.join("metrics.csv");
    let every = a.checkpoint_every;
    let on_generation = |state: &TrainState| -> Result<(), PipelineError> {
        let m = state.metrics.last().expect("metrics after a step");
        println!(
            "generation {} return {:.2} crash {:.3} route completion {:.3} gen {:.1} ms",
            m.generation, m.mean_return, m.crash_rate, m.route_completion, m.gen_time_ms
        );
        let mut csv = String::from(GenerationMetrics::CSV_HEADER);
        csv.push('\n');
        for row in &state.metrics {
            csv.push_str(&row.csv_row());
            csv.push('\n');
        }
        std::fs::write(&metrics_path, csv).map_err(|source| ScenarioError::Io {
            path: metrics_path.display().to_string(),
            source,
        })?;
        if every > 0 && state.generation().is_multiple_of(every) {
            std::fs::create_dir_all(&ckpt_dir).map_err(|source| ScenarioError::Io {
                path: ckpt_dir.display().to_string(),
                source,
            })?;
            state.save(ckpt_dir.join(format!("gen_{:05}.json", state.generation())))?;
        }
        Ok(())
    };
    let state = match &a.resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            println!("resuming {} from generation {}", state.config.mode.name(), state.generation());
            resume_pipeline(state, &pool, &prior(), a.steps, on_generation)?
        }
        None => {
            let cfg = CatConfig {
                mode: a.mode,
                m: a.m,
                n: a.n,
                alpha: a.alpha,
                generations: a.steps,
                seed: a.seed,
                scenes_per_generation: a.scenes_per_generation,
                cem: CemConfig {
                    population: a.population,
                    ..CemConfig::default()
                },
                ..CatConfig::default()
            };
            run_pipeline(&cfg, &pool, &prior(), on_generation)?
        }
    };
    state.save(a.out.join("state.json"))?;
    save_policy(&state.policy(), a.out.join("policy.json"))?;
    println!("trained {} generations -> {}", state.generation(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let scenes: Vec<Scenario> = load_dir(&a.scenes, a.split, Split::Test)?.into_iter().map(|(_, s)| s).collect();
    let agent = AgentSpec::parse(&a.agent)?;
    let report = eval_agent(&|_| agent.build(), &[0], &scenes, a.traffic, &prior(), &AttackConfig::default())?;
    println!(
        "{} on {} scenes: route completion {:.3} crash rate {:.3}",
        a.traffic.name(),
        scenes.len(),
        report.route_completion.mean,
        report.crash_rate.mean
    );
    if let Some(out) = a.out {
        write(&out, &report.to_json())?;
    }
    Ok(())
}

fn eval_attack(a: EvalAttackArgs) -> Result<(), CliError> {
    let scenes: Vec<Scenario> = load_dir(&a.scenes, a.split, Split::Test)?.into_iter().map(|(_, s)| s).collect();
    let agent = AgentSpec::parse(&a.agent)?;
    let cfg = AttackConfig {
        method: a.method.into(),
        m: a.m,
        alpha: a.alpha,
        sim: SimConfig::default(),
    };
    let report = attack_success_rate(&agent, &scenes, a.n, &prior(), &cfg)?;
    println!(
        "attack success {}/{} = {:.1}% generation {:.1} +- {:.1} ms",
        report.collisions(),
        report.scenes.len(),
        100.0 * report.success_rate,
        report.generation_ms.mean,
        report.generation_ms.std
    );
    if let Some(out) = a.out {
        write(&out, &report.to_json())?;
    }
    Ok(())
}

/// A policy file, or the policy inside a training-state file.
fn load_checkpoint(path: &Path) -> Result<PolicyParams, CliError> {
    match load_policy(path) {
        Ok(p) => Ok(p),
        Err(policy_err) => TrainState::load(path).map(|s| s.policy()).map_err(|_| policy_err.into()),
    }
}

fn eval_policies(a: EvalPolicyArgs) -> Result<(), CliError> {
    let scenes: Vec<Scenario> = load_dir(&a.scenes, a.split, Split::Test)?.into_iter().map(|(_, s)| s).collect();
    let policies = a
        .seeds
        .iter()
        .map(|&seed| {
            Ok(SeededPolicy {
                seed,
                policy: load_checkpoint(&seed_path(&a.ckpt, seed))?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = eval_policy(&policies, &scenes, a.mode, &prior(), &AttackConfig::default())?;
    for s in &report.seeds {
        println!(
            "seed {} route completion {:.3} crash rate {:.3}",
            s.seed, s.route_completion, s.crash_rate
        );
    }
    println!(
        "{}: route completion {:.3} +- {:.3} crash rate {:.3} +- {:.3}",
        a.mode.name(),
        report.route_completion.mean,
        report.route_completion.std,
        report.crash_rate.mean,
        report.crash_rate.std
    );
    if let Some(out) = a.out {
        write(&out, &report.to_json())?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<(), CliError> {
    let trace = load_trace(&a.trace)?;
    render_episode(&trace, &a.out)?;
    println!("{} frames -> {}", trace.frames.len(), a.out.display());
    Ok(())
}
