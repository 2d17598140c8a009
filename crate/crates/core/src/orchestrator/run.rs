//! The slow loop: run an episode, and after a failure ask the rewriter for a
//! replacement controller; stop on convergence or when the call budget is spent.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc;
use std::time::Duration;

use thiserror::Error;

use super::bridge::BridgeEnv;
use super::config::{
    AgentBackend, RunConfig, SimBackend, BACKEND_RETRIES, MAX_CONSECUTIVE_PARSE_FAILURES,
};
use super::env::{BuiltinEnv, EnvError, Environment};
use super::episode::{run_episode, EpisodeRun};
use super::parse::parse_rewrite;
use super::prompt::build_prompt;
use super::report::{eval_history, RunReport, RunStatus, PARSE_FAILURE_PREFIX};
use super::rewriter::{LlmConfig, LlmRewriter, MockRewriter, RewriteError, RewriteRequest, Rewriter};
use crate::controller::{canned_features, default_controller, ControllerProgram, ControllerSlot, Provenance, Sandbox};
use crate::memory::{load_history, DiagnosisRecord, EpisodeOutcome, RunStore, StoreError};
use crate::sim::{TaskId, TABLE_TOP_Z};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 4,
            RunError::Store(_) => 1,
        }
    }
}

/// Builds a fresh environment. Called again after a backend failure.
pub type EnvFactory = dyn Fn() -> Result<Box<dyn Environment>, EnvError> + Sync;

pub fn env_factory(config: &RunConfig) -> Box<EnvFactory> {
    let task = config.task_spec();
    match config.sim.clone() {
        SimBackend::Builtin => Box::new(move || Ok(Box::new(BuiltinEnv::new(task.clone())?) as Box<dyn Environment>)),
        SimBackend::Bridge { command } => {
            let id = task.task;
            Box::new(move || Ok(Box::new(BridgeEnv::spawn(&command, id)?) as Box<dyn Environment>))
        }
    }
}

pub fn rewriter_for(config: &RunConfig) -> Result<Box<dyn Rewriter>, RunError> {
    match config.agent {
        AgentBackend::Mock => Ok(Box::new(MockRewriter)),
        AgentBackend::Llm => {
            let llm = LlmConfig::from_env(Duration::from_secs(config.llm_timeout_secs)).map_err(RunError::Config)?;
            Ok(Box::new(LlmRewriter::new(llm)))
        }
    }
}

/// Target names the default controller declares, used for dry-run frames.
pub fn canned_target_names(task: TaskId) -> Vec<&'static str> {
    match task {
        TaskId::Lift => vec!["cube"],
        TaskId::PickPlace => vec!["can"],
        TaskId::Stack => vec!["cubeA", "cubeB"],
    }
}

/// Runs one episode, rebuilding the environment and retrying after backend failures.
fn episode_with_retries(
    env: &mut Option<Box<dyn Environment>>,
    make_env: &EnvFactory,
    sandbox: &Sandbox,
    program: &ControllerProgram,
    seed: u64,
    budget: u32,
    index: u32,
) -> Result<EpisodeRun, EnvError> {
    let mut last = None;
    for attempt in 0..=BACKEND_RETRIES {
        if env.is_none() {
            match make_env() {
                Ok(e) => *env = Some(e),
                Err(e) => {
                    log::warn!("environment start failed (attempt {}): {e}", attempt + 1);
                    last = Some(e);
                    continue;
                }
            }
        }
        let e = env.as_mut().expect("environment was just built");
        match run_episode(e.as_mut(), sandbox, program, TABLE_TOP_Z, seed, budget, index) {
            Ok(run) => return Ok(run),
            Err(err) => {
                log::warn!("episode {index} backend failure (attempt {}): {err}", attempt + 1);
                *env = None;
                last = Some(err);
            }
        }
    }
    Err(last.expect("at least one attempt ran"))
}

fn converged(outcomes: &[EpisodeOutcome], version: u32, window: u32) -> bool {
    let w = window as usize;
    outcomes.len() >= w
        && outcomes[outcomes.len() - w..]
            .iter()
            .all(|o| o.success && o.controller_version == version)
}

/// Runs `program` on `episodes` evaluation seeds and records them in `dir`.
pub fn evaluate(
    config: &RunConfig,
    sandbox: &Sandbox,
    program: &ControllerProgram,
    make_env: &EnvFactory,
    dir: &Path,
    episodes: u32,
) -> Result<Result<Vec<EpisodeOutcome>, EnvError>, StoreError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.to_owned(),
            source,
        })?;
    }
    let mut store = RunStore::open(dir, config)?;
    store.record_controller(program.version, &program.source)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(episodes.max(1) as usize);
    let budget = config.episode_budget;
    let (tx, rx) = mpsc::channel::<(u32, Result<EpisodeRun, EnvError>)>();
    std::thread::scope(|scope| {
        for w in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || {
                let mut env = None;
                for j in (w as u32..episodes).step_by(workers) {
                    let r = episode_with_retries(&mut env, make_env, sandbox, program, config.eval_seed(j), budget, j);
                    let failed = r.is_err();
                    if tx.send((j, r)).is_err() || failed {
                        return;
                    }
                }
            });
        }
        drop(tx);
        // Record in episode order as results arrive.
        let mut pending = BTreeMap::new();
        let mut outcomes = Vec::new();
        for (j, r) in rx {
            pending.insert(j, r);
            while let Some(r) = pending.remove(&(outcomes.len() as u32)) {
                match r {
                    Ok(run) => outcomes.push(store.record_episode(run.outcome, &run.trace, &run.frames)?),
                    Err(e) => return Ok(Err(e)),
                }
            }
        }
        Ok(Ok(outcomes))
    })
}

/// Runs the whole loop with backends built from `config` and writes `report.json`.
pub fn run(config: &RunConfig) -> Result<RunReport, RunError> {
    config.validate().map_err(RunError::Config)?;
    let mut rewriter = rewriter_for(config)?;
    let make_env = env_factory(config);
    run_loop(config, rewriter.as_mut(), make_env.as_ref())
}

/// Runs the loop with the given backends and writes `report.json`.
pub fn run_loop(config: &RunConfig, rewriter: &mut dyn Rewriter, make_env: &EnvFactory) -> Result<RunReport, RunError> {
    config.validate().map_err(RunError::Config)?;
    let root = config.out.clone();
    if root.join("index.json").exists() {
        return Err(RunError::Config(format!("{} already holds a run", root.display())));
    }
    let mut store = RunStore::open(&root, config)?;
    let sandbox = Sandbox::new();
    let canned = canned_features(&canned_target_names(config.task));
    let spec = config.task_spec();
    let initial = sandbox
        .validate(default_controller(&spec).as_bytes(), &canned, 0, Provenance::Initial)
        .map_err(|e| RunError::Config(format!("default controller is invalid: {e}")))?;
    store.record_controller(0, &initial.source)?;
    let mut slot = ControllerSlot::new(initial, canned);

    let mut env = None;
    let mut outcomes: Vec<EpisodeOutcome> = Vec::new();
    let mut diagnoses: Vec<DiagnosisRecord> = Vec::new();
    let mut calls = 0u32;
    let mut parse_failures = 0u32;
    let mut abort_reason = None;

    let status = loop {
        let index = outcomes.len() as u32;
        let seed = config.training_seed(index);
        let run = match episode_with_retries(
            &mut env,
            make_env,
            &sandbox,
            slot.active(),
            seed,
            config.episode_budget,
            index,
        ) {
            Ok(run) => run,
            Err(e) => {
                abort_reason = Some(format!("episode {index}: {e}"));
                break RunStatus::BackendFailure;
            }
        };
        let outcome = store.record_episode(run.outcome, &run.trace, &run.frames)?;
        log::info!(
            "episode {index} seed {seed} v{}: {} in `{}` after {} steps",
            outcome.controller_version,
            if outcome.success { "success" } else { "failure" },
            outcome.final_phase,
            outcome.steps
        );
        let needs_rewrite = !outcome.success || outcome.oscillation;
        outcomes.push(outcome);

        if converged(&outcomes, slot.active().version, config.window) {
            break RunStatus::Converged;
        }
        if !needs_rewrite {
            continue;
        }
        if calls >= config.iterations {
            break RunStatus::BudgetExhausted;
        }
        calls += 1;
        let bundle = build_prompt(&outcomes, &diagnoses, &slot.active().source, config.task);
        store.write_bytes(&format!("prompts/p{calls:03}.md"), bundle.full_text().as_bytes())?;
        let request = RewriteRequest {
            task: config.task,
            call: calls,
            history: &outcomes,
            bundle: &bundle,
            run_dir: &root,
        };
        let text = match rewriter.rewrite(&request) {
            Ok(text) => text,
            Err(RewriteError::Credential(m)) => {
                abort_reason = Some(m);
                break RunStatus::CredentialRejected;
            }
            Err(e @ RewriteError::Unreachable(_)) => {
                abort_reason = Some(e.to_string());
                break RunStatus::BackendFailure;
            }
        };
        let episode_index = Some(index);
        let record = match parse_rewrite(&text) {
            Err(e) => {
                parse_failures += 1;
                DiagnosisRecord {
                    episode_index,
                    rejection: Some(format!("{PARSE_FAILURE_PREFIX}: {}", e.0)),
                    ..DiagnosisRecord::unspecified()
                }
            }
            Ok((d, source)) => {
                parse_failures = 0;
                let mut d = DiagnosisRecord { episode_index, ..d };
                match slot.propose(&sandbox, source.as_bytes(), rewriter.provenance()) {
                    Ok(p) => {
                        d.produced_version = Some(p.version);
                        store.record_controller(p.version, &p.source)?;
                        log::info!("installed v{}: {}", p.version, d.strategy);
                    }
                    Err(e) => {
                        log::warn!("proposal rejected: {e}");
                        d.rejection = Some(e.to_string());
                    }
                }
                d
            }
        };
        store.record_diagnosis(&record)?;
        diagnoses.push(record);
        if parse_failures >= MAX_CONSECUTIVE_PARSE_FAILURES {
            abort_reason = Some(format!("{parse_failures} consecutive rewriter responses without controller source"));
            break RunStatus::BackendFailure;
        }
    };
    drop(env);

    let mut status = status;
    if matches!(status, RunStatus::Converged | RunStatus::BudgetExhausted) && config.eval_episodes > 0 {
        let eval = evaluate(
            config,
            &sandbox,
            slot.active(),
            make_env,
            &root.join("eval"),
            config.eval_episodes,
        )?;
        if let Err(e) = eval {
            // A partial evaluation would overstate or understate the rate.
            let _ = std::fs::remove_dir_all(root.join("eval"));
            abort_reason = Some(format!("evaluation: {e}"));
            status = RunStatus::BackendFailure;
        }
    }
    write_report(&root, config, status, abort_reason)
}

/// Rebuilds the report from the run directory and writes `report.json`.
pub fn write_report(
    root: &Path,
    config: &RunConfig,
    status: RunStatus,
    abort_reason: Option<String>,
) -> Result<RunReport, RunError> {
    let history = load_history(root)?;
    let eval = eval_history(root)?;
    let report = RunReport::from_records(config, status, abort_reason, &history, eval.as_ref());
    crate::memory::write_atomic(&root.join("report.json"), &report.to_json())?;
    Ok(report)
}
