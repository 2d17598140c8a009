//! Run configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::sim::{TaskId, TaskSpec};

/// Where episodes are simulated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SimBackend {
    Builtin,
    /// External simulator spawned with `sh -c <command>`, spoken to over stdio.
    Bridge { command: String },
}

impl SimBackend {
    pub fn label(&self) -> &'static str {
        match self {
            SimBackend::Builtin => "builtin",
            SimBackend::Bridge { .. } => "bridge",
        }
    }
}

impl FromStr for SimBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "builtin" {
            return Ok(SimBackend::Builtin);
        }
        match s.strip_prefix("bridge:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(SimBackend::Bridge { command: cmd.to_owned() }),
            Some(_) => Err("`bridge:` needs a command".into()),
            None => Err(format!("unknown simulator `{s}`, expected `builtin` or `bridge:<command>`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentBackend {
    Mock,
    Llm,
}

impl fmt::Display for AgentBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentBackend::Mock => "mock",
            AgentBackend::Llm => "llm",
        })
    }
}

impl FromStr for AgentBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(AgentBackend::Mock),
            "llm" => Ok(AgentBackend::Llm),
            _ => Err(format!("unknown agent `{s}`, expected `mock` or `llm`")),
        }
    }
}

pub const DEFAULT_ITERATIONS: u32 = 20;
pub const DEFAULT_WINDOW: u32 = 3;
pub const DEFAULT_LLM_TIMEOUT_SECS: u64 = 120;
/// Outcomes summarised in a prompt.
pub const DIGEST_EPISODES: usize = 5;
/// Prior episodes whose final frame is attached to a prompt.
pub const PRIOR_FINAL_FRAMES: usize = 2;
pub const MAX_PROMPT_IMAGES: usize = 16;
/// Consecutive unparseable rewriter responses before the run is abandoned.
pub const MAX_CONSECUTIVE_PARSE_FAILURES: u32 = 3;
/// Extra attempts at an episode after an environment backend failure.
pub const BACKEND_RETRIES: u32 = 2;
/// Eval seeds start this far above the base seed, clear of training seeds.
pub const EVAL_SEED_OFFSET: u64 = 1000;

pub fn default_eval_episodes(task: TaskId) -> u32 {
    match task {
        TaskId::Lift => 4,
        TaskId::PickPlace | TaskId::Stack => 20,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskId,
    pub sim: SimBackend,
    pub agent: AgentBackend,
    /// Largest number of rewriter calls.
    pub iterations: u32,
    pub episode_budget: u32,
    pub seed: u64,
    /// Consecutive successes that end the rewrite loop.
    pub window: u32,
    pub eval_episodes: u32,
    #[serde(skip)]
    pub out: PathBuf,
    pub llm_timeout_secs: u64,
}

impl RunConfig {
    pub fn new(task: TaskId, out: impl Into<PathBuf>) -> Self {
        Self {
            task,
            sim: SimBackend::Builtin,
            agent: AgentBackend::Mock,
            iterations: DEFAULT_ITERATIONS,
            episode_budget: TaskSpec::new(task).episode_step_budget,
            seed: 42,
            window: DEFAULT_WINDOW,
            eval_episodes: default_eval_episodes(task),
            out: out.into(),
            llm_timeout_secs: DEFAULT_LLM_TIMEOUT_SECS,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.iterations < 1 {
            return Err("iteration budget must be at least 1".into());
        }
        if self.episode_budget < 1 {
            return Err("episode step budget must be at least 1".into());
        }
        if self.window < 1 {
            return Err("convergence window must be at least 1".into());
        }
        if self.llm_timeout_secs < 1 {
            return Err("LLM timeout must be at least 1 s".into());
        }
        if self.out.as_os_str().is_empty() {
            return Err("output directory is empty".into());
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            episode_step_budget: self.episode_budget,
            ..TaskSpec::new(self.task)
        }
    }

    pub fn training_seed(&self, episode: u32) -> u64 {
        self.seed.wrapping_add(episode as u64)
    }

    pub fn eval_seed(&self, j: u32) -> u64 {
        self.seed.wrapping_add(EVAL_SEED_OFFSET).wrapping_add(j as u64)
    }
}
