//! The two-timescale loop: episodes under a fixed controller, rewrites between them.

pub mod bridge;
pub mod config;
mod env;
mod episode;
pub mod mock;
pub mod parse;
pub mod prompt;
pub mod report;
pub mod rewriter;
mod run;
pub mod stub;

pub use config::{AgentBackend, RunConfig, SimBackend};
pub use env::{BuiltinEnv, EnvError, Environment, Observation};
pub use episode::{run_episode, EpisodeRun};
pub use report::{load_report, RunReport, RunStatus};
pub use run::{canned_target_names, env_factory, evaluate, rewriter_for, run, run_loop, write_report, EnvFactory, RunError};
