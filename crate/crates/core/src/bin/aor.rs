//! Command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use aor::controller::{canned_features, Provenance, Sandbox};
use aor::memory::{load_history, load_trace};
use aor::orchestrator::config::RunConfig;
use aor::orchestrator::report::{eval_history, read_config};
use aor::orchestrator::{
    canned_target_names, env_factory, evaluate, load_report, run, write_report, AgentBackend, RunError, RunStatus,
    SimBackend,
};
use aor::raster::decode_ppm;
use aor::sim::TaskId;

#[derive(Parser)]
#[command(version, about = "Act-observe-rewrite loop for tabletop manipulation controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the rewrite loop, then evaluate the final controller.
    Run {
        #[arg(long)]
        task: TaskId,
        /// `builtin`, or `bridge:<command>` for an external simulator on stdio.
        #[arg(long, default_value = "builtin")]
        sim: SimBackend,
        #[arg(long, default_value = "mock")]
        agent: AgentBackend,
        /// Largest number of rewriter calls.
        #[arg(long)]
        iters: Option<u32>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Step budget per episode; defaults to the task's.
        #[arg(long)]
        steps: Option<u32>,
        /// Evaluation episodes; defaults to the task's.
        #[arg(long)]
        eval: Option<u32>,
        /// Consecutive successes that count as converged.
        #[arg(long)]
        window: Option<u32>,
        /// Seconds before an LLM request is abandoned.
        #[arg(long)]
        llm_timeout: Option<u64>,
    },
    /// Re-evaluate the latest controller of a run and update its report.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        episodes: u32,
    },
    /// Print the summary table of a run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write an episode's key frames as PNG and print its phase log.
    Replay {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        episode: u32,
        /// Read the episode from the evaluation phase.
        #[arg(long)]
        eval: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            task,
            sim,
            agent,
            iters,
            seed,
            out,
            steps,
            eval,
            window,
            llm_timeout,
        } => {
            let mut config = RunConfig::new(task, out);
            config.sim = sim;
            config.agent = agent;
            config.seed = seed;
            config.iterations = iters.unwrap_or(config.iterations);
            config.episode_budget = steps.unwrap_or(config.episode_budget);
            config.eval_episodes = eval.unwrap_or(config.eval_episodes);
            config.window = window.unwrap_or(config.window);
            config.llm_timeout_secs = llm_timeout.unwrap_or(config.llm_timeout_secs);
            match run(&config) {
                Ok(report) => {
                    print!("{}", report.render());
                    report.status.exit_code()
                }
                Err(e) => {
                    eprintln!("aor: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Eval { run, episodes } => result_code(eval_command(&run, episodes)),
        Command::Report { run } => result_code(load_report(&run).map_err(Into::into).map(|r| {
            print!("{}", r.render());
            0
        })),
        Command::Replay { run, episode, eval } => result_code(replay(&run, episode, eval).map(|_| 0)),
    };
    ExitCode::from(code as u8)
}

fn result_code(r: anyhow::Result<i32>) -> i32 {
    r.unwrap_or_else(|e| {
        eprintln!("aor: {e:#}");
        if e.downcast_ref::<RunError>().is_some_and(|e| matches!(e, RunError::Config(_))) {
            4
        } else {
            1
        }
    })
}

fn eval_command(root: &Path, episodes: u32) -> anyhow::Result<i32> {
    let config = read_config(root)?;
    let history = load_history(root)?;
    let (version, source) = history
        .controllers
        .last()
        .cloned()
        .ok_or_else(|| anyhow!("{} has no controllers", root.display()))?;
    let sandbox = Sandbox::new();
    let canned = canned_features(&canned_target_names(config.task));
    let program = sandbox
        .validate(source.as_bytes(), &canned, version, Provenance::Initial)
        .with_context(|| format!("stored controller v{version} no longer validates"))?;
    let previous = load_report(root).ok();
    let make_env = env_factory(&config);
    let eval = evaluate(&config, &sandbox, &program, make_env.as_ref(), &root.join("eval"), episodes)?;
    let (status, reason) = match eval {
        Ok(_) => (
            previous.as_ref().map_or(RunStatus::Incomplete, |r| r.status),
            previous.and_then(|r| r.abort_reason),
        ),
        Err(e) => {
            let _ = std::fs::remove_dir_all(root.join("eval"));
            (RunStatus::BackendFailure, Some(format!("evaluation: {e}")))
        }
    };
    let report = write_report(root, &config, status, reason)?;
    print!("{}", report.render());
    Ok(if eval_history(root)?.is_some() { 0 } else { RunStatus::BackendFailure.exit_code() })
}

fn replay(root: &Path, episode: u32, from_eval: bool) -> anyhow::Result<()> {
    let dir = if from_eval { root.join("eval") } else { root.to_owned() };
    let history = load_history(&dir)?;
    let outcome = history
        .outcomes
        .iter()
        .find(|o| o.episode_index == episode)
        .ok_or_else(|| anyhow!("episode {episode} is not recorded in {}", dir.display()))?;
    let out = root.join("replay").join(format!("{}{episode:03}", if from_eval { "eval_" } else { "" }));
    std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
    for rel in &outcome.keyframe_refs {
        let bytes = std::fs::read(dir.join(rel)).with_context(|| rel.clone())?;
        let (w, h, rgb) = decode_ppm(&bytes)?;
        let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).ok_or_else(|| anyhow!("{rel}: bad raster"))?;
        let name = Path::new(rel).file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        img.save(out.join(format!("{name}.png")))?;
    }
    println!(
        "episode {} seed {} controller v{}: {} after {} steps, final phase `{}`",
        outcome.episode_index,
        outcome.seed,
        outcome.controller_version,
        if outcome.success { "success" } else { "failure" },
        outcome.steps,
        outcome.final_phase
    );
    for p in &outcome.phase_log {
        println!("  step {:>4}  {}", p.step, p.phase);
    }
    let trace = load_trace(&dir, episode).map_err(|e| anyhow!(e))?;
    if let Some(max) = trace.iter().filter_map(|r| r.support_displacement).reduce(f64::max) {
        println!("  largest support displacement {max:.4} m");
    }
    println!("{} frames written to {}", outcome.keyframe_refs.len(), out.display());
    if outcome.keyframe_refs.is_empty() {
        bail!("episode {episode} has no key frames");
    }
    Ok(())
}
