//! Outer-loop behaviour: call accounting, fallback, convergence, budgets and the CLI.

mod common;

use std::process::Command;

use aor::controller::{Provenance, Sandbox};
use aor::memory::{load_history, EpisodeOutcome, PhaseEntry};
use aor::orchestrator::mock::mock_response;
use aor::orchestrator::prompt::build_prompt;
use aor::orchestrator::report::PARSE_FAILURE_PREFIX;
use aor::orchestrator::rewriter::{RewriteError, RewriteRequest, Rewriter};
use aor::orchestrator::{env_factory, load_report, run_episode, run_loop, BuiltinEnv, RunConfig, RunStatus};
use aor::sim::{TaskId, TaskSpec, TABLE_TOP_Z};

use common::{mock_run, scripted_program};

/// Replays fixed responses, then falls back to the scripted mock.
struct Canned {
    responses: Vec<String>,
    calls: Vec<u32>,
}

impl Canned {
    fn new(responses: &[&str]) -> Self {
        Self {
            responses: responses.iter().map(|s| s.to_string()).collect(),
            calls: Vec::new(),
        }
    }
}

impl Rewriter for Canned {
    fn provenance(&self) -> Provenance {
        Provenance::Llm
    }

    fn rewrite(&mut self, req: &RewriteRequest<'_>) -> Result<String, RewriteError> {
        self.calls.push(req.call);
        let i = self.calls.len() - 1;
        Ok(self
            .responses
            .get(i)
            .cloned()
            .unwrap_or_else(|| mock_response(req.task, i as u32 + 1, req.history)))
    }
}

const INVALID: &str = "The controller needs a reset.\n```controller\nfn reset() { this.phase = \"x\"; }\n```\n";

fn config(task: TaskId, dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::new(task, dir.join("run"));
    c.eval_episodes = 2;
    c
}

fn run_with(config: &RunConfig, rw: &mut Canned) -> aor::orchestrator::RunReport {
    let make_env = env_factory(config);
    run_loop(config, rw, make_env.as_ref()).unwrap()
}

#[test]
fn three_unparseable_responses_abort_without_new_versions() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(TaskId::Lift, dir.path());
    let mut rw = Canned::new(&["no code here", "", "```diagnosis\n{}\n```"]);
    let report = run_with(&c, &mut rw);
    assert_eq!(report.status, RunStatus::BackendFailure);
    assert_eq!(report.status.exit_code(), 3);
    assert_eq!(report.rewrite_calls, 3);
    assert_eq!(report.wasted_calls, 3);
    assert_eq!(report.final_version, 0);
    assert!(report.eval.is_none());
    let h = load_history(&c.out).unwrap();
    assert_eq!(h.controllers.len(), 1);
    assert!(h.diagnoses.iter().all(|(_, d)| d.rejection.as_deref().unwrap().starts_with(PARSE_FAILURE_PREFIX)));
    // The retained controller runs again after each wasted call.
    assert_eq!(h.outcomes.len(), 3);
    assert!(h.outcomes.iter().all(|o| o.controller_version == 0));
}

#[test]
fn a_parseable_response_resets_the_abort_counter() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(TaskId::Lift, dir.path());
    let mut rw = Canned::new(&["nothing", "nothing", INVALID, "nothing", "nothing"]);
    let report = run_with(&c, &mut rw);
    assert_eq!(report.wasted_calls, 4);
    assert_eq!(report.rejected_proposals, 1);
    assert_eq!(report.status, RunStatus::Converged, "{:?}", report.abort_reason);
    assert_eq!(rw.calls, (1..=report.rewrite_calls).collect::<Vec<_>>());
}

#[test]
fn rejected_proposals_keep_the_active_version() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(TaskId::Lift, dir.path());
    c.iterations = 2;
    let mut rw = Canned::new(&[INVALID, INVALID]);
    let report = run_with(&c, &mut rw);
    assert_eq!(report.status, RunStatus::BudgetExhausted);
    assert_eq!(report.status.exit_code(), 2);
    assert_eq!(report.rejected_proposals, 2);
    assert_eq!(report.wasted_calls, 0);
    assert_eq!(report.final_version, 0);
    let h = load_history(&c.out).unwrap();
    for (_, d) in &h.diagnoses {
        assert_eq!(d.produced_version, None);
        assert!(d.rejection.as_deref().unwrap().contains("interface"), "{:?}", d.rejection);
    }
    // Exhausted budgets still evaluate the active controller.
    assert_eq!(report.eval.unwrap().version, 0);
}

#[test]
fn versions_increase_and_no_call_follows_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let report = mock_run(TaskId::Lift, &dir.path().join("run"), 42);
    assert_eq!(report.status, RunStatus::Converged);
    let h = load_history(&dir.path().join("run")).unwrap();
    let versions: Vec<u32> = h.controllers.iter().map(|(v, _)| *v).collect();
    assert_eq!(versions, (0..=report.final_version).collect::<Vec<_>>());
    let produced: Vec<u32> = h.diagnoses.iter().filter_map(|(_, d)| d.produced_version).collect();
    assert!(produced.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(h.diagnoses.len() as u32, report.rewrite_calls);
    let last_call = h.diagnoses.last().unwrap().1.episode_index.unwrap();
    let tail = &h.outcomes[last_call as usize + 1..];
    assert_eq!(tail.len(), 3);
    assert!(tail.iter().all(|o| o.success && o.controller_version == report.final_version));
    let seeds: Vec<u64> = h.outcomes.iter().map(|o| o.seed).collect();
    assert_eq!(seeds, (42..42 + h.outcomes.len() as u64).collect::<Vec<_>>());
}

#[test]
fn stack_with_one_call_exhausts_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(TaskId::Stack, dir.path());
    c.iterations = 1;
    c.eval_episodes = 0;
    let mut rw = Canned::new(&[]);
    let report = run_with(&c, &mut rw);
    assert_eq!(report.status, RunStatus::BudgetExhausted);
    assert_eq!(report.rewrite_calls, 1);
    assert_eq!(rw.calls, vec![1]);
}

#[test]
fn existing_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(TaskId::Lift, dir.path());
    run_with(&c, &mut Canned::new(&[]));
    let make_env = env_factory(&c);
    let err = run_loop(&c, &mut Canned::new(&[]), make_env.as_ref()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn one_step_budget_stops_after_one_step() {
    let spec = TaskSpec::new(TaskId::Lift);
    let program = scripted_program(TaskId::Lift, 3);
    let mut env = BuiltinEnv::new(spec).unwrap();
    let run = run_episode(&mut env, &Sandbox::new(), &program, TABLE_TOP_Z, 42, 1, 0).unwrap();
    assert_eq!(run.outcome.steps, 1);
    assert!(!run.outcome.success);
    assert_eq!(run.trace.len(), 1);
}

#[test]
fn default_lift_controller_stalls_in_reach() {
    let spec = TaskSpec::new(TaskId::Lift);
    let program = scripted_program(TaskId::Lift, 0);
    for seed in [1, 7, 42, 99, 123] {
        let mut env = BuiltinEnv::new(spec.clone()).unwrap();
        let run = run_episode(&mut env, &Sandbox::new(), &program, TABLE_TOP_Z, seed, spec.episode_step_budget, 0).unwrap();
        assert!(!run.outcome.success, "seed {seed}");
        assert_eq!(run.outcome.final_phase, "reach", "seed {seed}");
    }
}

#[test]
fn second_lift_version_lifts_on_seed_42() {
    let spec = TaskSpec::new(TaskId::Lift);
    let program = scripted_program(TaskId::Lift, 2);
    let mut env = BuiltinEnv::new(spec.clone()).unwrap();
    let run = run_episode(&mut env, &Sandbox::new(), &program, TABLE_TOP_Z, 42, spec.episode_step_budget, 0).unwrap();
    assert!(run.outcome.success, "final phase {}", run.outcome.final_phase);
}

fn outcome(i: u32) -> EpisodeOutcome {
    EpisodeOutcome {
        episode_index: i,
        seed: 100 + i as u64,
        controller_version: i / 2,
        reward_total: 1.5,
        steps: 300,
        success: i % 3 == 0,
        phase_log: vec![PhaseEntry {
            step: 0,
            phase: "reach".into(),
        }],
        final_phase: "reach".into(),
        min_distance: Some(0.1),
        oscillation: false,
        keyframe_refs: vec![format!("episodes/{i:03}/frames/000_reach.ppm")],
        controller_errors: 0,
        abort_reason: None,
    }
}

#[test]
fn prompt_is_deterministic_and_digests_the_last_five_episodes() {
    let history: Vec<_> = (0..7).map(outcome).collect();
    let a = build_prompt(&history, &[], "fn reset() {}", TaskId::Lift);
    let b = build_prompt(&history, &[], "fn reset() {}", TaskId::Lift);
    assert_eq!(a, b);
    assert_eq!(a.full_text(), b.full_text());
    for i in 0..7 {
        assert_eq!(a.digest.contains(&format!("- episode {i} |")), i >= 2, "episode {i}");
    }
    assert_eq!(a.images.len(), 3);
}

fn aor() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aor"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn cli_report_eval_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = aor()
        .args(["run", "--task", "lift", "--eval", "2", "--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("converged"), "{table}");

    let out = aor().arg("report").arg("--run").arg(&run).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);

    let out = aor().args(["eval", "--episodes", "3", "--run"]).arg(&run).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = load_report(&run).unwrap();
    assert_eq!(report.eval.as_ref().unwrap().episodes, 3);
    assert_eq!(report.status, RunStatus::Converged);

    let out = aor().args(["replay", "--episode", "0", "--run"]).arg(&run).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let pngs = std::fs::read_dir(run.join("replay/000")).unwrap().count();
    assert!(pngs > 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("final phase `reach`"), "{text}");

    let out = aor().args(["replay", "--episode", "1", "--eval", "--run"]).arg(&run).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(run.join("replay/eval_001").is_dir());

    let out = aor().args(["replay", "--episode", "999", "--run"]).arg(&run).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_exit_codes_for_bad_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = aor()
        .args(["run", "--task", "lift", "--window", "0", "--out"])
        .arg(dir.path().join("a"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let out = aor()
        .args(["run", "--task", "lift", "--agent", "llm", "--out"])
        .arg(dir.path().join("b"))
        .env_remove("AOR_LLM_ENDPOINT")
        .env_remove("AOR_LLM_MODEL")
        .env_remove("AOR_LLM_API_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("AOR_LLM_"));
    let out = aor()
        .args(["run", "--task", "stack", "--iters", "1", "--eval", "1", "--out"])
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
