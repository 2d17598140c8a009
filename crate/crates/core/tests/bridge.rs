//! Wire protocol against the stub simulator process.

mod common;

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use aor::controller::Sandbox;
use aor::orchestrator::bridge::{decode_line, encode_line, BridgeEnv, BridgeMessage};
use aor::orchestrator::{load_report, run_episode, BuiltinEnv, Environment, RunStatus};
use aor::sim::{Action, TaskId, TaskSpec, TABLE_TOP_Z};

use common::scripted_program;

const STUB: &str = env!("CARGO_BIN_EXE_aor-bridge-stub");

#[test]
fn observations_match_the_builtin_simulator() {
    let mut wire = BridgeEnv::spawn(STUB, TaskId::Stack).unwrap();
    let mut local = BuiltinEnv::new(TaskSpec::new(TaskId::Stack)).unwrap();
    let mut pairs = vec![(wire.reset(3).unwrap(), local.reset(3).unwrap())];
    for t in 0..50 {
        let a = Action::new((t as f64 * 0.3).sin(), 0.4, -0.3, if t < 25 { -1.0 } else { 1.0 });
        pairs.push((wire.step(&a).unwrap(), local.step(&a).unwrap()));
    }
    for (i, (w, l)) in pairs.iter().enumerate() {
        assert_eq!((w.image.width, w.image.height), (256, 256), "message {i}");
        assert_eq!(w.image.rgb, l.image.rgb, "message {i}");
        for (dw, dl) in w.image.depth.iter().zip(&l.image.depth) {
            assert!((dw - dl).abs() <= 1e-6 * dl.max(1.0), "message {i}: depth {dw} vs {dl}");
        }
        assert_eq!(w.eef_pos, l.eef_pos);
        assert_eq!(w.object, l.object);
        assert_eq!((w.reward, w.done, w.success), (l.reward, l.done, l.success));
        assert_eq!(w.support_displacement, l.support_displacement);
    }
    assert_eq!(wire.camera(), local.camera());
}

#[test]
fn full_episode_over_the_wire_matches_builtin() {
    let program = scripted_program(TaskId::Lift, 3);
    let spec = TaskSpec::new(TaskId::Lift);
    let sandbox = Sandbox::new();
    let mut wire = BridgeEnv::spawn(STUB, TaskId::Lift).unwrap();
    let mut local = BuiltinEnv::new(spec.clone()).unwrap();
    let a = run_episode(&mut wire, &sandbox, &program, TABLE_TOP_Z, 45, spec.episode_step_budget, 0).unwrap();
    let b = run_episode(&mut local, &sandbox, &program, TABLE_TOP_Z, 45, spec.episode_step_budget, 0).unwrap();
    assert!(b.outcome.success);
    // Depth travels as f32, so continuous values agree only approximately.
    let (x, y) = (&a.outcome, &b.outcome);
    assert_eq!((x.success, x.steps, &x.phase_log, &x.final_phase), (y.success, y.steps, &y.phase_log, &y.final_phase));
    assert!((x.reward_total - y.reward_total).abs() < 1e-4);
    assert!((x.min_distance.unwrap() - y.min_distance.unwrap()).abs() < 1e-4);
    for (r, q) in a.trace.iter().zip(&b.trace) {
        assert_eq!(r.phase, q.phase);
        assert!(r.action.iter().zip(&q.action).all(|(u, v)| (u - v).abs() < 1e-3), "step {}", r.step);
    }
}

#[test]
fn simulator_errors_surface_as_backend_failures() {
    let mut env = BridgeEnv::spawn(&format!("{STUB} --fail-on-reset"), TaskId::Lift).unwrap();
    assert!(env.reset(1).unwrap_err().to_string().contains("injected"));

    let mut env = BridgeEnv::spawn(&format!("{STUB} --fail-at-step 3"), TaskId::Lift).unwrap();
    env.reset(1).unwrap();
    for _ in 0..3 {
        env.step(&Action::zero()).unwrap();
    }
    assert!(env.step(&Action::zero()).is_err());

    let mut env = BridgeEnv::spawn("exit 0", TaskId::Lift).unwrap();
    assert!(env.reset(1).is_err());
}

#[test]
fn stub_rejects_malformed_and_foreign_messages() {
    let mut child = Command::new(STUB).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut ask = |line: &str| {
        stdin.write_all(line.as_bytes()).unwrap();
        stdin.flush().unwrap();
        let mut reply = String::new();
        stdout.read_line(&mut reply).unwrap();
        decode_line(&reply).unwrap()
    };
    assert!(matches!(ask("not json\n"), BridgeMessage::Error { .. }));
    assert!(matches!(
        ask("{\"protocol\": 99, \"type\": \"reset\", \"seed\": 1, \"task\": \"lift\"}\n"),
        BridgeMessage::Error { .. }
    ));
    assert!(matches!(ask(&encode_line(&BridgeMessage::Step { action: [0.0; 4] })), BridgeMessage::Error { .. }));
    match ask(&encode_line(&BridgeMessage::Reset { seed: 5, task: TaskId::Lift })) {
        BridgeMessage::Obs(o) => {
            let obs = o.to_observation().unwrap();
            assert_eq!((obs.image.width, obs.image.height), (o.width, o.height));
        }
        other => panic!("unexpected reply {other:?}"),
    }
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn cli_run_over_the_bridge_and_injected_failure() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, sim: String| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_aor"))
            .args(["run", "--task", "lift", "--eval", "1", "--sim"])
            .arg(sim)
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "error")
            .output()
            .unwrap()
            .status;
        (status.code(), out)
    };
    let (code, ok) = run("ok", format!("bridge:{STUB}"));
    assert_eq!(code, Some(0));
    assert_eq!(load_report(&ok).unwrap().rewrite_calls, 3);

    let (code, failed) = run("failed", format!("bridge:{STUB} --fail-at-step 5"));
    assert_eq!(code, Some(3));
    let report = load_report(&failed).unwrap();
    assert_eq!(report.status, RunStatus::BackendFailure);
    assert!(report.abort_reason.unwrap().contains("injected failure at step 5"));
}
