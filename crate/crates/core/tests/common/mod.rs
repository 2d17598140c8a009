//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use aor::controller::templates::TemplateOptions;
use aor::controller::{canned_features, ControllerProgram, Provenance, Sandbox};
use aor::orchestrator::mock::scripted_options;
use aor::orchestrator::rewriter::MockRewriter;
use aor::orchestrator::{env_factory, run_loop, RunConfig, RunReport};
use aor::sim::TaskId;

/// Validates a template-rendered controller.
pub fn program_from(opts: &TemplateOptions, version: u32) -> ControllerProgram {
    let names: Vec<&str> = opts.targets.iter().map(|t| t.name.as_str()).collect();
    Sandbox::new()
        .validate(opts.render().as_bytes(), &canned_features(&names), version, Provenance::MockRewriter)
        .unwrap_or_else(|e| panic!("{}: {e}", opts.title))
}

/// Scripted mock version `version` of `task`.
pub fn scripted_program(task: TaskId, version: u32) -> ControllerProgram {
    program_from(&scripted_options(task, version as usize), version)
}

/// Validates an arbitrary source against the canned frame for `targets`.
pub fn program_src(src: &str, targets: &[&str]) -> ControllerProgram {
    Sandbox::new()
        .validate(src.as_bytes(), &canned_features(targets), 0, Provenance::Initial)
        .unwrap_or_else(|e| panic!("{e}"))
}

/// Full mock-backend run into `out`.
pub fn mock_run(task: TaskId, out: &Path, seed: u64) -> RunReport {
    let mut config = RunConfig::new(task, out.to_owned());
    config.seed = seed;
    let make_env = env_factory(&config);
    run_loop(&config, &mut MockRewriter, make_env.as_ref()).expect("mock run")
}

fn sign(x: f64) -> i8 {
    if x > 1e-6 {
        1
    } else if x < -1e-6 {
        -1
    } else {
        0
    }
}

/// Largest flip count over every window start, by direct enumeration.
pub fn naive_max_flips(values: &[f64]) -> usize {
    let signed: Vec<(usize, i8)> = values
        .iter()
        .enumerate()
        .map(|(i, v)| (i, sign(*v)))
        .filter(|(_, s)| *s != 0)
        .collect();
    let flips: Vec<(usize, usize)> = signed
        .windows(2)
        .filter(|w| w[0].1 != w[1].1)
        .map(|w| (w[0].0, w[1].0))
        .collect();
    (0..values.len())
        .map(|s| flips.iter().filter(|&&(p, t)| s <= p && t < s + 50).count())
        .max()
        .unwrap_or(0)
}

pub fn naive_oscillation(actions: &[[f64; 4]]) -> bool {
    (0..3).any(|axis| naive_max_flips(&actions.iter().map(|a| a[axis]).collect::<Vec<_>>()) > 20)
}

pub fn naive_min_distance(pairs: &[([f64; 3], Option<[f64; 3]>)]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (e, o) in pairs {
        if let Some(o) = o {
            let d = ((e[0] - o[0]).powi(2) + (e[1] - o[1]).powi(2) + (e[2] - o[2]).powi(2)).sqrt();
            if best.map_or(true, |b| d < b) {
                best = Some(d);
            }
        }
    }
    best
}

/// Controller whose x action flips sign every `period` steps for the first `active` steps.
pub fn oscillating_source(period: u32, active: u32, alpha: f64) -> String {
    format!(
        r#"
fn config() {{ #{{ ema_alpha: {alpha:?}, targets: [#{{ name: "cube", hue: [[0.0, 20.0], [340.0, 360.0]], sat_min: 0.5, val_min: 0.3 }}] }} }}
fn reset() {{ this.phase = "wiggle"; this.n = 0; }}
fn get_action(f) {{
    this.n += 1;
    if this.n > {active} {{ this.phase = "still"; return [0.0, 0.0, 0.0, -1.0]; }}
    let s = if (this.n / {period}) % 2 == 0 {{ 1.0 }} else {{ -1.0 }};
    [s * 0.8, 0.0, 0.1, -1.0]
}}
"#
    )
}
