//! The fast loop: render, extract features, run the controller, step the world.

use std::collections::BTreeMap;

use super::env::{EnvError, Environment};
use crate::controller::{ControllerInstance, ControllerProgram, Sandbox};
use crate::memory::{
    min_distance, oscillation_flag, select_keyframes, EpisodeOutcome, PhaseEntry, StepRecord, KEYFRAME_CAP,
    KEYFRAME_INTERVAL,
};
use crate::raster::RgbdImage;
use crate::vision::{extract_features, Proprio};

/// Everything one episode produced, before it is stored.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub outcome: EpisodeOutcome,
    pub trace: Vec<StepRecord>,
    /// Selected key frames as (step, phase, image).
    pub frames: Vec<(u32, String, RgbdImage)>,
}

impl EpisodeRun {
    /// Largest support drift seen while the controller reported `phase`.
    pub fn max_support_displacement_in(&self, phase: &str) -> Option<f64> {
        self.trace
            .iter()
            .filter(|r| r.phase == phase)
            .filter_map(|r| r.support_displacement)
            .fold(None, |m, d| Some(m.map_or(d, |m: f64| m.max(d))))
    }
}

/// Keeps just enough candidate frames to honour the key-frame policy.
#[derive(Default)]
struct FrameBuffer {
    kept: BTreeMap<u32, (String, RgbdImage)>,
    transitions: Vec<u32>,
}

impl FrameBuffer {
    fn offer(&mut self, step: u32, phase: &str, transition: bool, image: &RgbdImage) {
        if transition {
            self.transitions.push(step);
            // Only the latest transitions can survive the cap.
            if self.transitions.len() > KEYFRAME_CAP {
                let old = self.transitions[self.transitions.len() - KEYFRAME_CAP - 1];
                if old % KEYFRAME_INTERVAL != 0 {
                    self.kept.remove(&old);
                }
            }
        }
        if transition || step % KEYFRAME_INTERVAL == 0 {
            self.kept.insert(step, (phase.to_owned(), image.clone()));
        }
    }

    fn finish(mut self, last: Option<(u32, String, RgbdImage)>, steps: u32) -> Vec<(u32, String, RgbdImage)> {
        if let Some((s, p, img)) = last {
            self.kept.entry(s).or_insert((p, img));
        }
        select_keyframes(&self.transitions, steps)
            .into_iter()
            .filter_map(|(s, _)| self.kept.remove(&s).map(|(p, img)| (s, p, img)))
            .collect()
    }
}

/// Runs one episode of `program` for at most `budget` steps.
pub fn run_episode(
    env: &mut dyn Environment,
    sandbox: &Sandbox,
    program: &ControllerProgram,
    table_z: f64,
    seed: u64,
    budget: u32,
    episode_index: u32,
) -> Result<EpisodeRun, EnvError> {
    let mut obs = env.reset(seed)?;
    let mut ctl = ControllerInstance::new(program, table_z);
    let mut outcome = EpisodeOutcome {
        episode_index,
        seed,
        controller_version: program.version,
        reward_total: 0.0,
        steps: 0,
        success: false,
        phase_log: Vec::new(),
        final_phase: String::new(),
        min_distance: None,
        oscillation: false,
        keyframe_refs: Vec::new(),
        controller_errors: 0,
        abort_reason: None,
    };
    let mut trace = Vec::new();
    let mut frames = FrameBuffer::default();
    let mut last = None;

    if let Err(e) = ctl.reset(sandbox) {
        outcome.abort_reason = Some(format!("controller reset failed: {e}"));
    } else {
        for t in 0..budget {
            let proprio = Proprio {
                step: t,
                eef_pos: obs.eef_pos,
                gripper_aperture: obs.gripper_aperture,
            };
            let features = extract_features(&obs.image, &env.camera(), proprio, &program.config.vision);
            let out = match ctl.step(sandbox, &features) {
                Ok(out) => out,
                Err(abort) => {
                    outcome.abort_reason = Some(format!(
                        "{} consecutive controller errors, last: {}",
                        abort.count, abort.last
                    ));
                    break;
                }
            };
            let transition = outcome.phase_log.last().is_some_and(|p| p.phase != out.phase);
            if outcome.phase_log.is_empty() || transition {
                outcome.phase_log.push(PhaseEntry {
                    step: t,
                    phase: out.phase.clone(),
                });
            }
            frames.offer(t, &out.phase, transition, &obs.image);
            let next = env.step(&out.action)?;
            trace.push(StepRecord {
                step: t,
                phase: out.phase.clone(),
                action: out.action.as_array(),
                eef: obs.eef_pos.into(),
                object: obs.object.map(Into::into),
                reward: next.reward,
                support_displacement: next.support_displacement,
                error: out.error,
            });
            outcome.reward_total += next.reward;
            outcome.steps = t + 1;
            outcome.success = next.success;
            last = Some((t, out.phase, std::mem::replace(&mut obs, next).image));
            if obs.done {
                break;
            }
        }
    }

    outcome.controller_errors = ctl.total_errors;
    outcome.final_phase = ctl.phase().to_owned();
    let actions: Vec<[f64; 4]> = trace.iter().map(|r| r.action).collect();
    outcome.oscillation = oscillation_flag(&actions);
    outcome.min_distance = min_distance(trace.iter().map(|r| (&r.eef, r.object.as_ref())));
    let frames = frames.finish(last, outcome.steps);
    Ok(EpisodeRun { outcome, trace, frames })
}
