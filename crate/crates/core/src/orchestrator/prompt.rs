//! Reflection prompt assembly. Output depends only on the inputs, so equal
//! histories give byte-identical prompts.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::config::{DIGEST_EPISODES, MAX_PROMPT_IMAGES, PRIOR_FINAL_FRAMES};
use crate::memory::{DiagnosisRecord, EpisodeOutcome, KEYFRAME_CAP, OSCILLATION_DEFINITION};
use crate::sim::TaskId;

pub const CONTROLLER_API: &str = include_str!("../../../../docs/controller-api.md");

pub const REWRITE_INSTRUCTION: &str = "Change as little as the diagnosis requires. Keep the parts of the \
current controller that already work: its phase structure, thresholds and calibration were learned \
from earlier episodes. Do not start over from a blank controller.";

/// The questions every reflection must answer.
pub const DIAGNOSTIC_QUESTIONS: [&str; 3] = [
    "Which single failure most limited this episode, and in which phase did it first appear?",
    "What in the key frames and the recorded numbers supports that reading, and what argues against it?",
    "What is the smallest change to the controller that would remove that failure, and what else could it disturb?",
];

pub const OUTPUT_CONTRACT: &str = "Reply with exactly two fenced blocks.\n\
First, a block tagged `diagnosis` holding one JSON object with the fields \
`tags` (list of short snake_case strings), `reasoning` (string), `strategy` (string, one line) \
and `confidence` (number between 0 and 1).\n\
Second, a block tagged `controller` holding the complete replacement script. \
It replaces the current script as a whole, so include every function.\n\
Example shape:\n\
```diagnosis\n{\"tags\": [\"vision_bias\"], \"reasoning\": \"...\", \"strategy\": \"...\", \"confidence\": 0.6}\n```\n\
```controller\nfn reset() { ... }\nfn get_action(f) { ... }\n```";

pub fn task_description(task: TaskId) -> &'static str {
    match task {
        TaskId::Lift => "Lift: grasp the red cube on the table and raise it at least 4 cm above the table.",
        TaskId::PickPlace => {
            "PickPlaceCan: grasp the red can and release it so it rests inside the grey bin. \
             A small red marker lies on the bin floor."
        }
        TaskId::Stack => {
            "Stack: grasp the red cube (cubeA) and release it resting on top of the green cube (cubeB), \
             centred within 2 cm. cubeB must stay within 1 cm of where it stood when cubeA was grasped."
        }
    }
}

/// An attached frame, by run-relative path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub preamble: String,
    pub digest: String,
    pub images: Vec<ImageRef>,
    pub source: String,
    pub contract: String,
}

impl PromptBundle {
    /// Everything except the preamble, in the order it is sent.
    pub fn user_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.digest);
        if !self.images.is_empty() {
            s.push_str("\n## Attached frames\n\n");
            for (i, img) in self.images.iter().enumerate() {
                let _ = writeln!(s, "{}. {}", i + 1, img.caption);
            }
        }
        let _ = write!(s, "\n## Current controller\n\n```controller\n{}", self.source);
        if !self.source.ends_with('\n') {
            s.push('\n');
        }
        s.push_str("```\n\n## Reply format\n\n");
        s.push_str(&self.contract);
        s.push('\n');
        s
    }

    pub fn full_text(&self) -> String {
        format!("{}\n{}", self.preamble, self.user_text())
    }
}

fn preamble(task: TaskId) -> String {
    let mut s = String::new();
    s.push_str("You improve the controller of a simulated robot arm between episodes.\n\n");
    let _ = writeln!(s, "## Task\n\n{}\n", task_description(task));
    let _ = writeln!(s, "## How to rewrite\n\n{REWRITE_INSTRUCTION}\n");
    s.push_str("## Questions to answer before writing code\n\n");
    for (i, q) in DIAGNOSTIC_QUESTIONS.iter().enumerate() {
        let _ = writeln!(s, "{}. {q}", i + 1);
    }
    let _ = writeln!(s, "\n## Oscillation flag\n\n{OSCILLATION_DEFINITION}\n");
    s.push_str(CONTROLLER_API);
    s
}

fn digest_line(s: &mut String, o: &EpisodeOutcome) {
    let _ = writeln!(
        s,
        "- episode {} | seed {} | controller v{} | {} | steps {} | final phase `{}` | reward {:.3} | min distance {} | oscillation {} | controller errors {}",
        o.episode_index,
        o.seed,
        o.controller_version,
        if o.success { "SUCCESS" } else { "FAILURE" },
        o.steps,
        o.final_phase,
        o.reward_total,
        o.min_distance.map_or_else(|| "n/a".to_owned(), |d| format!("{d:.4} m")),
        if o.oscillation { "yes" } else { "no" },
        o.controller_errors,
    );
    let phases: Vec<String> = o.phase_log.iter().map(|p| format!("{}@{}", p.phase, p.step)).collect();
    let _ = writeln!(s, "  phases: {}", phases.join(" -> "));
    if let Some(r) = &o.abort_reason {
        let _ = writeln!(s, "  aborted: {r}");
    }
}

fn frame_caption(path: &str, episode: u32) -> String {
    let name = path.rsplit('/').next().unwrap_or(path).trim_end_matches(".ppm");
    let (step, phase) = name.split_once('_').unwrap_or((name, ""));
    let step = step.parse::<u32>().map_or_else(|_| step.to_owned(), |n| n.to_string());
    format!("episode {episode}, step {step}, phase `{phase}`")
}

/// Builds the prompt for the rewrite that follows the last outcome in `history`.
pub fn build_prompt(
    history: &[EpisodeOutcome],
    diagnoses: &[DiagnosisRecord],
    source: &str,
    task: TaskId,
) -> PromptBundle {
    let mut digest = String::from("## Recent episodes (oldest first)\n\n");
    let start = history.len().saturating_sub(DIGEST_EPISODES);
    if history.is_empty() {
        digest.push_str("No episodes recorded.\n");
    }
    for o in &history[start..] {
        digest_line(&mut digest, o);
    }
    if !diagnoses.is_empty() {
        digest.push_str("\n## Earlier diagnoses (oldest first)\n\n");
        for d in &diagnoses[diagnoses.len().saturating_sub(3)..] {
            let outcome = match (d.produced_version, &d.rejection) {
                (Some(v), _) => format!("installed as v{v}"),
                (None, Some(r)) => format!("rejected: {r}"),
                (None, None) => "not installed".into(),
            };
            let _ = writeln!(
                digest,
                "- tags [{}], confidence {:.2}: {} ({outcome})",
                d.tags.join(", "),
                d.confidence,
                d.strategy
            );
        }
    }

    let mut images = Vec::new();
    if let Some(last) = history.last() {
        let priors = history[..history.len() - 1].iter().rev().take(PRIOR_FINAL_FRAMES).rev();
        for o in priors {
            if let Some(p) = o.keyframe_refs.last() {
                images.push(ImageRef {
                    path: p.clone(),
                    caption: format!("final frame of {}", frame_caption(p, o.episode_index)),
                });
            }
        }
        for p in last.keyframe_refs.iter().take(KEYFRAME_CAP) {
            images.push(ImageRef {
                path: p.clone(),
                caption: frame_caption(p, last.episode_index),
            });
        }
    }
    images.truncate(MAX_PROMPT_IMAGES);

    PromptBundle {
        preamble: preamble(task),
        digest,
        images,
        source: source.to_owned(),
        contract: OUTPUT_CONTRACT.to_owned(),
    }
}
