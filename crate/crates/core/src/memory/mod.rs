//! Episodic memory: outcomes, traces, key frames, controller versions and diagnoses
//! persisted in a run directory.
//!
//! Layout:
//!
//! ```text
//! config.json
//! index.json
//! episodes/NNN/outcome.json
//! episodes/NNN/trace.jsonl
//! episodes/NNN/frames/SSS_<phase>.ppm
//! controllers/vNNN.ctl
//! diagnoses/dNNN.json
//! report.json
//! ```

mod analysis;
mod store;

use serde::{Deserialize, Serialize};

pub use analysis::{
    max_flips_in_window, min_distance, oscillation_flag, select_keyframes, FrameKind, KEYFRAME_CAP,
    KEYFRAME_INTERVAL, OSCILLATION_DEFINITION, OSCILLATION_FLIPS, OSCILLATION_WINDOW, SIGN_DEADBAND,
};
pub(crate) use store::write_atomic;
pub use store::{load_history, load_trace, History, RunStore, StoreError};

/// Result of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_index: u32,
    pub seed: u64,
    pub controller_version: u32,
    pub reward_total: f64,
    pub steps: u32,
    pub success: bool,
    pub phase_log: Vec<PhaseEntry>,
    pub final_phase: String,
    /// Closest end-effector to primary-object distance; absent when the object was never located.
    pub min_distance: Option<f64>,
    pub oscillation: bool,
    pub keyframe_refs: Vec<String>,
    /// Steps whose controller call failed and produced a safe-stop action.
    #[serde(default)]
    pub controller_errors: u32,
    /// Set when the episode ended early for a reason other than success.
    #[serde(default)]
    pub abort_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub step: u32,
    pub phase: String,
}

/// One control step as recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub phase: String,
    /// Action actually applied, after smoothing and clamping.
    pub action: [f64; 4],
    pub eef: [f64; 3],
    /// Primary object position, when the environment reports it.
    pub object: Option<[f64; 3]>,
    pub reward: f64,
    /// Support object distance from its anchored pose.
    #[serde(default)]
    pub support_displacement: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Rewriter output metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub tags: Vec<String>,
    pub reasoning: String,
    pub strategy: String,
    pub confidence: f64,
    /// Version installed from this call, or `None` when the proposal was rejected.
    pub produced_version: Option<u32>,
    /// Episode the diagnosis was written for.
    #[serde(default)]
    pub episode_index: Option<u32>,
    #[serde(default)]
    pub rejection: Option<String>,
}

impl DiagnosisRecord {
    pub const DEFAULT_CONFIDENCE: f64 = 0.5;

    pub fn unspecified() -> Self {
        Self {
            tags: vec!["unspecified".into()],
            reasoning: String::new(),
            strategy: String::new(),
            confidence: Self::DEFAULT_CONFIDENCE,
            produced_version: None,
            episode_index: None,
            rejection: None,
        }
    }

    /// Enforces the record invariants: confidence in [0, 1] and at least one tag.
    pub fn normalized(mut self) -> Self {
        self.confidence = if self.confidence.is_finite() {
            self.confidence.clamp(0.0, 1.0)
        } else {
            Self::DEFAULT_CONFIDENCE
        };
        self.tags.retain(|t| !t.trim().is_empty());
        if self.tags.is_empty() {
            self.tags.push("unspecified".into());
        }
        self
    }
}
