//! Run summaries, rebuilt from the run directory so they can be regenerated at any time.

use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AgentBackend, RunConfig};
use crate::memory::{load_history, EpisodeOutcome, History, StoreError};
use crate::sim::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    BudgetExhausted,
    BackendFailure,
    /// The rewriter backend refused the configured credentials.
    CredentialRejected,
    /// The run stopped without recording how it ended.
    Incomplete,
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Converged => 0,
            RunStatus::BudgetExhausted => 2,
            RunStatus::BackendFailure => 3,
            RunStatus::CredentialRejected => 4,
            RunStatus::Incomplete => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::BudgetExhausted => "budget exhausted",
            RunStatus::BackendFailure => "backend failure",
            RunStatus::CredentialRejected => "credentials rejected",
            RunStatus::Incomplete => "incomplete",
        }
    }
}

/// Prefix of the rejection recorded for a response that had no controller source.
pub const PARSE_FAILURE_PREFIX: &str = "unparseable response";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRow {
    pub version: u32,
    pub key_change: String,
    pub tags: Vec<String>,
    pub episodes: u32,
    pub successes: u32,
    pub last_final_phase: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub episode: u32,
    pub seed: u64,
    pub final_phase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub version: u32,
    pub episodes: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub failures: Vec<EvalFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: TaskId,
    pub agent: AgentBackend,
    pub sim: String,
    pub seed: u64,
    pub status: RunStatus,
    pub abort_reason: Option<String>,
    /// Every rewriter invocation, including wasted and rejected ones.
    pub rewrite_calls: u32,
    /// Calls whose response held no controller source.
    pub wasted_calls: u32,
    /// Calls whose source failed validation.
    pub rejected_proposals: u32,
    pub training_episodes: u32,
    pub final_version: u32,
    pub baseline: VersionRow,
    /// One row per version a rewrite installed, in version order.
    pub rows: Vec<VersionRow>,
    /// Absent when the evaluation phase did not run.
    pub eval: Option<EvalSummary>,
}

fn version_row(version: u32, key_change: String, tags: Vec<String>, outcomes: &[EpisodeOutcome]) -> VersionRow {
    let mine: Vec<&EpisodeOutcome> = outcomes.iter().filter(|o| o.controller_version == version).collect();
    VersionRow {
        version,
        key_change,
        tags,
        episodes: mine.len() as u32,
        successes: mine.iter().filter(|o| o.success).count() as u32,
        last_final_phase: mine.last().map(|o| o.final_phase.clone()),
    }
}

pub fn eval_summary(outcomes: &[EpisodeOutcome]) -> Option<EvalSummary> {
    let first = outcomes.first()?;
    let successes = outcomes.iter().filter(|o| o.success).count() as u32;
    Some(EvalSummary {
        version: first.controller_version,
        episodes: outcomes.len() as u32,
        successes,
        success_rate: successes as f64 / outcomes.len() as f64,
        failures: outcomes
            .iter()
            .filter(|o| !o.success)
            .map(|o| EvalFailure {
                episode: o.episode_index,
                seed: o.seed,
                final_phase: o.final_phase.clone(),
            })
            .collect(),
    })
}

impl RunReport {
    /// Summarises a training history and an optional evaluation history.
    pub fn from_records(
        config: &RunConfig,
        status: RunStatus,
        abort_reason: Option<String>,
        history: &History,
        eval: Option<&History>,
    ) -> Self {
        let mut rows = Vec::new();
        let mut wasted = 0;
        let mut rejected = 0;
        for (_, d) in &history.diagnoses {
            match (d.produced_version, &d.rejection) {
                (Some(v), _) => rows.push(version_row(v, d.strategy.clone(), d.tags.clone(), &history.outcomes)),
                (None, Some(r)) if r.starts_with(PARSE_FAILURE_PREFIX) => wasted += 1,
                (None, _) => rejected += 1,
            }
        }
        rows.sort_by_key(|r| r.version);
        Self {
            task: config.task,
            agent: config.agent,
            sim: config.sim.label().to_owned(),
            seed: config.seed,
            status,
            abort_reason,
            rewrite_calls: history.diagnoses.len() as u32,
            wasted_calls: wasted,
            rejected_proposals: rejected,
            training_episodes: history.outcomes.len() as u32,
            final_version: history.controllers.last().map_or(0, |(v, _)| *v),
            baseline: version_row(0, "default controller".into(), Vec::new(), &history.outcomes),
            rows,
            eval: eval.and_then(|h| eval_summary(&h.outcomes)),
        }
    }

    /// Rebuilds a report for a run directory that has no `report.json`.
    pub fn reconstruct(root: &Path) -> Result<Self, ReportError> {
        let config = read_config(root)?;
        let history = load_history(root)?;
        if history.outcomes.is_empty() {
            return Err(ReportError::Empty(root.display().to_string()));
        }
        let eval = eval_history(root)?;
        Ok(Self::from_records(&config, RunStatus::Incomplete, None, &history, eval.as_ref()))
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report is plain JSON");
        v.push(b'\n');
        v
    }

    /// Plain-text table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "task {} | agent {} | sim {} | seed {} | status {}",
            self.task,
            self.agent,
            self.sim,
            self.seed,
            self.status.as_str()
        );
        if let Some(r) = &self.abort_reason {
            let _ = writeln!(s, "stopped: {r}");
        }
        let _ = writeln!(
            s,
            "rewrite calls {} ({} wasted, {} rejected) | training episodes {} | final version v{}\n",
            self.rewrite_calls, self.wasted_calls, self.rejected_proposals, self.training_episodes, self.final_version
        );
        let rows: Vec<[String; 4]> = std::iter::once(&self.baseline)
            .chain(&self.rows)
            .map(|r| {
                [
                    format!("v{}", r.version),
                    r.key_change.clone(),
                    format!("{}/{}", r.successes, r.episodes),
                    r.last_final_phase.clone().unwrap_or_else(|| "-".into()),
                ]
            })
            .collect();
        let header = ["version", "key change", "successes", "last final phase"];
        let mut width: [usize; 4] = header.map(str::len);
        for r in &rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |s: &mut String, cells: [&str; 4]| {
            let padded: Vec<String> = cells.iter().zip(width).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(s, "{}", padded.join(" | ").trim_end());
        };
        line(&mut s, header);
        let _ = writeln!(s, "{}", width.map(|w| "-".repeat(w)).join("-|-"));
        for r in &rows {
            line(&mut s, [&r[0], &r[1], &r[2], &r[3]]);
        }
        match &self.eval {
            Some(e) => {
                let _ = writeln!(
                    s,
                    "\neval: {}/{} ({:.1}%) with v{}",
                    e.successes,
                    e.episodes,
                    100.0 * e.success_rate,
                    e.version
                );
                for f in &e.failures {
                    let _ = writeln!(s, "  failed: episode {} seed {} in phase `{}`", f.episode, f.seed, f.final_phase);
                }
            }
            None => s.push_str("\neval: n/a\n"),
        }
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("{0} has no recorded episodes")]
    Empty(String),
}

pub fn read_config(root: &Path) -> Result<RunConfig, ReportError> {
    let path = root.join("config.json");
    let bytes = std::fs::read(&path).map_err(|e| ReportError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut config: RunConfig = serde_json::from_slice(&bytes).map_err(|e| ReportError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    config.out = root.to_owned();
    Ok(config)
}

/// History of the evaluation phase, if one was recorded.
pub fn eval_history(root: &Path) -> Result<Option<History>, StoreError> {
    let dir = root.join("eval");
    if !dir.join("index.json").exists() {
        return Ok(None);
    }
    let h = load_history(&dir)?;
    Ok((!h.outcomes.is_empty()).then_some(h))
}

/// Reads `report.json`, or rebuilds the report when it is missing.
pub fn load_report(root: &Path) -> Result<RunReport, ReportError> {
    let path = root.join("report.json");
    match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| ReportError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => RunReport::reconstruct(root),
        Err(e) => Err(ReportError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{DiagnosisRecord, PhaseEntry};

    fn outcome(i: u32, version: u32, success: bool) -> EpisodeOutcome {
        EpisodeOutcome {
            episode_index: i,
            seed: 42 + i as u64,
            controller_version: version,
            reward_total: 0.0,
            steps: 10,
            success,
            phase_log: vec![PhaseEntry {
                step: 0,
                phase: "reach".into(),
            }],
            final_phase: if success { "lift" } else { "reach" }.into(),
            min_distance: None,
            oscillation: false,
            keyframe_refs: Vec::new(),
            controller_errors: 0,
            abort_reason: None,
        }
    }

    fn diagnosis(v: Option<u32>, rejection: Option<&str>) -> DiagnosisRecord {
        DiagnosisRecord {
            strategy: format!("change {v:?}"),
            produced_version: v,
            rejection: rejection.map(Into::into),
            ..DiagnosisRecord::unspecified()
        }
    }

    fn history() -> History {
        History {
            outcomes: vec![
                outcome(0, 0, false),
                outcome(1, 0, false),
                outcome(2, 1, true),
                outcome(3, 1, true),
            ],
            diagnoses: vec![
                (0, diagnosis(None, Some("unparseable response: no fenced code block"))),
                (1, diagnosis(None, Some("parse stage: bad"))),
                (2, diagnosis(Some(1), None)),
            ],
            controllers: vec![(0, "a".into()), (1, "b".into())],
            warnings: Vec::new(),
        }
    }

    #[test]
    fn counts_and_rows() {
        let cfg = RunConfig::new(TaskId::Lift, "x");
        let r = RunReport::from_records(&cfg, RunStatus::Converged, None, &history(), None);
        assert_eq!(r.rewrite_calls, 3);
        assert_eq!(r.wasted_calls, 1);
        assert_eq!(r.rejected_proposals, 1);
        assert_eq!(r.rows.len(), 1);
        assert_eq!((r.rows[0].episodes, r.rows[0].successes), (2, 2));
        assert_eq!((r.baseline.episodes, r.baseline.successes), (2, 0));
        assert_eq!(r.final_version, 1);
        assert!(r.render().contains("eval: n/a"));
    }

    #[test]
    fn eval_rate() {
        let cfg = RunConfig::new(TaskId::Lift, "x");
        let eval = History {
            outcomes: vec![outcome(0, 1, true), outcome(1, 1, false)],
            ..History::default()
        };
        let r = RunReport::from_records(&cfg, RunStatus::Converged, None, &history(), Some(&eval));
        let e = r.eval.as_ref().unwrap();
        assert_eq!((e.successes, e.episodes, e.success_rate), (1, 2, 0.5));
        assert_eq!(e.failures.len(), 1);
        assert!(r.render().contains("eval: 1/2 (50.0%) with v1"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(RunStatus::Converged.exit_code(), 0);
        assert_eq!(RunStatus::BudgetExhausted.exit_code(), 2);
        assert_eq!(RunStatus::BackendFailure.exit_code(), 3);
        assert_eq!(RunStatus::CredentialRejected.exit_code(), 4);
    }
}
