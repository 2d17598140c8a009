//! Sandboxed controller scripts.
//!
//! A controller is a script defining `reset()` and `get_action(f)`, and
//! optionally `config()`. Scripts run in an engine with no I/O, clock or
//! randomness, under a per-call operation budget. The host owns action
//! smoothing and clamping, so the bounds hold whatever a script returns.
//!
//! The script API is documented in `docs/controller-api.md`.

mod sandbox;
pub mod templates;

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rhai::{CallFnOptions, Dynamic, Engine, Map, Scope, AST};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sandbox::{build_engine, MAX_OPERATIONS};
pub use templates::default_controller;

use crate::sim::Action;
use crate::vision::{BackprojectMode, CentroidMode, ColorSpec, FeatureFrame, TargetSpec, VisionConfig};
use crate::Vec3;

pub const DEFAULT_EMA_ALPHA: f64 = 0.4;
/// Consecutive failing `get_action` calls after which the episode is abandoned.
pub const MAX_CONSECUTIVE_EXCEPTIONS: u32 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Parse,
    Interface,
    Instantiate,
    DryRun,
    OutputShape,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Parse => "parse",
            Stage::Interface => "interface",
            Stage::Instantiate => "instantiate",
            Stage::DryRun => "dry-run",
            Stage::OutputShape => "output-shape",
        })
    }
}

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
#[error("{stage} stage: {message}")]
pub struct ValidationError {
    pub stage: Stage,
    pub message: String,
}

impl ValidationError {
    fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    MockRewriter,
    Llm,
}

/// Decoded `config()` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub ema_alpha: f64,
    pub vision: VisionConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            ema_alpha: DEFAULT_EMA_ALPHA,
            vision: VisionConfig {
                targets: Vec::new(),
                centroid: CentroidMode::Largest,
                backproject: BackprojectMode::default(),
            },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    name: String,
    hue: Vec<[f64; 2]>,
    #[serde(default)]
    sat_min: f64,
    #[serde(default = "one")]
    sat_max: f64,
    #[serde(default)]
    val_min: f64,
    #[serde(default = "one")]
    val_max: f64,
    #[serde(default)]
    depth_bias: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    ema_alpha: Option<f64>,
    #[serde(default)]
    targets: Vec<RawTarget>,
    #[serde(default)]
    centroid: CentroidMode,
    #[serde(default)]
    flip_y: bool,
    #[serde(default)]
    cv_extrinsic: bool,
}

impl ControllerConfig {
    fn from_json(v: serde_json::Value) -> Result<Self, String> {
        let raw: RawConfig = serde_json::from_value(v).map_err(|e| format!("bad config(): {e}"))?;
        let ema_alpha = raw.ema_alpha.unwrap_or(DEFAULT_EMA_ALPHA);
        if !(0.0..=1.0).contains(&ema_alpha) {
            return Err(format!("ema_alpha {ema_alpha} is outside [0, 1]"));
        }
        let mut targets = Vec::with_capacity(raw.targets.len());
        for t in raw.targets {
            let color = ColorSpec {
                hue: t.hue,
                sat_min: t.sat_min,
                sat_max: t.sat_max,
                val_min: t.val_min,
                val_max: t.val_max,
            };
            color.validate().map_err(|e| format!("target `{}`: {e}", t.name))?;
            if !t.depth_bias.is_finite() {
                return Err(format!("target `{}`: depth_bias must be finite", t.name));
            }
            if RESERVED_KEYS.contains(&t.name.as_str()) || targets.iter().any(|x: &TargetSpec| x.name == t.name) {
                return Err(format!("target name `{}` is reserved or duplicated", t.name));
            }
            targets.push(TargetSpec {
                name: t.name,
                color,
                depth_bias: t.depth_bias,
            });
        }
        Ok(Self {
            ema_alpha,
            vision: VisionConfig {
                targets,
                centroid: raw.centroid,
                backproject: BackprojectMode {
                    flip_y: raw.flip_y,
                    cv_extrinsic: raw.cv_extrinsic,
                },
            },
        })
    }
}

const RESERVED_KEYS: [&str; 4] = ["step", "eef", "aperture", "table_z"];

/// A script that passed every validation stage.
#[derive(Debug, Clone)]
pub struct ControllerProgram {
    pub version: u32,
    pub source: String,
    pub provenance: Provenance,
    pub config: ControllerConfig,
    ast: AST,
}

impl ControllerProgram {
    pub fn ema_alpha(&self) -> f64 {
        self.config.ema_alpha
    }
}

/// Engine shared by validation and execution.
pub struct Sandbox {
    engine: Engine,
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Sandbox")
    }
}

impl Sandbox {
    pub fn new() -> Self {
        Self { engine: build_engine() }
    }

    /// Runs the full pipeline: parse, interface, instantiate, dry-run, output shape.
    pub fn validate(
        &self,
        source: &[u8],
        canned: &FeatureFrame,
        version: u32,
        provenance: Provenance,
    ) -> Result<ControllerProgram, ValidationError> {
        match catch_unwind(AssertUnwindSafe(|| self.validate_inner(source, canned, version, provenance))) {
            Ok(r) => r,
            Err(_) => Err(ValidationError::new(Stage::Parse, "script engine fault")),
        }
    }

    fn validate_inner(
        &self,
        source: &[u8],
        canned: &FeatureFrame,
        version: u32,
        provenance: Provenance,
    ) -> Result<ControllerProgram, ValidationError> {
        let text = std::str::from_utf8(source).map_err(|e| ValidationError::new(Stage::Parse, format!("source is not UTF-8: {e}")))?;
        let ast = self
            .engine
            .compile(text)
            .map_err(|e| ValidationError::new(Stage::Parse, e.to_string()))?;

        let has = |name: &str, arity: usize| ast.iter_functions().any(|f| f.name == name && f.params.len() == arity);
        for (name, arity) in [("reset", 0), ("get_action", 1)] {
            if !has(name, arity) {
                return Err(ValidationError::new(
                    Stage::Interface,
                    format!("missing fn {name}({})", if arity == 1 { "f" } else { "" }),
                ));
            }
        }
        let config = if has("config", 0) {
            let mut unit = Dynamic::UNIT;
            let d = self
                .call(&ast, &mut unit, "config", ())
                .map_err(|e| ValidationError::new(Stage::Instantiate, e))?;
            let json = sandbox::dynamic_to_json(&d).map_err(|e| ValidationError::new(Stage::Instantiate, e))?;
            ControllerConfig::from_json(json).map_err(|e| ValidationError::new(Stage::Instantiate, e))?
        } else {
            ControllerConfig::default()
        };

        let program = ControllerProgram {
            version,
            source: text.to_owned(),
            provenance,
            config,
            ast,
        };
        let mut instance = ControllerInstance::new(&program, crate::sim::TABLE_TOP_Z);
        instance
            .reset(self)
            .map_err(|e| ValidationError::new(Stage::Instantiate, e))?;
        let raw = instance
            .call_get_action(self, canned)
            .map_err(|e| ValidationError::new(Stage::DryRun, e))?;
        sandbox::action_from_dynamic(&raw).map_err(|e| ValidationError::new(Stage::OutputShape, e))?;
        Ok(program)
    }

    fn call(&self, ast: &AST, this: &mut Dynamic, name: &str, args: impl rhai::FuncArgs) -> Result<Dynamic, String> {
        let mut scope = Scope::new();
        let opts = CallFnOptions::new().eval_ast(false).rewind_scope(true).bind_this_ptr(this);
        self.engine
            .call_fn_with_options::<Dynamic>(opts, &mut scope, ast, name, args)
            .map_err(|e| e.to_string())
    }
}

/// Exponential moving average over the 4-dim action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub alpha: f64,
    pub prev_action: [f64; 4],
}

impl EmaState {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha: alpha.clamp(0.0, 1.0),
            prev_action: [0.0; 4],
        }
    }

    /// `alpha * raw + (1 - alpha) * prev`, componentwise.
    pub fn smooth(&self, raw: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| self.alpha * raw[i] + (1.0 - self.alpha) * self.prev_action[i])
    }
}

/// Smooths `raw`, clamps to the action bounds and remembers the result as the next `prev`.
pub fn smooth_and_clamp(raw: [f64; 4], ema: &mut EmaState) -> Action {
    let s = ema.smooth(raw);
    let action = Action::new(s[0], s[1], s[2], s[3]).clamped();
    ema.prev_action = action.as_array();
    action
}

/// Result of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub action: Action,
    pub phase: String,
    /// Script error that forced a zero action this step.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("controller raised {count} consecutive exceptions; last: {last}")]
pub struct ControllerAbort {
    pub count: u32,
    pub last: String,
}

/// One episode's run of a program: script state, smoothing state and error counters.
#[derive(Debug)]
pub struct ControllerInstance<'p> {
    program: &'p ControllerProgram,
    this: Dynamic,
    table_z: f64,
    pub ema: EmaState,
    pub consecutive_errors: u32,
    pub total_errors: u32,
    phase: String,
}

impl<'p> ControllerInstance<'p> {
    pub fn new(program: &'p ControllerProgram, table_z: f64) -> Self {
        Self {
            program,
            this: Dynamic::from_map(Map::new()),
            table_z,
            ema: EmaState::new(program.config.ema_alpha),
            consecutive_errors: 0,
            total_errors: 0,
            phase: "init".into(),
        }
    }

    pub fn program(&self) -> &ControllerProgram {
        self.program
    }

    pub fn phase(&self) -> &str {
        &self.phase
    }

    pub fn reset(&mut self, sandbox: &Sandbox) -> Result<(), String> {
        self.this = Dynamic::from_map(Map::new());
        self.ema = EmaState::new(self.program.config.ema_alpha);
        self.consecutive_errors = 0;
        self.total_errors = 0;
        let mut this = std::mem::take(&mut self.this);
        let r = guarded(|| sandbox.call(&self.program.ast, &mut this, "reset", ()));
        self.this = this;
        self.refresh_phase();
        r.map(|_| ())
    }

    fn call_get_action(&mut self, sandbox: &Sandbox, features: &FeatureFrame) -> Result<Dynamic, String> {
        let f = features_to_dynamic(features, &self.program.config.vision, self.table_z);
        let mut this = std::mem::take(&mut self.this);
        let r = guarded(|| sandbox.call(&self.program.ast, &mut this, "get_action", (f,)));
        self.this = this;
        self.refresh_phase();
        r
    }

    fn refresh_phase(&mut self) {
        if let Some(map) = self.this.read_lock::<Map>() {
            if let Some(p) = map.get("phase") {
                if let Ok(s) = p.clone().into_string() {
                    self.phase = s;
                }
            }
        }
    }

    /// Calls `get_action`, then smooths and clamps. Script failures yield a zero action.
    pub fn step(&mut self, sandbox: &Sandbox, features: &FeatureFrame) -> Result<StepOutput, ControllerAbort> {
        let raw = self
            .call_get_action(sandbox, features)
            .and_then(|d| sandbox::action_from_dynamic(&d));
        match raw {
            Ok(raw) => {
                self.consecutive_errors = 0;
                Ok(StepOutput {
                    action: smooth_and_clamp(raw, &mut self.ema),
                    phase: self.phase.clone(),
                    error: None,
                })
            }
            Err(e) => {
                self.consecutive_errors += 1;
                self.total_errors += 1;
                if self.consecutive_errors >= MAX_CONSECUTIVE_EXCEPTIONS {
                    return Err(ControllerAbort {
                        count: self.consecutive_errors,
                        last: e,
                    });
                }
                self.ema.prev_action = [0.0; 4];
                Ok(StepOutput {
                    action: Action::zero(),
                    phase: self.phase.clone(),
                    error: Some(e),
                })
            }
        }
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("script engine fault".into()))
}

/// The map a script sees as `f`: proprioception plus one entry per configured target.
pub fn features_to_dynamic(frame: &FeatureFrame, vision: &VisionConfig, table_z: f64) -> Dynamic {
    let mut m = Map::new();
    m.insert("step".into(), Dynamic::from_int(frame.step as rhai::INT));
    m.insert("eef".into(), sandbox::vec3_array(&frame.eef_pos));
    m.insert("aperture".into(), Dynamic::from_float(frame.gripper_aperture));
    m.insert("table_z".into(), Dynamic::from_float(table_z));
    for t in &vision.targets {
        let mut e = Map::new();
        let feat = frame.targets.get(&t.name);
        let detected = feat.is_some_and(|x| x.detected);
        e.insert("detected".into(), Dynamic::from_bool(detected));
        e.insert(
            "pos".into(),
            feat.and_then(|x| x.object_pos).map_or(Dynamic::UNIT, |p| sandbox::vec3_array(&p)),
        );
        e.insert(
            "centroid".into(),
            feat.and_then(|x| x.pixel_centroid).map_or(Dynamic::UNIT, sandbox::pair_array),
        );
        e.insert("area".into(), Dynamic::from_int(feat.map_or(0, |x| x.blob_area) as rhai::INT));
        m.insert(t.name.as_str().into(), Dynamic::from_map(e));
    }
    Dynamic::from_map(m)
}

/// A plausible mid-episode frame used for dry runs: every listed target detected in front of the gripper.
pub fn canned_features(target_names: &[&str]) -> FeatureFrame {
    use crate::vision::TargetFeature;
    let table = crate::sim::TABLE_TOP_Z;
    let targets = target_names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            (
                n.to_string(),
                TargetFeature {
                    detected: true,
                    object_pos: Some(Vec3::new(-0.05 + 0.1 * i as f64, -0.02, table + 0.02)),
                    pixel_centroid: Some((120.0 + 10.0 * i as f64, 130.0)),
                    blob_area: 200,
                },
            )
        })
        .collect();
    FeatureFrame {
        step: 10,
        eef_pos: Vec3::new(0.0, 0.0, table + 0.2),
        gripper_aperture: crate::sim::MAX_APERTURE,
        targets,
    }
}

/// Holds the active program and installs replacements only when they validate.
#[derive(Debug)]
pub struct ControllerSlot {
    active: ControllerProgram,
    canned: FeatureFrame,
}

impl ControllerSlot {
    pub fn new(initial: ControllerProgram, canned: FeatureFrame) -> Self {
        Self { active: initial, canned }
    }

    pub fn active(&self) -> &ControllerProgram {
        &self.active
    }

    /// Validates `source` as the next version; on failure the active program is untouched.
    pub fn propose(
        &mut self,
        sandbox: &Sandbox,
        source: &[u8],
        provenance: Provenance,
    ) -> Result<&ControllerProgram, ValidationError> {
        let program = sandbox.validate(source, &self.canned, self.active.version + 1, provenance)?;
        self.active = program;
        Ok(&self.active)
    }
}
