//! Environments the episode runner can drive: the in-process simulator or an
//! external one behind the bridge protocol.

use thiserror::Error;

use crate::raster::{Convention, RgbdImage};
use crate::render::{render, CameraModel};
use crate::sim::{Action, SimError, Simulator, TaskSpec, WorldState};
use crate::Vec3;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("simulator configuration: {0}")]
    Config(String),
    #[error("environment backend: {0}")]
    Backend(String),
}

impl From<SimError> for EnvError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => EnvError::Config(m),
            SimError::Step(m) => EnvError::Backend(m),
        }
    }
}

/// What the harness sees after a reset or a step.
#[derive(Debug, Clone)]
pub struct Observation {
    pub image: RgbdImage,
    pub eef_pos: Vec3,
    pub gripper_aperture: f64,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Primary object centre, when the backend exposes ground truth.
    pub object: Option<Vec3>,
    /// Support object drift from its anchored pose, when known.
    pub support_displacement: Option<f64>,
}

pub trait Environment {
    fn reset(&mut self, seed: u64) -> Result<Observation, EnvError>;
    fn step(&mut self, action: &Action) -> Result<Observation, EnvError>;
    /// Camera matching the most recent observation.
    fn camera(&self) -> CameraModel;
}

/// The in-process kinematic simulator rendered through the default camera.
#[derive(Debug, Clone)]
pub struct BuiltinEnv {
    sim: Simulator,
    cam: CameraModel,
    state: Option<WorldState>,
}

impl BuiltinEnv {
    pub fn new(task: TaskSpec) -> Result<Self, EnvError> {
        Ok(Self {
            sim: Simulator::new(task)?,
            cam: CameraModel::agentview(Convention::GlBottomUp),
            state: None,
        })
    }

    pub fn with_camera(mut self, cam: CameraModel) -> Self {
        self.cam = cam;
        self
    }

    pub fn state(&self) -> Option<&WorldState> {
        self.state.as_ref()
    }

    fn observe(&self, state: &WorldState, reward: f64, done: bool, success: bool, support: Option<f64>) -> Observation {
        let primary = self.sim.task.task.primary_object();
        Observation {
            image: render(state, &self.cam),
            eef_pos: state.eef_pos,
            gripper_aperture: state.gripper_aperture,
            reward,
            done,
            success,
            object: state.object(primary).map(|o| o.pose),
            support_displacement: support,
        }
    }
}

impl Environment for BuiltinEnv {
    fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let state = self.sim.reset(seed)?;
        let reward = self.sim.shaped_reward(&state);
        let success = self.sim.check_success(&state);
        let obs = self.observe(&state, reward, success, success, None);
        self.state = Some(state);
        Ok(obs)
    }

    fn step(&mut self, action: &Action) -> Result<Observation, EnvError> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| EnvError::Backend("step before reset".into()))?;
        let tr = self.sim.step(state, action)?;
        let obs = self.observe(&tr.state, tr.reward, tr.done, tr.info.success, tr.info.support_displacement);
        self.state = Some(tr.state);
        Ok(obs)
    }

    fn camera(&self) -> CameraModel {
        self.cam.clone()
    }
}
