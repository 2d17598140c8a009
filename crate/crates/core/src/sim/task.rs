use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ColorClass, ObjectState, Shape, SimError, WorldState};
use crate::Vec3;

pub const TABLE_TOP_Z: f64 = 0.80;
/// Home position of the end effector above the table centre.
pub const HOME_HEIGHT: f64 = 0.25;
pub const CUBE_HALF: f64 = 0.02;
pub const CAN_RADIUS: f64 = 0.025;
pub const CAN_HALF_HEIGHT: f64 = 0.05;
pub const BIN_CENTER: [f64; 2] = [0.20, 0.05];
pub const BIN_HALF: [f64; 3] = [0.10, 0.10, 0.005];
/// Marker centre relative to the bin centre.
pub const MARKER_OFFSET: [f64; 2] = [0.05, 0.06];
pub const MARKER_HALF: [f64; 3] = [0.012, 0.009, 0.001];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Lift,
    PickPlace,
    Stack,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Lift, TaskId::PickPlace, TaskId::Stack];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Lift => "lift",
            TaskId::PickPlace => "pickplace",
            TaskId::Stack => "stack",
        }
    }

    /// Object the gripper must pick up.
    pub fn primary_object(&self) -> &'static str {
        match self {
            TaskId::Lift => "cube",
            TaskId::PickPlace => "can",
            TaskId::Stack => "cubeA",
        }
    }

    /// Object whose pose is frozen as the placement reference when the primary is grasped.
    pub fn support_object(&self) -> Option<&'static str> {
        match self {
            TaskId::Stack => Some("cubeB"),
            _ => None,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lift" => Ok(TaskId::Lift),
            "pickplace" | "pickplacecan" => Ok(TaskId::PickPlace),
            "stack" => Ok(TaskId::Stack),
            other => Err(SimError::Config(format!("unknown task id `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Randomization {
    pub object: String,
    pub x: [f64; 2],
    pub y: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub reach: f64,
    pub grasp: f64,
    pub progress: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            reach: 0.25,
            grasp: 0.25,
            progress: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub episode_step_budget: u32,
    pub placement_tolerance: f64,
    pub randomization: Vec<Randomization>,
    pub reward: RewardWeights,
}

impl TaskSpec {
    pub fn new(task: TaskId) -> Self {
        let (budget, randomization) = match task {
            TaskId::Lift => (
                500,
                vec![Randomization {
                    object: "cube".into(),
                    x: [-0.08, 0.08],
                    y: [-0.08, 0.08],
                }],
            ),
            TaskId::PickPlace => (
                1000,
                vec![Randomization {
                    object: "can".into(),
                    x: [-0.22, -0.12],
                    y: [-0.08, 0.06],
                }],
            ),
            TaskId::Stack => (
                700,
                vec![
                    Randomization {
                        object: "cubeA".into(),
                        x: [-0.12, -0.04],
                        y: [-0.12, -0.04],
                    },
                    Randomization {
                        object: "cubeB".into(),
                        x: [0.04, 0.12],
                        y: [-0.12, -0.04],
                    },
                ],
            ),
        };
        Self {
            task,
            episode_step_budget: budget,
            placement_tolerance: 0.02,
            randomization,
            reward: RewardWeights::default(),
        }
    }

    pub fn from_name(name: &str) -> Result<Self, SimError> {
        Ok(Self::new(name.parse()?))
    }

    pub fn with_budget(mut self, budget: u32) -> Self {
        self.episode_step_budget = budget;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.episode_step_budget < 1 {
            return Err(SimError::Config("step budget must be at least 1".into()));
        }
        if !(self.placement_tolerance > 0.0) {
            return Err(SimError::Config("placement tolerance must be positive".into()));
        }
        for r in &self.randomization {
            if r.x[0] > r.x[1] || r.y[0] > r.y[1] {
                return Err(SimError::Config(format!("empty randomization range for {}", r.object)));
            }
        }
        Ok(())
    }

    /// Objects at their nominal poses, before randomization and settling.
    fn scene(&self) -> Vec<ObjectState> {
        let cube = |id: &str, color, x, y| ObjectState {
            id: id.into(),
            shape: Shape::Box,
            half_extents: Vec3::repeat(CUBE_HALF),
            pose: Vec3::new(x, y, TABLE_TOP_Z + CUBE_HALF),
            color_class: color,
            fixture: false,
        };
        match self.task {
            TaskId::Lift => vec![cube("cube", ColorClass::Red, 0.0, 0.0)],
            TaskId::PickPlace => {
                let bin_z = TABLE_TOP_Z + BIN_HALF[2];
                vec![
                    ObjectState {
                        id: "can".into(),
                        shape: Shape::Cylinder,
                        half_extents: Vec3::new(CAN_RADIUS, CAN_RADIUS, CAN_HALF_HEIGHT),
                        pose: Vec3::new(-0.17, 0.0, TABLE_TOP_Z + CAN_HALF_HEIGHT),
                        color_class: ColorClass::Red,
                        fixture: false,
                    },
                    ObjectState {
                        id: "bin".into(),
                        shape: Shape::Box,
                        half_extents: Vec3::from(BIN_HALF),
                        pose: Vec3::new(BIN_CENTER[0], BIN_CENTER[1], bin_z),
                        color_class: ColorClass::Neutral,
                        fixture: true,
                    },
                    ObjectState {
                        id: "marker".into(),
                        shape: Shape::Box,
                        half_extents: Vec3::from(MARKER_HALF),
                        pose: Vec3::new(
                            BIN_CENTER[0] + MARKER_OFFSET[0],
                            BIN_CENTER[1] + MARKER_OFFSET[1],
                            bin_z + BIN_HALF[2] + MARKER_HALF[2],
                        ),
                        color_class: ColorClass::DecoyRedMarker,
                        fixture: true,
                    },
                ]
            }
            TaskId::Stack => vec![
                cube("cubeA", ColorClass::Red, -0.08, -0.08),
                cube("cubeB", ColorClass::Green, 0.08, -0.08),
            ],
        }
    }

    /// Fresh episode state. Identical `seed` gives a bit-identical state.
    pub fn reset(&self, seed: u64) -> Result<WorldState, SimError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut objects = self.scene();
        for r in &self.randomization {
            let obj = objects
                .iter_mut()
                .find(|o| o.id == r.object)
                .ok_or_else(|| SimError::Config(format!("randomized object `{}` not in scene", r.object)))?;
            obj.pose.x = rng.gen_range(r.x[0]..=r.x[1]);
            obj.pose.y = rng.gen_range(r.y[0]..=r.y[1]);
        }
        let mut state = WorldState {
            step: 0,
            eef_pos: Vec3::new(0.0, 0.0, TABLE_TOP_Z + HOME_HEIGHT),
            gripper_aperture: super::geometry::MAX_APERTURE,
            gripper_closing: false,
            objects,
            attached_object: None,
            attach_offset: Vec3::zeros(),
            table_top_z: TABLE_TOP_Z,
            support_anchor: None,
            initial_goal_distance: 0.0,
        };
        super::settle(&mut state);
        state.initial_goal_distance = super::reward::goal_distance(self, &state).unwrap_or(0.0);
        Ok(state)
    }
}
