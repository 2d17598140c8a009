//! Deterministic kinematic tabletop simulator.
//!
//! The world is a value: [`Simulator::step`] is a pure transition from one
//! [`WorldState`] to the next. There is no rigid-body dynamics; grasping,
//! finger contact and resting are closed-form rules so every episode is
//! reproducible bit for bit.

pub mod geometry;
mod reward;
mod task;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{finger_slabs, gripper_body, Aabb, APERTURE_RATE, MAX_APERTURE};
pub use reward::{check_success, goal_distance, shaped_reward};
pub use task::{
    RewardWeights, Randomization, TaskId, TaskSpec, BIN_CENTER, BIN_HALF, CAN_HALF_HEIGHT, CAN_RADIUS,
    CUBE_HALF, HOME_HEIGHT, MARKER_HALF, MARKER_OFFSET, TABLE_TOP_Z,
};

use crate::Vec3;

/// Metres of end-effector travel per unit of action.
pub const DELTA_SCALE: f64 = 0.01;
pub const WORKSPACE_HALF_XY: f64 = 0.40;
pub const WORKSPACE_HEIGHT: f64 = 0.50;
pub const ACTION_DELTA_LIMIT: f64 = 2.0;
pub const ACTION_GRIP_LIMIT: f64 = 1.0;

/// Lateral slack of the grasp band beyond the object's half extent.
pub const GRASP_XY_MARGIN: f64 = 0.005;
/// The end effector may sit this far below the object's top face and still grasp.
pub const GRASP_BELOW_TOP: f64 = 0.005;
/// ... or this far above it.
pub const GRASP_ABOVE_TOP: f64 = 0.015;
/// Commanded descent per step during closure above which the grasp fails.
pub const PRESS_THRESHOLD: f64 = 0.001;
/// Lateral shift applied to an object knocked out by a pressing grasp.
pub const DESTABILIZE_SHIFT: f64 = 0.02;

const SUPPORT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("step rejected: {0}")]
    Step(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    /// `half_extents` = (radius, radius, half height).
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorClass {
    Red,
    Green,
    DecoyRedMarker,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: String,
    pub shape: Shape,
    pub half_extents: Vec3,
    /// Centre of the object.
    pub pose: Vec3,
    pub color_class: ColorClass,
    /// Fixtures (bin, marker) are never pushed or grasped.
    pub fixture: bool,
}

impl ObjectState {
    pub fn aabb(&self) -> Aabb {
        Aabb::from_center(self.pose, self.half_extents)
    }

    pub fn top(&self) -> f64 {
        self.pose.z + self.half_extents.z
    }

    pub fn bottom(&self) -> f64 {
        self.pose.z - self.half_extents.z
    }

    /// Width seen by the fingers closing along y.
    pub fn grip_width(&self) -> f64 {
        2.0 * self.half_extents.y
    }

    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.pose.x;
        let dy = y - self.pose.y;
        match self.shape {
            Shape::Box => dx.abs() <= self.half_extents.x && dy.abs() <= self.half_extents.y,
            Shape::Cylinder => dx * dx + dy * dy <= self.half_extents.x * self.half_extents.x,
        }
    }

    fn in_grasp_band(&self, eef: &Vec3) -> bool {
        let dx = eef.x - self.pose.x;
        let dy = eef.y - self.pose.y;
        let lateral = match self.shape {
            Shape::Box => {
                dx.abs() <= self.half_extents.x + GRASP_XY_MARGIN
                    && dy.abs() <= self.half_extents.y + GRASP_XY_MARGIN
            }
            Shape::Cylinder => (dx * dx + dy * dy).sqrt() <= self.half_extents.x + GRASP_XY_MARGIN,
        };
        let top = self.top();
        lateral && eef.z >= top - GRASP_BELOW_TOP && eef.z <= top + GRASP_ABOVE_TOP
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub step: u32,
    pub eef_pos: Vec3,
    pub gripper_aperture: f64,
    pub gripper_closing: bool,
    pub objects: Vec<ObjectState>,
    /// Index into `objects`.
    pub attached_object: Option<usize>,
    /// Object centre minus end effector, fixed while attached.
    pub attach_offset: Vec3,
    pub table_top_z: f64,
    /// Pose of the task's support object when the primary object was last grasped.
    pub support_anchor: Option<Vec3>,
    /// Primary-object-to-goal distance at reset, used to normalise the reward.
    pub initial_goal_distance: f64,
}

impl WorldState {
    pub fn object(&self, id: &str) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn attached(&self) -> Option<&ObjectState> {
        self.attached_object.map(|i| &self.objects[i])
    }

    pub fn is_attached(&self, id: &str) -> bool {
        self.attached().is_some_and(|o| o.id == id)
    }

    pub fn workspace_contains(&self, p: &Vec3) -> bool {
        p.x.abs() <= WORKSPACE_HALF_XY + SUPPORT_EPS
            && p.y.abs() <= WORKSPACE_HALF_XY + SUPPORT_EPS
            && p.z >= self.table_top_z - SUPPORT_EPS
            && p.z <= self.table_top_z + WORKSPACE_HEIGHT + SUPPORT_EPS
    }

    fn clip_to_workspace(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(-WORKSPACE_HALF_XY, WORKSPACE_HALF_XY),
            p.y.clamp(-WORKSPACE_HALF_XY, WORKSPACE_HALF_XY),
            p.z.clamp(self.table_top_z, self.table_top_z + WORKSPACE_HEIGHT),
        )
    }

    /// Height an object centred at `(x, y, z)` would come to rest on, ignoring `skip`.
    fn support_height(&self, skip: usize, x: f64, y: f64, z: f64) -> f64 {
        self.objects
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != skip && Some(*j) != self.attached_object)
            .filter(|(_, o)| o.footprint_contains(x, y) && o.top() <= z + SUPPORT_EPS)
            .map(|(_, o)| o.top())
            .fold(self.table_top_z, f64::max)
    }
}

/// Drop every free object onto the highest support beneath its centre.
pub(crate) fn settle(state: &mut WorldState) {
    let mut order: Vec<usize> = (0..state.objects.len())
        .filter(|&i| Some(i) != state.attached_object && !state.objects[i].fixture)
        .collect();
    order.sort_by(|&a, &b| {
        state.objects[a]
            .bottom()
            .total_cmp(&state.objects[b].bottom())
            .then(a.cmp(&b))
    });
    for i in order {
        let p = state.objects[i].pose;
        let rest = state.support_height(i, p.x, p.y, p.z);
        state.objects[i].pose.z = rest + state.objects[i].half_extents.z;
    }
}

/// Cartesian delta (unitless, scaled by [`DELTA_SCALE`]) plus gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub delta: [f64; 3],
    /// `>= 0` closes, `< 0` opens.
    pub grip: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, dz: f64, grip: f64) -> Self {
        Self {
            delta: [dx, dy, dz],
            grip,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().all(|v| v.is_finite()) && self.grip.is_finite()
    }

    pub fn clamped(&self) -> Self {
        Self {
            delta: self.delta.map(|v| v.clamp(-ACTION_DELTA_LIMIT, ACTION_DELTA_LIMIT)),
            grip: self.grip.clamp(-ACTION_GRIP_LIMIT, ACTION_GRIP_LIMIT),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.delta[0], self.delta[1], self.delta[2], self.grip]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraspEvent {
    Attached { object: String },
    Destabilized { object: String },
    Released { object: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub object: String,
    pub displacement: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    pub grasp: Option<GraspEvent>,
    pub contacts: Vec<Contact>,
    /// Distance of the support object from its anchored pose, once anchored.
    pub support_displacement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: WorldState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Task-bound simulator. Holds no mutable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulator {
    pub task: TaskSpec,
}

impl Simulator {
    pub fn new(task: TaskSpec) -> Result<Self, SimError> {
        task.validate()?;
        Ok(Self { task })
    }

    pub fn reset(&self, seed: u64) -> Result<WorldState, SimError> {
        self.task.reset(seed)
    }

    pub fn check_success(&self, state: &WorldState) -> bool {
        check_success(&self.task, state)
    }

    pub fn shaped_reward(&self, state: &WorldState) -> f64 {
        shaped_reward(&self.task, state)
    }

    pub fn step(&self, state: &WorldState, action: &Action) -> Result<Transition, SimError> {
        if !action.is_finite() {
            return Err(SimError::Step(format!("non-finite action {:?}", action.as_array())));
        }
        let action = action.clamped();
        let mut next = state.clone();
        let mut info = StepInfo::default();

        let closing = action.grip >= 0.0;
        if !closing {
            if let Some(i) = next.attached_object.take() {
                info.grasp = Some(GraspEvent::Released {
                    object: next.objects[i].id.clone(),
                });
            }
        }
        next.gripper_closing = closing;

        let commanded = Vec3::from(action.delta) * DELTA_SCALE;
        next.eef_pos = next.clip_to_workspace(state.eef_pos + commanded);
        if let Some(i) = next.attached_object {
            next.objects[i].pose = next.eef_pos + next.attach_offset;
        }

        let aperture_before = state.gripper_aperture;
        if closing {
            let floor = next.attached().map_or(0.0, |o| o.grip_width());
            next.gripper_aperture = (aperture_before - APERTURE_RATE).max(floor);
        } else {
            next.gripper_aperture = (aperture_before + APERTURE_RATE).min(MAX_APERTURE);
        }

        if closing && next.attached_object.is_none() && aperture_before > 0.0 {
            self.apply_grasp_rule(&mut next, commanded.z, aperture_before, &mut info);
        }
        apply_finger_contacts(&mut next, &mut info);
        settle(&mut next);

        next.step = state.step + 1;
        if let (Some(anchor), Some(support)) = (
            next.support_anchor,
            self.task.task.support_object().and_then(|id| next.object(id)),
        ) {
            info.support_displacement = Some((support.pose - anchor).norm());
        }
        let success = check_success(&self.task, &next);
        info.success = success;
        let reward = shaped_reward(&self.task, &next);
        let done = success || next.step >= self.task.episode_step_budget;
        Ok(Transition {
            state: next,
            reward,
            done,
            info,
        })
    }

    fn apply_grasp_rule(&self, next: &mut WorldState, commanded_dz: f64, aperture_before: f64, info: &mut StepInfo) {
        let eef = next.eef_pos;
        let candidate = next
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| !o.fixture && aperture_before >= o.grip_width() - 1e-9 && o.in_grasp_band(&eef))
            .min_by(|(_, a), (_, b)| {
                let da = (a.pose.xy() - eef.xy()).norm();
                let db = (b.pose.xy() - eef.xy()).norm();
                da.total_cmp(&db)
            })
            .map(|(i, _)| i);
        let Some(i) = candidate else { return };

        if commanded_dz < -PRESS_THRESHOLD {
            let obj = &mut next.objects[i];
            let away = obj.pose.xy() - eef.xy();
            let dir = if away.norm() > 1e-9 {
                away.normalize()
            } else {
                nalgebra::Vector2::new(0.0, 1.0)
            };
            obj.pose.x += dir.x * DESTABILIZE_SHIFT;
            obj.pose.y += dir.y * DESTABILIZE_SHIFT;
            info.grasp = Some(GraspEvent::Destabilized { object: obj.id.clone() });
            return;
        }

        let width = next.objects[i].grip_width();
        if next.gripper_aperture <= width + 1e-12 {
            next.gripper_aperture = width;
            next.attached_object = Some(i);
            // Closing fingers centre the object along the closing axis.
            let obj = &mut next.objects[i];
            obj.pose.y = eef.y;
            next.attach_offset = obj.pose - eef;
            info.grasp = Some(GraspEvent::Attached { object: obj.id.clone() });
            if obj.id == self.task.task.primary_object() {
                next.support_anchor = self
                    .task
                    .task
                    .support_object()
                    .and_then(|id| next.object(id))
                    .map(|o| o.pose);
            }
        }
    }
}

/// Push free objects out of the finger slabs along the horizontal axis of least penetration.
fn apply_finger_contacts(next: &mut WorldState, info: &mut StepInfo) {
    let slabs = finger_slabs(&next.eef_pos, next.gripper_aperture);
    for i in 0..next.objects.len() {
        if Some(i) == next.attached_object || next.objects[i].fixture {
            continue;
        }
        let mut total = Vec3::zeros();
        for (k, slab) in slabs.iter().enumerate() {
            let obj = &next.objects[i];
            let pen = slab.penetration(&obj.aabb());
            if !(pen.x > 0.0 && pen.y > 0.0 && pen.z > 0.0) {
                continue;
            }
            let slab_c = slab.center();
            // Slab 0 is on +y, slab 1 on -y.
            let outward = if k == 0 { 1.0 } else { -1.0 };
            let push = if pen.y <= pen.x {
                let d = obj.pose.y - slab_c.y;
                let dir = if d.abs() > 1e-12 { d.signum() } else { outward };
                Vec3::new(0.0, dir * pen.y, 0.0)
            } else {
                let d = obj.pose.x - slab_c.x;
                let dir = if d.abs() > 1e-12 { d.signum() } else { 1.0 };
                Vec3::new(dir * pen.x, 0.0, 0.0)
            };
            next.objects[i].pose += push;
            total += push;
        }
        if total != Vec3::zeros() {
            info.contacts.push(Contact {
                object: next.objects[i].id.clone(),
                displacement: total.into(),
            });
        }
    }
}
