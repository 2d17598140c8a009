use super::{task::BIN_HALF, TaskId, TaskSpec, WorldState};
use crate::Vec3;

/// Height above the table top the lift cube must reach.
pub const LIFT_HEIGHT: f64 = 0.04;
/// Allowed gap between a placed cube and the top of its support.
pub const STACK_Z_GAP: f64 = 0.005;
/// The support cube may drift less than this from its anchored pose.
pub const SUPPORT_DRIFT: f64 = 0.01;
/// Largest reward a non-successful state can earn.
pub const NON_SUCCESS_CAP: f64 = 0.999;

const EPS: f64 = 1e-9;

/// Where the primary object must end up, if the task has a placement goal.
fn goal_point(task: &TaskSpec, state: &WorldState) -> Option<Vec3> {
    let primary = state.object(task.task.primary_object())?;
    match task.task {
        TaskId::Lift => None,
        TaskId::PickPlace => {
            let bin = state.object("bin")?;
            Some(Vec3::new(bin.pose.x, bin.pose.y, bin.top() + primary.half_extents.z))
        }
        TaskId::Stack => {
            let b = state.object("cubeB")?;
            Some(Vec3::new(b.pose.x, b.pose.y, b.top() + primary.half_extents.z))
        }
    }
}

/// Distance from the primary object's centre to its goal; `None` for lift.
pub fn goal_distance(task: &TaskSpec, state: &WorldState) -> Option<f64> {
    let goal = goal_point(task, state)?;
    let primary = state.object(task.task.primary_object())?;
    Some((primary.pose - goal).norm())
}

pub fn check_success(task: &TaskSpec, state: &WorldState) -> bool {
    let Some(primary) = state.object(task.task.primary_object()) else {
        return false;
    };
    let attached = state.is_attached(&primary.id);
    match task.task {
        TaskId::Lift => attached && primary.pose.z >= state.table_top_z + LIFT_HEIGHT - EPS,
        TaskId::PickPlace => {
            let Some(bin) = state.object("bin") else {
                return false;
            };
            let dx = (primary.pose.x - bin.pose.x).abs();
            let dy = (primary.pose.y - bin.pose.y).abs();
            // Resting on the bin floor, or on the thin marker lying on it.
            let marker_top = state.object("marker").map_or(bin.top(), |m| m.top());
            let bottom = primary.bottom();
            !attached
                && dx <= BIN_HALF[0]
                && dy <= BIN_HALF[1]
                && bottom >= bin.top() - EPS
                && bottom <= marker_top.max(bin.top()) + EPS
        }
        TaskId::Stack => {
            let Some(b) = state.object("cubeB") else {
                return false;
            };
            let offset = (primary.pose.xy() - b.pose.xy()).norm();
            let gap = (primary.bottom() - b.top()).abs();
            let anchor = state.support_anchor.unwrap_or(b.pose);
            !attached
                && offset <= task.placement_tolerance + EPS
                && gap <= STACK_Z_GAP
                && (b.pose - anchor).norm() < SUPPORT_DRIFT
        }
    }
}

/// Reach + grasp + progress shaping in `[0, 1]`; exactly 1 on success.
pub fn shaped_reward(task: &TaskSpec, state: &WorldState) -> f64 {
    if check_success(task, state) {
        return 1.0;
    }
    let Some(primary) = state.object(task.task.primary_object()) else {
        return 0.0;
    };
    let w = task.reward;
    let d_reach = (state.eef_pos - primary.pose).norm();
    let reach = w.reach * (1.0 - (10.0 * d_reach).tanh());
    let grasp = if state.is_attached(&primary.id) { w.grasp } else { 0.0 };
    let progress = match task.task {
        TaskId::Lift => {
            let rest = state.table_top_z + primary.half_extents.z;
            let target = state.table_top_z + LIFT_HEIGHT;
            if target > rest {
                ((primary.pose.z - rest) / (target - rest)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        }
        TaskId::PickPlace | TaskId::Stack => match goal_distance(task, state) {
            Some(d) if state.initial_goal_distance > 0.0 => (1.0 - d / state.initial_goal_distance).clamp(0.0, 1.0),
            _ => 0.0,
        },
    };
    (reach + grasp + w.progress * progress).clamp(0.0, NON_SUCCESS_CAP)
}
