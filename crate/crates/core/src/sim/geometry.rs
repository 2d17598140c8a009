use crate::Vec3;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_center(center: Vec3, half: Vec3) -> Self {
        Self {
            min: center - half,
            max: center + half,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extents(&self) -> Vec3 {
        (self.max - self.min) * 0.5
    }

    /// Per-axis penetration depth; all components positive iff the boxes overlap.
    pub fn penetration(&self, other: &Aabb) -> Vec3 {
        Vec3::new(
            self.max.x.min(other.max.x) - self.min.x.max(other.min.x),
            self.max.y.min(other.max.y) - self.min.y.max(other.min.y),
            self.max.z.min(other.max.z) - self.min.z.max(other.min.z),
        )
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        let p = self.penetration(other);
        p.x > 0.0 && p.y > 0.0 && p.z > 0.0
    }
}

/// Maximum opening between the finger inner faces.
pub const MAX_APERTURE: f64 = 0.08;
/// Aperture change per control step.
pub const APERTURE_RATE: f64 = 0.01;
/// Finger thickness along the closing (y) axis.
pub const FINGER_THICKNESS: f64 = 0.01;
/// Finger half-width along x.
pub const FINGER_HALF_WIDTH: f64 = 0.01;
/// Fingertips sit this far below the end-effector reference point.
pub const FINGER_BELOW_EEF: f64 = 0.04;
/// Fingers extend this far above the end-effector reference point, up to the palm.
pub const FINGER_ABOVE_EEF: f64 = 0.02;

/// Two finger slabs flanking the aperture; the gripper closes along world y,
/// one finger on the camera side of the object and one behind it.
pub fn finger_slabs(eef: &Vec3, aperture: f64) -> [Aabb; 2] {
    let half_ap = aperture * 0.5;
    let slab = |sign: f64| {
        let inner = eef.y + sign * half_ap;
        let outer = eef.y + sign * (half_ap + FINGER_THICKNESS);
        Aabb {
            min: Vec3::new(eef.x - FINGER_HALF_WIDTH, inner.min(outer), eef.z - FINGER_BELOW_EEF),
            max: Vec3::new(eef.x + FINGER_HALF_WIDTH, inner.max(outer), eef.z + FINGER_ABOVE_EEF),
        }
    };
    [slab(1.0), slab(-1.0)]
}

/// Wrist column above the fingers. Rendered only; it takes no part in contact.
pub fn gripper_body(eef: &Vec3) -> [Aabb; 1] {
    [Aabb {
        min: Vec3::new(eef.x - 0.015, eef.y - 0.015, eef.z + FINGER_ABOVE_EEF),
        max: Vec3::new(eef.x + 0.015, eef.y + 0.015, eef.z + FINGER_ABOVE_EEF + 0.14),
    }]
}
