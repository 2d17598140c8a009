//! Pinhole camera and ray-cast RGB-D renderer.
//!
//! Camera axes follow OpenGL: x right, y up, z pointing back out of the lens,
//! so visible points have negative camera-frame z. Every pixel is sampled at
//! its centre by casting the exact back-projection ray, which makes rendered
//! depth consistent with [`crate::vision::backproject`] to machine precision.

use nalgebra::{Matrix3, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Convention, RgbdImage};
use crate::sim::{finger_slabs, gripper_body, Aabb, ColorClass, Shape, WorldState};
use crate::Vec3;

pub const BACKGROUND_RGB: [u8; 3] = [128, 128, 128];
pub const TABLE_RGB: [u8; 3] = [120, 80, 50];
pub const GRIPPER_RGB: [u8; 3] = [70, 70, 75];
/// Half extent of the square table top around the origin.
pub const TABLE_HALF: f64 = 0.45;

pub fn color_of(class: ColorClass) -> [u8; 3] {
    match class {
        ColorClass::Red => [200, 30, 30],
        ColorClass::Green => [30, 160, 30],
        ColorClass::DecoyRedMarker => [200, 40, 40],
        ColorClass::Neutral => [170, 150, 110],
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("invalid camera: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera rotation; columns are the camera axes in world coordinates.
    pub cam_rot: Matrix3<f64>,
    pub cam_pos: Vec3,
    pub convention: Convention,
}

/// Default viewing geometry.
pub const DEFAULT_PITCH_DEG: f64 = 75.0;
pub const DEFAULT_DISTANCE: f64 = 0.9;

impl CameraModel {
    /// 256x256 camera looking down at the table centre from the front.
    pub fn agentview(convention: Convention) -> Self {
        Self::looking_at(
            Vec3::new(0.0, 0.0, crate::sim::TABLE_TOP_Z),
            DEFAULT_DISTANCE,
            DEFAULT_PITCH_DEG.to_radians(),
            convention,
        )
    }

    /// Camera on the -y side of `target`, `pitch` radians below horizontal, image x along world x.
    pub fn looking_at(target: Vec3, distance: f64, pitch: f64, convention: Convention) -> Self {
        let (s, c) = pitch.sin_cos();
        let z_cam = Vec3::new(0.0, -c, s);
        let x_cam = Vec3::new(1.0, 0.0, 0.0);
        let y_cam = z_cam.cross(&x_cam);
        Self {
            fx: 256.0,
            fy: 256.0,
            cx: 127.5,
            cy: 127.5,
            width: 256,
            height: 256,
            cam_rot: Matrix3::from_columns(&[x_cam, y_cam, z_cam]),
            cam_pos: target + z_cam * distance,
            convention,
        }
    }

    pub fn with_convention(mut self, convention: Convention) -> Self {
        self.convention = convention;
        self
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::Invalid("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::Invalid("image size must be positive".into()));
        }
        let err = (self.cam_rot * self.cam_rot.transpose() - Matrix3::identity()).amax();
        if err >= 1e-9 {
            return Err(CameraError::Invalid(format!("rotation is not orthonormal (error {err:e})")));
        }
        Ok(())
    }

    /// Converts a stored row index to the bottom-up row coordinate used by the pinhole model.
    pub fn row_to_v(&self, row: f64) -> f64 {
        match self.convention {
            Convention::GlBottomUp => row,
            Convention::CvTopDown => (self.height - 1) as f64 - row,
        }
    }

    /// Inverse of [`Self::row_to_v`] (the mapping is an involution).
    pub fn v_to_row(&self, v: f64) -> f64 {
        self.row_to_v(v)
    }

    pub fn world_to_cam(&self, p: &Vec3) -> Vec3 {
        self.cam_rot.transpose() * (p - self.cam_pos)
    }

    pub fn cam_to_world(&self, p: &Vec3) -> Vec3 {
        self.cam_rot * p + self.cam_pos
    }

    /// Ray direction in world coordinates through stored pixel `(u, row)`, scaled so depth = ray parameter.
    fn pixel_ray(&self, u: f64, row: f64) -> Vec3 {
        let v = self.row_to_v(row);
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, -1.0);
        self.cam_rot * d_cam
    }
}

/// Homogeneous world-from-camera transform: rotation and translation only.
pub fn world_from_cam(cam: &CameraModel) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.cam_rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.cam_pos);
    m
}

pub fn cam_from_world(cam: &CameraModel) -> Matrix4<f64> {
    let rt = cam.cam_rot.transpose();
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rt * cam.cam_pos));
    m
}

/// Pixel column, stored row and depth of a world point.
pub fn project(p: &Vec3, cam: &CameraModel) -> Result<(f64, f64, f64), CameraError> {
    let pc = cam.world_to_cam(p);
    let d = -pc.z;
    if d <= 0.0 {
        return Err(CameraError::BehindCamera(d));
    }
    let u = cam.fx * pc.x / d + cam.cx;
    let v = cam.fy * pc.y / d + cam.cy;
    Ok((u, cam.v_to_row(v), d))
}

/// What a pixel shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Table,
    /// Index into `WorldState::objects`.
    Object(usize),
    Gripper,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderOptions {
    /// Additive per-channel colour noise in `[-amplitude, amplitude]`, seeded.
    pub jitter: Option<(u64, u8)>,
}

enum Solid {
    Box(Aabb),
    Cylinder { center: Vec3, radius: f64, half_h: f64 },
}

impl Solid {
    fn bounds(&self) -> Aabb {
        match self {
            Solid::Box(b) => *b,
            Solid::Cylinder { center, radius, half_h } => {
                Aabb::from_center(*center, Vec3::new(*radius, *radius, *half_h))
            }
        }
    }

    /// Smallest positive ray parameter of an entry hit.
    fn hit(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match self {
            Solid::Box(b) => ray_box(o, d, b),
            Solid::Cylinder { center, radius, half_h } => ray_cylinder(o, d, center, *radius, *half_h),
        }
    }
}

fn ray_box(o: &Vec3, d: &Vec3, b: &Aabb) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < b.min[k] || o[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut a, mut c) = ((b.min[k] - o[k]) * inv, (b.max[k] - o[k]) * inv);
        if a > c {
            std::mem::swap(&mut a, &mut c);
        }
        t0 = t0.max(a);
        t1 = t1.min(c);
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn ray_cylinder(o: &Vec3, d: &Vec3, c: &Vec3, r: f64, half_h: f64) -> Option<f64> {
    let (lo, hi) = (c.z - half_h, c.z + half_h);
    let mut best: Option<f64> = None;
    let mut take = |t: f64| {
        if t > 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    let (ox, oy) = (o.x - c.x, o.y - c.y);
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = 2.0 * (ox * d.x + oy * d.y);
        let cc = ox * ox + oy * oy - r * r;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = o.z + t * d.z;
                if z >= lo && z <= hi {
                    take(t);
                }
            }
        }
    }
    if d.z.abs() > 1e-15 {
        for zc in [lo, hi] {
            let t = (zc - o.z) / d.z;
            let (x, y) = (ox + t * d.x, oy + t * d.y);
            if x * x + y * y <= r * r {
                take(t);
            }
        }
    }
    best
}

/// Renders the scene as stored in `cam.convention` row order.
pub fn render(state: &WorldState, cam: &CameraModel) -> RgbdImage {
    render_labeled(state, cam, &RenderOptions::default()).0
}

pub fn render_with(state: &WorldState, cam: &CameraModel, opts: &RenderOptions) -> RgbdImage {
    render_labeled(state, cam, opts).0
}

/// Render plus the surface seen at every pixel.
pub fn render_labeled(state: &WorldState, cam: &CameraModel, opts: &RenderOptions) -> (RgbdImage, Vec<Option<Surface>>) {
    let (w, h) = (cam.width, cam.height);
    let mut img = RgbdImage::filled(w, h, cam.convention, BACKGROUND_RGB);
    let mut labels = vec![None; w * h];

    // Table top plane, clipped to its square.
    let o = cam.cam_pos;
    for row in 0..h {
        for col in 0..w {
            let d = cam.pixel_ray(col as f64, row as f64);
            if d.z >= 0.0 {
                continue;
            }
            let t = (state.table_top_z - o.z) / d.z;
            let p = o + d * t;
            if t > 0.0 && p.x.abs() <= TABLE_HALF && p.y.abs() <= TABLE_HALF {
                let i = img.index(col, row);
                img.depth[i] = t;
                img.set_rgb(col, row, TABLE_RGB);
                labels[i] = Some(Surface::Table);
            }
        }
    }

    let mut solids: Vec<(Solid, [u8; 3], Surface)> = Vec::new();
    for (i, obj) in state.objects.iter().enumerate() {
        let solid = match obj.shape {
            Shape::Box => Solid::Box(obj.aabb()),
            Shape::Cylinder => Solid::Cylinder {
                center: obj.pose,
                radius: obj.half_extents.x,
                half_h: obj.half_extents.z,
            },
        };
        solids.push((solid, color_of(obj.color_class), Surface::Object(i)));
    }
    for b in finger_slabs(&state.eef_pos, state.gripper_aperture)
        .into_iter()
        .chain(gripper_body(&state.eef_pos))
    {
        solids.push((Solid::Box(b), GRIPPER_RGB, Surface::Gripper));
    }

    for (solid, rgb, surface) in &solids {
        let Some((c0, c1, r0, r1)) = screen_rect(&solid.bounds(), cam) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let d = cam.pixel_ray(col as f64, row as f64);
                let Some(t) = solid.hit(&o, &d) else { continue };
                let i = img.index(col, row);
                if img.depth[i] == 0.0 || t < img.depth[i] {
                    img.depth[i] = t;
                    img.set_rgb(col, row, *rgb);
                    labels[i] = Some(*surface);
                }
            }
        }
    }

    if let Some((seed, amp)) = opts.jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = amp as i16;
        for b in img.rgb.iter_mut() {
            let n: i16 = rng.gen_range(-amp..=amp);
            *b = (*b as i16 + n).clamp(0, 255) as u8;
        }
    }
    (img, labels)
}

/// Inclusive pixel bounds covering a box, or `None` when it cannot be seen.
fn screen_rect(b: &Aabb, cam: &CameraModel) -> Option<(usize, usize, usize, usize)> {
    let (mut umin, mut umax, mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..8 {
        let p = Vec3::new(
            if k & 1 == 0 { b.min.x } else { b.max.x },
            if k & 2 == 0 { b.min.y } else { b.max.y },
            if k & 4 == 0 { b.min.z } else { b.max.z },
        );
        // A corner behind the lens: fall back to the full frame.
        let Ok((u, r, _)) = project(&p, cam) else {
            return Some((0, cam.width - 1, 0, cam.height - 1));
        };
        umin = umin.min(u);
        umax = umax.max(u);
        rmin = rmin.min(r);
        rmax = rmax.max(r);
    }
    let (wmax, hmax) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    if umax < 0.0 || rmax < 0.0 || umin > wmax || rmin > hmax {
        return None;
    }
    let lo = |x: f64| (x.floor() - 1.0).max(0.0) as usize;
    Some((
        lo(umin),
        (umax.ceil() + 1.0).min(wmax) as usize,
        lo(rmin),
        (rmax.ceil() + 1.0).min(hmax) as usize,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{TaskId, TaskSpec};

    fn identity_cam(fx: f64) -> CameraModel {
        CameraModel {
            fx,
            fy: fx,
            cx: 127.5,
            cy: 127.5,
            width: 256,
            height: 256,
            cam_rot: Matrix3::identity(),
            cam_pos: Vec3::zeros(),
            convention: Convention::GlBottomUp,
        }
    }

    #[test]
    fn default_camera_is_valid() {
        CameraModel::agentview(Convention::GlBottomUp).validate().unwrap();
    }

    #[test]
    fn principal_point_projection() {
        let cam = identity_cam(256.0);
        let (u, v, d) = project(&Vec3::new(0.0, 0.0, -0.5), &cam).unwrap();
        assert_eq!((u, v, d), (127.5, 127.5, 0.5));
    }

    #[test]
    fn direct_substitution() {
        let cam = identity_cam(128.0);
        let (u, _, _) = project(&Vec3::new(0.25, 0.0, -1.0), &cam).unwrap();
        assert!((u - 159.5).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = identity_cam(128.0);
        assert!(matches!(project(&Vec3::new(0.0, 0.0, 1.0), &cam), Err(CameraError::BehindCamera(_))));
    }

    #[test]
    fn identity_pose_gives_identity_transform() {
        assert_eq!(world_from_cam(&identity_cam(100.0)), Matrix4::identity());
    }

    #[test]
    fn transform_times_inverse_is_identity() {
        let cam = CameraModel::agentview(Convention::CvTopDown);
        let err = (world_from_cam(&cam) * cam_from_world(&cam) - Matrix4::identity()).amax();
        assert!(err < 1e-12);
    }

    #[test]
    fn empty_scene_only_hits_table() {
        let task = TaskSpec::new(TaskId::Lift);
        let mut s = task.reset(0).unwrap();
        s.objects.clear();
        s.eef_pos.z += 10.0;
        let cam = CameraModel::agentview(Convention::GlBottomUp);
        let (img, labels) = render_labeled(&s, &cam, &RenderOptions::default());
        for (i, l) in labels.iter().enumerate() {
            match l {
                Some(Surface::Table) => assert!(img.depth[i] > 0.0),
                None => assert_eq!(img.depth[i], 0.0),
                other => panic!("unexpected surface {other:?}"),
            }
        }
        assert!(labels.iter().any(|l| l.is_some()));
    }

    #[test]
    fn conventions_are_vertical_mirrors() {
        let s = TaskSpec::new(TaskId::PickPlace).reset(3).unwrap();
        let gl = render(&s, &CameraModel::agentview(Convention::GlBottomUp));
        let cv = render(&s, &CameraModel::agentview(Convention::CvTopDown));
        assert_eq!(gl.flipped(), cv);
    }

    #[test]
    fn nearer_surface_wins() {
        let task = TaskSpec::new(TaskId::Lift);
        let s = task.reset(9).unwrap();
        let cam = CameraModel::agentview(Convention::GlBottomUp);
        let (img, labels) = render_labeled(&s, &cam, &RenderOptions::default());
        let cube = s.object("cube").unwrap();
        let (u, r, d) = project(&Vec3::new(cube.pose.x, cube.pose.y, cube.top()), &cam).unwrap();
        let i = img.index(u.round() as usize, r.round() as usize);
        assert_eq!(labels[i], Some(Surface::Object(0)));
        assert!(img.depth[i] <= d + 0.05);
    }

    #[test]
    fn jitter_is_seeded() {
        let s = TaskSpec::new(TaskId::Lift).reset(1).unwrap();
        let cam = CameraModel::agentview(Convention::GlBottomUp);
        let opts = RenderOptions { jitter: Some((7, 4)) };
        assert_eq!(render_with(&s, &cam, &opts), render_with(&s, &cam, &opts));
        assert_ne!(render_with(&s, &cam, &opts), render(&s, &cam));
    }
}
