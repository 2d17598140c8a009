//! RGB-D frames to controller features.
//!
//! Segmentation and component labelling work on the raster exactly as stored.
//! The image row convention is handled in one place only, inside
//! [`backproject`].

mod color;
mod components;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use color::{rgb_to_hsv, segment_color, segment_many, ColorSpec, Mask};
pub use components::{components, largest_component, mean_centroid, Component};

use crate::raster::RgbdImage;
use crate::render::CameraModel;
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),
}

/// Deliberately wrong back-projection variants, kept for diagnosis experiments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackprojectMode {
    /// Negate the camera-frame y coordinate.
    #[serde(default)]
    pub flip_y: bool,
    /// Apply an OpenCV axis correction diag(1, -1, -1) before the extrinsic.
    #[serde(default)]
    pub cv_extrinsic: bool,
}

/// Pixel `(u, row)` at depth `d` to world coordinates.
pub fn backproject(u: f64, row: f64, d: f64, cam: &CameraModel) -> Result<Vec3, VisionError> {
    backproject_with(u, row, d, cam, BackprojectMode::default())
}

pub fn backproject_with(u: f64, row: f64, d: f64, cam: &CameraModel, mode: BackprojectMode) -> Result<Vec3, VisionError> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(VisionError::InvalidDepth(d));
    }
    let v = cam.row_to_v(row);
    let x_p = (u - cam.cx) * d / cam.fx;
    let mut y_p = (v - cam.cy) * d / cam.fy;
    if mode.flip_y {
        y_p = -y_p;
    }
    let mut p_cam = Vec3::new(x_p, y_p, -d);
    if mode.cv_extrinsic {
        p_cam.y = -p_cam.y;
        p_cam.z = -p_cam.z;
    }
    Ok(cam.cam_to_world(&p_cam))
}

/// How a blob's reference pixel is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidMode {
    #[default]
    Largest,
    /// Mean of every matching pixel in the frame.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub color: ColorSpec,
    /// Subtracted from the estimated z.
    #[serde(default)]
    pub depth_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub centroid: CentroidMode,
    #[serde(default)]
    pub backproject: BackprojectMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFeature {
    pub detected: bool,
    pub object_pos: Option<Vec3>,
    pub pixel_centroid: Option<(f64, f64)>,
    pub blob_area: usize,
}

impl TargetFeature {
    fn missing(area: usize, centroid: Option<(f64, f64)>) -> Self {
        Self {
            detected: false,
            object_pos: None,
            pixel_centroid: centroid,
            blob_area: area,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub step: u32,
    pub eef_pos: Vec3,
    pub gripper_aperture: f64,
    pub targets: BTreeMap<String, TargetFeature>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proprio {
    pub step: u32,
    pub eef_pos: Vec3,
    pub gripper_aperture: f64,
}

/// Median of the non-zero depths in the 3x3 window around a pixel.
pub fn sample_depth(img: &RgbdImage, u: f64, row: f64) -> Option<f64> {
    let (c, r) = (u.round() as i64, row.round() as i64);
    let mut vals = Vec::with_capacity(9);
    for dr in -1..=1 {
        for dc in -1..=1 {
            let (cc, rr) = (c + dc, r + dr);
            if cc < 0 || rr < 0 || cc >= img.width as i64 || rr >= img.height as i64 {
                continue;
            }
            let d = img.depth_at(cc as usize, rr as usize);
            if d > 0.0 {
                vals.push(d);
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    Some(if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    })
}

pub fn extract_features(img: &RgbdImage, cam: &CameraModel, proprio: Proprio, config: &VisionConfig) -> FeatureFrame {
    let specs: Vec<&ColorSpec> = config.targets.iter().map(|t| &t.color).collect();
    let masks = segment_many(img, &specs);
    let mut targets = BTreeMap::new();
    for (t, mask) in config.targets.iter().zip(&masks) {
        let blob = match config.centroid {
            CentroidMode::Largest => largest_component(mask).map(|c| (c.centroid, c.area)),
            CentroidMode::Mean => mean_centroid(mask).map(|c| (c, mask.count())),
        };
        let feature = match blob {
            None => TargetFeature::missing(0, None),
            Some((centroid, area)) => match sample_depth(img, centroid.0, centroid.1) {
                None => TargetFeature::missing(area, Some(centroid)),
                Some(d) => match backproject_with(centroid.0, centroid.1, d, cam, config.backproject) {
                    Ok(mut p) => {
                        p.z -= t.depth_bias;
                        TargetFeature {
                            detected: true,
                            object_pos: Some(p),
                            pixel_centroid: Some(centroid),
                            blob_area: area,
                        }
                    }
                    Err(_) => TargetFeature::missing(area, Some(centroid)),
                },
            },
        };
        targets.insert(t.name.clone(), feature);
    }
    FeatureFrame {
        step: proprio.step,
        eef_pos: proprio.eef_pos,
        gripper_aperture: proprio.gripper_aperture,
        targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Convention;
    use nalgebra::Matrix3;

    fn identity_cam() -> CameraModel {
        CameraModel {
            fx: 256.0,
            fy: 256.0,
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
    fn principal_point_backprojects_to_axis() {
        let p = backproject(127.5, 127.5, 0.5, &identity_cam()).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, -0.5));
    }

    #[test]
    fn nonpositive_depth_is_rejected() {
        assert_eq!(backproject(1.0, 1.0, 0.0, &identity_cam()), Err(VisionError::InvalidDepth(0.0)));
        assert!(backproject(1.0, 1.0, -1.0, &identity_cam()).is_err());
    }

    #[test]
    fn cv_rows_count_from_the_top() {
        let gl = identity_cam();
        let cv = identity_cam().with_convention(Convention::CvTopDown);
        let a = backproject(10.0, 20.0, 1.0, &gl).unwrap();
        let b = backproject(10.0, 255.0 - 20.0, 1.0, &cv).unwrap();
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn median_ignores_zero_depth() {
        let mut img = RgbdImage::new(3, 3, Convention::GlBottomUp);
        img.depth = vec![0.0, 1.0, 2.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(sample_depth(&img, 1.0, 1.0), Some(2.0));
        img.depth[8] = 4.0;
        assert_eq!(sample_depth(&img, 1.0, 1.0), Some(2.5));
        assert_eq!(sample_depth(&RgbdImage::new(3, 3, Convention::GlBottomUp), 1.0, 1.0), None);
    }

    #[test]
    fn gray_frame_detects_nothing() {
        let img = RgbdImage::filled(32, 32, Convention::GlBottomUp, [128, 128, 128]);
        let cfg = VisionConfig {
            targets: vec![
                TargetSpec {
                    name: "a".into(),
                    color: ColorSpec::red(),
                    depth_bias: 0.0,
                },
                TargetSpec {
                    name: "b".into(),
                    color: ColorSpec::green(),
                    depth_bias: 0.0,
                },
            ],
            centroid: CentroidMode::Largest,
            backproject: BackprojectMode::default(),
        };
        let proprio = Proprio {
            step: 3,
            eef_pos: Vec3::new(0.1, 0.2, 0.3),
            gripper_aperture: 0.05,
        };
        let f = extract_features(&img, &identity_cam(), proprio, &cfg);
        assert!(f.targets.values().all(|t| !t.detected && t.object_pos.is_none()));
        assert_eq!((f.step, f.eef_pos, f.gripper_aperture), (3, proprio.eef_pos, 0.05));
    }
}
