//! Act-Observe-Rewrite harness.
//!
//! A robot controller is a small sandboxed script. Each episode runs the
//! script against a deterministic tabletop simulator through a synthetic
//! RGB-D camera and a colour-segmentation vision pipeline (fast loop).
//! Between episodes a rewriter (a scripted mock or a multimodal LLM) reads the
//! stored outcomes and key frames and proposes a replacement script, which is
//! validated before it is installed (slow loop).
//!
//! Module map:
//! - [`sim`]: kinematic world, grasp/contact rules, reward, success predicates
//! - [`render`]: pinhole camera model, projection, RGB-D rendering
//! - [`raster`]: image buffers, PPM and depth raster codecs
//! - [`vision`]: HSV segmentation, connected components, back-projection
//! - [`controller`]: sandboxed script host, validation, EMA + clamp wrapper
//! - [`memory`]: persistent run directory, outcomes, diagnoses, key frames
//! - [`orchestrator`]: episode runner, prompts, rewriters, the outer loop

pub mod controller;
pub mod raster;
pub mod memory;
pub mod orchestrator;
pub mod render;
pub mod sim;
pub mod vision;

pub type Vec3 = nalgebra::Vector3<f64>;
