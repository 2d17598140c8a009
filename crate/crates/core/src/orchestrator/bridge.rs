//! Line-delimited JSON protocol to an external simulator, and the client that
//! drives one as a child process.
//!
//! Every message carries `"protocol": 1` and a `"type"` of `reset`, `step`,
//! `obs` or `error`. Each request line gets exactly one response line.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::env::{EnvError, Environment, Observation};
use crate::raster::{Convention, RgbdImage};
use crate::render::CameraModel;
use crate::sim::{Action, TaskId};
use crate::Vec3;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proprio {
    pub eef_pos: [f64; 3],
    pub gripper_aperture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsPayload {
    /// Base64 of a binary PPM.
    pub rgb_b64: String,
    /// Base64 of little-endian f32 depth values, row-major.
    pub depth_b64: String,
    pub width: usize,
    pub height: usize,
    pub convention: Convention,
    pub proprio: Proprio,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_displacement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BridgeMessage {
    Reset { seed: u64, task: TaskId },
    Step { action: [f64; 4] },
    Obs(ObsPayload),
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub protocol: u32,
    #[serde(flatten)]
    pub message: BridgeMessage,
}

pub fn encode_line(message: &BridgeMessage) -> String {
    let env = Envelope {
        protocol: PROTOCOL_VERSION,
        message: message.clone(),
    };
    let mut s = serde_json::to_string(&env).expect("bridge messages are plain JSON");
    s.push('\n');
    s
}

pub fn decode_line(line: &str) -> Result<BridgeMessage, String> {
    let env: Envelope = serde_json::from_str(line.trim()).map_err(|e| format!("malformed message: {e}"))?;
    if env.protocol != PROTOCOL_VERSION {
        return Err(format!("unsupported protocol version {}", env.protocol));
    }
    Ok(env.message)
}

impl ObsPayload {
    pub fn from_observation(obs: &Observation) -> Self {
        Self {
            rgb_b64: B64.encode(obs.image.to_ppm()),
            depth_b64: B64.encode(obs.image.depth_le_bytes()),
            width: obs.image.width,
            height: obs.image.height,
            convention: obs.image.convention,
            proprio: Proprio {
                eef_pos: obs.eef_pos.into(),
                gripper_aperture: obs.gripper_aperture,
            },
            reward: obs.reward,
            done: obs.done,
            success: obs.success,
            object: obs.object.map(Into::into),
            support_displacement: obs.support_displacement,
        }
    }

    /// Decodes the rasters and checks them against the declared dimensions.
    pub fn to_observation(&self) -> Result<Observation, String> {
        let rgb = B64.decode(&self.rgb_b64).map_err(|e| format!("rgb_b64: {e}"))?;
        let depth = B64.decode(&self.depth_b64).map_err(|e| format!("depth_b64: {e}"))?;
        let image = RgbdImage::from_parts(&rgb, &depth, self.convention).map_err(|e| e.to_string())?;
        if image.width != self.width || image.height != self.height {
            return Err(format!(
                "raster is {}x{}, declared {}x{}",
                image.width, image.height, self.width, self.height
            ));
        }
        let finite = self.proprio.eef_pos.iter().all(|x| x.is_finite())
            && self.proprio.gripper_aperture.is_finite()
            && self.reward.is_finite();
        if !finite {
            return Err("non-finite proprioception or reward".into());
        }
        Ok(Observation {
            image,
            eef_pos: Vec3::from(self.proprio.eef_pos),
            gripper_aperture: self.proprio.gripper_aperture,
            reward: self.reward,
            done: self.done,
            success: self.success,
            object: self.object.map(Vec3::from),
            support_displacement: self.support_displacement,
        })
    }
}

/// The default camera, rescaled to a raster of another size with the same field of view.
pub fn camera_for(width: usize, height: usize, convention: Convention) -> CameraModel {
    let mut cam = CameraModel::agentview(convention);
    if width != cam.width || height != cam.height {
        cam.fx *= width as f64 / cam.width as f64;
        cam.fy *= height as f64 / cam.height as f64;
        cam.cx = (width as f64 - 1.0) * 0.5;
        cam.cy = (height as f64 - 1.0) * 0.5;
        cam.width = width;
        cam.height = height;
    }
    cam
}

/// Environment served by a child process speaking the bridge protocol on stdio.
pub struct BridgeEnv {
    task: TaskId,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    camera: CameraModel,
}

impl BridgeEnv {
    /// Spawns `sh -c command`.
    pub fn spawn(command: &str, task: TaskId) -> Result<Self, EnvError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EnvError::Backend(format!("cannot start bridge `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout was piped"));
        Ok(Self {
            task,
            child,
            stdin,
            stdout,
            camera: CameraModel::agentview(Convention::GlBottomUp),
        })
    }

    fn request(&mut self, message: &BridgeMessage) -> Result<Observation, EnvError> {
        let backend = |m: String| EnvError::Backend(format!("bridge: {m}"));
        self.stdin
            .write_all(encode_line(message).as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| backend(format!("write failed: {e}")))?;
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| backend(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(backend("simulator closed its output".into()));
        }
        match decode_line(&line).map_err(backend)? {
            BridgeMessage::Obs(payload) => {
                let obs = payload.to_observation().map_err(backend)?;
                self.camera = camera_for(obs.image.width, obs.image.height, obs.image.convention);
                Ok(obs)
            }
            BridgeMessage::Error { message } => Err(backend(format!("simulator error: {message}"))),
            other => Err(backend(format!("unexpected response {other:?}"))),
        }
    }
}

impl Drop for BridgeEnv {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Environment for BridgeEnv {
    fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let task = self.task;
        self.request(&BridgeMessage::Reset { seed, task })
    }

    fn step(&mut self, action: &Action) -> Result<Observation, EnvError> {
        self.request(&BridgeMessage::Step {
            action: action.as_array(),
        })
    }

    fn camera(&self) -> CameraModel {
        self.camera.clone()
    }
}
