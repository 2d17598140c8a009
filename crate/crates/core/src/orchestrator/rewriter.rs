//! Rewriter backends: the scripted mock and a chat-completions HTTP client.

use std::path::Path;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Value};
use thiserror::Error;

use super::mock::mock_response;
use super::prompt::PromptBundle;
use crate::controller::Provenance;
use crate::memory::EpisodeOutcome;
use crate::raster::decode_ppm;
use crate::sim::TaskId;

pub const ENV_ENDPOINT: &str = "AOR_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "AOR_LLM_MODEL";
pub const ENV_API_KEY: &str = "AOR_LLM_API_KEY";
/// Attempts per rewrite call before the backend is declared unreachable.
pub const LLM_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    /// The endpoint refused the configured credentials. Retrying will not help.
    #[error("{0}")]
    Credential(String),
    #[error("rewriter backend unreachable: {0}")]
    Unreachable(String),
}

/// Everything a backend may use to produce its response.
pub struct RewriteRequest<'a> {
    pub task: TaskId,
    /// 1-based rewrite call number within the run.
    pub call: u32,
    pub history: &'a [EpisodeOutcome],
    pub bundle: &'a PromptBundle,
    /// Run directory; image paths in the bundle are relative to it.
    pub run_dir: &'a Path,
}

pub trait Rewriter {
    fn provenance(&self) -> Provenance;
    fn rewrite(&mut self, req: &RewriteRequest<'_>) -> Result<String, RewriteError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MockRewriter;

impl Rewriter for MockRewriter {
    fn provenance(&self) -> Provenance {
        Provenance::MockRewriter
    }

    fn rewrite(&mut self, req: &RewriteRequest<'_>) -> Result<String, RewriteError> {
        Ok(mock_response(req.task, req.call, req.history))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: String,
    pub timeout: Duration,
}

impl LlmConfig {
    pub fn from_env(timeout: Duration) -> Result<Self, String> {
        let var = |name: &str| match std::env::var(name) {
            Ok(v) if !v.trim().is_empty() => Ok(v),
            _ => Err(format!("{name} is not set")),
        };
        Ok(Self {
            endpoint: var(ENV_ENDPOINT)?,
            model: var(ENV_MODEL)?,
            api_key: var(ENV_API_KEY)?,
            timeout,
        })
    }
}

/// Sends each prompt to an OpenAI-style chat completions endpoint.
pub struct LlmRewriter {
    config: LlmConfig,
    agent: ureq::Agent,
    backoff: Duration,
}

impl LlmRewriter {
    pub fn new(config: LlmConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self {
            config,
            agent,
            backoff: Duration::from_millis(250),
        }
    }

    fn request_body(&self, req: &RewriteRequest<'_>) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.bundle.user_text()})];
        for img in &req.bundle.images {
            match load_png(&req.run_dir.join(&img.path)) {
                Ok(png) => content.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{}", B64.encode(png))},
                })),
                Err(e) => log::warn!("skipping frame {}: {e}", img.path),
            }
        }
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": req.bundle.preamble},
                {"role": "user", "content": content},
            ],
        })
    }

    fn log(&self, run_dir: &Path, name: &str, value: &Value) {
        let dir = run_dir.join("llm");
        let written = std::fs::create_dir_all(&dir).and_then(|_| {
            std::fs::write(
                dir.join(name),
                serde_json::to_vec_pretty(value).unwrap_or_default(),
            )
        });
        if let Err(e) = written {
            log::warn!("cannot write LLM log {name}: {e}");
        }
    }
}

fn load_png(path: &Path) -> Result<Vec<u8>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let (w, h, rgb) = decode_ppm(&bytes).map_err(|e| e.to_string())?;
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).ok_or("raster size mismatch")?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

/// Request body as logged: image payloads elided.
fn redacted_body(body: &Value) -> Value {
    let mut body = body.clone();
    if let Some(msgs) = body["messages"].as_array_mut() {
        for m in msgs {
            if let Some(parts) = m["content"].as_array_mut() {
                for p in parts {
                    if let Some(url) = p.pointer_mut("/image_url/url") {
                        let n = url.as_str().map_or(0, str::len);
                        *url = Value::String(format!("data:image/png;base64,<{n} characters elided>"));
                    }
                }
            }
        }
    }
    body
}

/// Assistant text from a chat completions body; `None` when the body has another shape.
pub fn completion_text(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let content = v.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join("")),
        _ => None,
    }
}

impl Rewriter for LlmRewriter {
    fn provenance(&self) -> Provenance {
        Provenance::Llm
    }

    fn rewrite(&mut self, req: &RewriteRequest<'_>) -> Result<String, RewriteError> {
        let body = self.request_body(req);
        self.log(
            req.run_dir,
            &format!("{:03}_request.json", req.call),
            &json!({
                "endpoint": self.config.endpoint,
                "headers": {"Authorization": "Bearer [redacted]", "Content-Type": "application/json"},
                "body": redacted_body(&body),
            }),
        );
        let payload = body.to_string();
        let mut last_error = String::new();
        for attempt in 1..=LLM_ATTEMPTS {
            let result = self
                .agent
                .post(&self.config.endpoint)
                .set("Authorization", &format!("Bearer {}", self.config.api_key))
                .set("Content-Type", "application/json")
                .send_string(&payload);
            let log_name = format!("{:03}_response_{attempt}.json", req.call);
            match result {
                Ok(resp) => {
                    let status = resp.status();
                    match resp.into_string() {
                        Ok(text) => {
                            self.log(req.run_dir, &log_name, &json!({"status": status, "body": text}));
                            // An unexpected body shape is passed on whole and fails parsing downstream.
                            return Ok(completion_text(&text).unwrap_or(text));
                        }
                        Err(e) => last_error = format!("reading response: {e}"),
                    }
                }
                Err(ureq::Error::Status(code @ (401 | 403), resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    self.log(req.run_dir, &log_name, &json!({"status": code, "body": text}));
                    return Err(RewriteError::Credential(format!(
                        "the LLM endpoint rejected the credentials in {ENV_API_KEY} (HTTP {code})"
                    )));
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    self.log(req.run_dir, &log_name, &json!({"status": code, "body": text}));
                    last_error = format!("HTTP {code}");
                }
                Err(ureq::Error::Transport(t)) => {
                    last_error = t.to_string();
                    self.log(req.run_dir, &log_name, &json!({"error": last_error}));
                }
            }
            log::warn!("rewrite call {} attempt {attempt} failed: {last_error}", req.call);
            if attempt < LLM_ATTEMPTS {
                std::thread::sleep(self.backoff * attempt);
            }
        }
        Err(RewriteError::Unreachable(format!("{LLM_ATTEMPTS} attempts failed, last: {last_error}")))
    }
}
