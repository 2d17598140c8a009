//! The HTTP rewriter against a local chat-completions stand-in.

mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use aor::memory::load_history;
use aor::orchestrator::mock::mock_response;
use aor::orchestrator::rewriter::{LlmConfig, LlmRewriter, ENV_API_KEY};
use aor::orchestrator::{env_factory, load_report, run_loop, AgentBackend, RunConfig, RunReport, RunStatus};
use aor::sim::TaskId;

use common::mock_run;

#[derive(Clone, Copy)]
enum Mode {
    /// Answer like the scripted mock, after `failures` HTTP 500 replies.
    Replay { failures: u32 },
    Unauthorized,
    /// Accept connections and never answer.
    Silent,
}

struct Server {
    endpoint: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Value)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut headers = String::new();
    let mut length = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok()?;
            }
        }
        if line == "\r\n" {
            break;
        }
        headers.push_str(&line);
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    Some((headers, serde_json::from_slice(&body).ok()?))
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

fn serve(mode: Mode, task: TaskId) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = requests.clone();
    std::thread::spawn(move || {
        let mut held = Vec::new();
        let (mut served, mut answered) = (0u32, 0u32);
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            if let Mode::Silent = mode {
                held.push(stream);
                continue;
            }
            let Some(req) = read_request(&mut stream) else { continue };
            log.lock().unwrap().push(req);
            served += 1;
            match mode {
                Mode::Replay { failures } if served <= failures => respond(&mut stream, "500 Internal Server Error", "{}"),
                Mode::Replay { .. } => {
                    answered += 1;
                    let text = mock_response(task, answered, &[]);
                    let body = json!({"choices": [{"message": {"role": "assistant", "content": text}}]});
                    respond(&mut stream, "200 OK", &body.to_string());
                }
                Mode::Unauthorized => respond(&mut stream, "401 Unauthorized", r#"{"error": "bad key"}"#),
                Mode::Silent => unreachable!(),
            }
        }
    });
    Server { endpoint, requests }
}

fn llm_run(server: &Server, task: TaskId, out: &std::path::Path, timeout: Duration) -> RunReport {
    let mut config = RunConfig::new(task, out.to_owned());
    config.agent = AgentBackend::Llm;
    let mut rewriter = LlmRewriter::new(LlmConfig {
        endpoint: server.endpoint.clone(),
        model: "test-model".into(),
        api_key: "sk-secret-value".into(),
        timeout,
    });
    let make_env = env_factory(&config);
    run_loop(&config, &mut rewriter, make_env.as_ref()).unwrap()
}

#[test]
fn http_backend_reproduces_the_mock_run() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(Mode::Replay { failures: 1 }, TaskId::Lift);
    let mut report = llm_run(&server, TaskId::Lift, &dir.path().join("llm"), Duration::from_secs(10));
    let mock = mock_run(TaskId::Lift, &dir.path().join("mock"), 42);
    assert_eq!(report.agent, AgentBackend::Llm);
    report.agent = AgentBackend::Mock;
    assert_eq!(report.to_json(), mock.to_json());

    // One failed attempt plus one request per call.
    let requests = server.requests.lock().unwrap();
    assert_eq!(requests.len(), 4);
    let (headers, body) = &requests[0];
    assert!(headers.contains("Bearer sk-secret-value"));
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    let parts = body["messages"][1]["content"].as_array().unwrap();
    assert!(parts[0]["text"].as_str().unwrap().contains("## Current controller"));
    let images: Vec<&str> = parts[1..].iter().map(|p| p["image_url"]["url"].as_str().unwrap()).collect();
    assert!(!images.is_empty());
    assert!(images.iter().all(|u| u.starts_with("data:image/png;base64,")));

    let logged = std::fs::read_to_string(dir.path().join("llm/llm/001_request.json")).unwrap();
    assert!(!logged.contains("sk-secret-value"));
    assert!(logged.contains("elided"));
    assert!(dir.path().join("llm/llm/001_response_1.json").exists());
    assert!(dir.path().join("llm/llm/001_response_2.json").exists());
    let history = load_history(&dir.path().join("llm")).unwrap();
    assert_eq!(history.controllers.len(), 4);
}

#[test]
fn rejected_credentials_stop_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(Mode::Unauthorized, TaskId::Lift);
    let report = llm_run(&server, TaskId::Lift, dir.path(), Duration::from_secs(10));
    assert_eq!(report.status, RunStatus::CredentialRejected);
    assert_eq!(report.status.exit_code(), 4);
    assert!(report.abort_reason.as_deref().unwrap().contains(ENV_API_KEY));
    // Credentials are not retried.
    assert_eq!(server.requests.lock().unwrap().len(), 1);
    assert_eq!(load_report(dir.path()).unwrap().status, RunStatus::CredentialRejected);
}

#[test]
fn unresponsive_endpoint_leaves_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(Mode::Silent, TaskId::Lift);
    let report = llm_run(&server, TaskId::Lift, dir.path(), Duration::from_secs(1));
    assert_eq!(report.status, RunStatus::BackendFailure);
    assert_eq!(report.status.exit_code(), 3);
    assert!(report.abort_reason.as_deref().unwrap().contains("unreachable"));
    assert_eq!(report.training_episodes, 1);
    assert!(report.eval.is_none());
    assert_eq!(load_report(dir.path()).unwrap(), report);
}

#[test]
fn cli_reads_the_endpoint_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(Mode::Unauthorized, TaskId::Lift);
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_aor"))
        .args(["run", "--task", "lift", "--agent", "llm", "--out"])
        .arg(dir.path().join("run"))
        .env("AOR_LLM_ENDPOINT", &server.endpoint)
        .env("AOR_LLM_MODEL", "m")
        .env(ENV_API_KEY, "k")
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}
