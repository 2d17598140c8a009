//! A bridge server backed by the built-in simulator, for exercising the wire
//! protocol without an external simulator.

use std::io::{BufRead, Write};

use super::bridge::{decode_line, encode_line, BridgeMessage, ObsPayload};
use super::env::{BuiltinEnv, Environment};
use crate::sim::{Action, TaskSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StubOptions {
    /// Answer the step with this index (from 0, counted per episode) with an error.
    pub fail_at_step: Option<u32>,
    /// Answer every reset with an error.
    pub fail_on_reset: bool,
}

fn error(message: impl Into<String>) -> BridgeMessage {
    BridgeMessage::Error {
        message: message.into(),
    }
}

/// Serves requests from `input` until it closes. Every line read yields one line written.
pub fn serve_stub(input: impl BufRead, mut output: impl Write, opts: StubOptions) -> std::io::Result<()> {
    let mut env: Option<BuiltinEnv> = None;
    let mut steps = 0u32;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match decode_line(&line) {
            Err(e) => error(e),
            Ok(BridgeMessage::Reset { seed, task }) => {
                steps = 0;
                if opts.fail_on_reset {
                    env = None;
                    error("injected failure on reset")
                } else {
                    match BuiltinEnv::new(TaskSpec::new(task)).and_then(|mut e| e.reset(seed).map(|o| (e, o))) {
                        Ok((e, obs)) => {
                            env = Some(e);
                            BridgeMessage::Obs(ObsPayload::from_observation(&obs))
                        }
                        Err(e) => error(e.to_string()),
                    }
                }
            }
            Ok(BridgeMessage::Step { action }) => match env.as_mut() {
                None => error("step before reset"),
                Some(_) if opts.fail_at_step == Some(steps) => {
                    env = None;
                    error(format!("injected failure at step {steps}"))
                }
                Some(e) => {
                    steps += 1;
                    match e.step(&Action::new(action[0], action[1], action[2], action[3])) {
                        Ok(obs) => BridgeMessage::Obs(ObsPayload::from_observation(&obs)),
                        Err(err) => {
                            env = None;
                            error(err.to_string())
                        }
                    }
                }
            },
            Ok(other) => error(format!("not a request: {other:?}")),
        };
        output.write_all(encode_line(&reply).as_bytes())?;
        output.flush()?;
    }
    Ok(())
}
