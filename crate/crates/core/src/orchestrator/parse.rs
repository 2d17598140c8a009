//! Extracting the diagnosis and replacement source from a rewriter response.

use serde::Deserialize;
use thiserror::Error;

use crate::memory::DiagnosisRecord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no controller source in response: {0}")]
pub struct ParseError(pub String);

/// A fenced block: its info-string tag and body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fence<'a> {
    pub tag: &'a str,
    pub body: &'a str,
}

/// All ```-fenced blocks in order. An unterminated final block runs to the end of the text.
pub fn fenced_blocks(text: &str) -> Vec<Fence<'_>> {
    let mut out = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        match open {
            None => {
                if let Some(info) = trimmed.strip_prefix("```") {
                    let tag = info.split_whitespace().next().unwrap_or("");
                    open = Some((tag, offset + line.len()));
                }
            }
            Some((tag, start)) => {
                if trimmed == "```" {
                    out.push(Fence {
                        tag,
                        body: &text[start..offset],
                    });
                    open = None;
                }
            }
        }
        offset += line.len();
    }
    if let Some((tag, start)) = open {
        out.push(Fence {
            tag,
            body: &text[start.min(text.len())..],
        });
    }
    out
}

#[derive(Debug, Deserialize)]
struct RawDiagnosis {
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    reasoning: String,
    #[serde(default)]
    strategy: String,
    confidence: Option<f64>,
}

fn parse_diagnosis(body: &str) -> Option<DiagnosisRecord> {
    let raw: RawDiagnosis = serde_json::from_str(body.trim()).ok()?;
    Some(
        DiagnosisRecord {
            tags: raw.tags,
            reasoning: raw.reasoning,
            strategy: raw.strategy,
            confidence: raw.confidence.unwrap_or(DiagnosisRecord::DEFAULT_CONFIDENCE),
            produced_version: None,
            episode_index: None,
            rejection: None,
        }
        .normalized(),
    )
}

/// Splits a response into its diagnosis and controller source.
///
/// The source is the block tagged `controller`, or else the last fenced block.
/// A missing or malformed `diagnosis` block yields the default record.
pub fn parse_rewrite(text: &str) -> Result<(DiagnosisRecord, String), ParseError> {
    let blocks = fenced_blocks(text);
    let source = blocks
        .iter()
        .find(|b| b.tag == "controller")
        .or_else(|| blocks.iter().rev().find(|b| b.tag != "diagnosis"))
        .map(|b| b.body.to_owned())
        .ok_or_else(|| ParseError("no fenced code block".into()))?;
    if source.trim().is_empty() {
        return Err(ParseError("controller block is empty".into()));
    }
    let diagnosis = blocks
        .iter()
        .find(|b| b.tag == "diagnosis")
        .and_then(|b| parse_diagnosis(b.body))
        .unwrap_or_else(DiagnosisRecord::unspecified);
    Ok((diagnosis, source))
}
