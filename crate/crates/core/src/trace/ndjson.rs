//! Line-delimited JSON fixtures.
//!
//! Line 1 is the manifest object (same fields as the binary header). Each
//! following non-blank line is one step:
//!
//! ```json
//! {"step_index": 0,
//!  "attention": [[[0.1, 0.2, 0.0, 0.3]]],
//!  "text_attention": null,
//!  "token_ids": [5, 17],
//!  "final_logits": [2.0, 1.9],
//!  "layer_logits": [[5.0, 0.0]],
//!  "layer_pi_max": [0.6],
//!  "model_greedy_token": 5}
//! ```
//!
//! Attention is nested `[layer][head][position]`. `text_attention` may be
//! omitted when the manifest has no text slice.

use serde::Deserialize;

use super::{StepRecord, Trace, TraceManifest};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureStep {
    step_index: u32,
    attention: Vec<Vec<Vec<f32>>>,
    #[serde(default)]
    text_attention: Option<Vec<Vec<Vec<f32>>>>,
    token_ids: Vec<u32>,
    final_logits: Vec<f32>,
    layer_logits: Vec<Vec<f32>>,
    layer_pi_max: Vec<f32>,
    model_greedy_token: u32,
}

fn flatten(blocks: Vec<Vec<Vec<f32>>>, row_len: usize, what: &str) -> std::result::Result<Vec<Vec<f32>>, String> {
    blocks
        .into_iter()
        .enumerate()
        .map(|(layer, heads)| {
            if let Some(h) = heads.iter().position(|r| r.len() != row_len) {
                return Err(format!(
                    "{what} block {layer}, head {h}: expected {row_len} values, got {}",
                    heads[h].len()
                ));
            }
            Ok(heads.concat())
        })
        .collect()
}

/// Parses a fixture into the same structures the binary reader yields.
pub fn read_ndjson_fixture(text: &str) -> Result<Trace> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (line, first) = lines.next().ok_or(Error::Fixture {
        line: 1,
        message: "missing manifest line".into(),
    })?;
    let at = |line: usize| move |e: serde_json::Error| Error::Fixture {
        line,
        message: e.to_string(),
    };
    let manifest: TraceManifest = serde_json::from_str(first).map_err(at(line))?;
    manifest.validate().map_err(|e| Error::Fixture {
        line,
        message: e.to_string(),
    })?;

    let mut steps = Vec::new();
    for (line, raw) in lines {
        let fx: FixtureStep = serde_json::from_str(raw).map_err(at(line))?;
        let to_fixture = |message: String| Error::Fixture { line, message };
        if fx.step_index as usize != steps.len() {
            return Err(to_fixture(format!(
                "step index {} out of sequence, expected {}",
                fx.step_index,
                steps.len()
            )));
        }
        let attention = flatten(fx.attention, manifest.n_visual, "attention").map_err(to_fixture)?;
        let text_attention = match (fx.text_attention, manifest.text_len()) {
            (Some(t), Some(n)) => Some(flatten(t, n, "text attention").map_err(to_fixture)?),
            (None, None) => None,
            (Some(_), None) => return Err(to_fixture("manifest declares no text slice".into())),
            (None, Some(_)) => return Err(to_fixture("missing text_attention".into())),
        };
        let step = StepRecord {
            step_index: fx.step_index,
            attention,
            text_attention,
            token_ids: fx.token_ids,
            final_logits: fx.final_logits,
            layer_logits: fx.layer_logits,
            layer_pi_max: fx.layer_pi_max,
            model_greedy_token: fx.model_greedy_token,
        };
        step.check_shape(&manifest).map_err(|e| to_fixture(e.to_string()))?;
        steps.push(step);
    }
    if steps.len() != manifest.step_count {
        return Err(Error::StepCountMismatch {
            expected: manifest.step_count,
            found: steps.len().to_string(),
        });
    }
    Ok(Trace { manifest, steps })
}
