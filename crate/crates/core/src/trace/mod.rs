//! Decoding-trace container shared between exporters and the replay engine.
//!
//! A trace is a JSON manifest followed by one record per generated token.
//! Two encodings exist: the little-endian binary stream in [`binary`] and a
//! line-delimited JSON form in [`ndjson`] for hand-written fixtures. Both
//! produce the same in-memory [`TraceManifest`] and [`StepRecord`] values.

pub mod binary;
pub mod ndjson;
pub mod validate;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy::{AttentionSlice, VisualLayout};
use crate::error::{Error, Result};
use crate::remap::LogitView;

pub use binary::{read_trace, write_trace, TraceReader, TraceWriter};
pub use ndjson::read_ndjson_fixture;
pub use validate::{validate_trace, CheckResult, ValidationReport};

pub const MAGIC: &[u8; 4] = b"LSCD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub format_version: u32,
    pub model_id: String,
    pub num_layers: usize,
    pub heads: usize,
    pub n_visual: usize,
    #[serde(default)]
    pub grid: Option<(usize, usize)>,
    #[serde(default)]
    pub n_text: Option<usize>,
    pub vocab_size: usize,
    pub exported_layers: Vec<usize>,
    pub candidate_token_count: usize,
    pub step_count: usize,
    /// Half-open `[start, end)` position of the visual tokens in the input sequence.
    pub visual_token_span: (usize, usize),
    pub has_text_slice: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_strings: Option<BTreeMap<u32, String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub watch_token_ids: Vec<u32>,
    /// Attention was averaged over heads before export (`heads` is then 1).
    #[serde(default, skip_serializing_if = "is_false")]
    pub head_averaged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_omitted_reason: Option<String>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl TraceManifest {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Format(format!("manifest: {msg}")));
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.format_version));
        }
        if self.heads == 0 || self.n_visual == 0 {
            return fail("heads and n_visual must be positive".into());
        }
        if self.candidate_token_count == 0 {
            return fail("candidate_token_count must be at least 1".into());
        }
        if self.exported_layers.is_empty() {
            return fail("no exported layers".into());
        }
        if self.exported_layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail("exported_layers must be strictly ascending".into());
        }
        if let Some(&l) = self.exported_layers.iter().find(|&&l| l >= self.num_layers) {
            return fail(format!("exported layer {l} outside [0, {})", self.num_layers));
        }
        let (start, end) = self.visual_token_span;
        if end < start || end - start != self.n_visual {
            return fail(format!(
                "visual_token_span [{start}, {end}) does not cover n_visual = {}",
                self.n_visual
            ));
        }
        if let Some((r, c)) = self.grid {
            if r == 0 || c == 0 || r * c != self.n_visual {
                return fail(format!("grid {r}×{c} does not tile n_visual = {}", self.n_visual));
            }
        }
        match (self.has_text_slice, self.n_text) {
            (true, Some(n)) if n > 0 => {}
            (false, None) | (false, Some(_)) => {}
            _ => return fail("has_text_slice requires a positive n_text".into()),
        }
        if self.head_averaged && self.heads != 1 {
            return fail("head_averaged traces must declare heads = 1".into());
        }
        if let Some(&t) = self.watch_token_ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return fail(format!("watch token {t} outside vocabulary"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<VisualLayout> {
        VisualLayout::new(self.n_visual, self.grid)
    }

    /// Position of `layer` among the exported layers.
    pub fn layer_position(&self, layer: usize) -> Option<usize> {
        self.exported_layers.binary_search(&layer).ok()
    }

    pub fn text_len(&self) -> Option<usize> {
        if self.has_text_slice {
            self.n_text
        } else {
            None
        }
    }

    pub fn attention_block_len(&self) -> usize {
        self.heads * self.n_visual
    }

    /// Resolves a watch string through the manifest token table.
    pub fn token_id_for(&self, text: &str) -> Result<u32> {
        let table = self.token_strings.as_ref().ok_or_else(|| {
            Error::TraceContract("manifest has no token string table".into())
        })?;
        table
            .iter()
            .find(|(_, s)| s.as_str() == text)
            .map(|(&id, _)| id)
            .ok_or_else(|| Error::TraceContract(format!("token string {text:?} not in manifest table")))
    }
}

/// Everything exported for one generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_index: u32,
    /// One `heads × n_visual` block per exported layer.
    pub attention: Vec<Vec<f32>>,
    /// One `heads × n_text` block per exported layer, when the trace has text slices.
    pub text_attention: Option<Vec<Vec<f32>>>,
    pub token_ids: Vec<u32>,
    pub final_logits: Vec<f32>,
    /// One `M`-vector per exported layer.
    pub layer_logits: Vec<Vec<f32>>,
    pub layer_pi_max: Vec<f32>,
    pub model_greedy_token: u32,
}

impl StepRecord {
    /// Structural agreement with the manifest: block counts and sizes, finiteness.
    pub fn check_shape(&self, manifest: &TraceManifest) -> Result<()> {
        let step = self.step_index as usize;
        let n_layers = manifest.exported_layers.len();
        let bad = |what: String| Err(Error::Format(format!("step {step}: {what}")));
        if self.attention.len() != n_layers {
            return bad(format!("{} attention blocks for {n_layers} layers", self.attention.len()));
        }
        if let Some(b) = self.attention.iter().find(|b| b.len() != manifest.attention_block_len()) {
            return bad(format!(
                "attention block of {} values, expected {}",
                b.len(),
                manifest.attention_block_len()
            ));
        }
        match (&self.text_attention, manifest.text_len()) {
            (None, None) => {}
            (Some(blocks), Some(n)) => {
                if blocks.len() != n_layers || blocks.iter().any(|b| b.len() != manifest.heads * n) {
                    return bad("text attention blocks do not match heads × n_text".into());
                }
            }
            (Some(_), None) => return bad("unexpected text attention".into()),
            (None, Some(_)) => return bad("missing text attention".into()),
        }
        let m = manifest.candidate_token_count;
        if self.token_ids.len() != m {
            return bad(format!("{} token ids, manifest declares M = {m}", self.token_ids.len()));
        }
        if self.final_logits.len() != m {
            return bad(format!("{} final logits for M = {m}", self.final_logits.len()));
        }
        if self.layer_logits.len() != n_layers || self.layer_logits.iter().any(|l| l.len() != m) {
            return bad("per-layer logits do not match exported layers × M".into());
        }
        if self.layer_pi_max.len() != n_layers {
            return bad(format!("{} pi_max values for {n_layers} layers", self.layer_pi_max.len()));
        }
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        let step = self.step_index as usize;
        let scan = |field: &'static str, blocks: &[Vec<f32>]| -> Result<()> {
            let mut index = 0;
            for b in blocks {
                for v in b {
                    if !v.is_finite() {
                        return Err(Error::NonFinite { step, field, index });
                    }
                    index += 1;
                }
            }
            Ok(())
        };
        scan("attention", &self.attention)?;
        if let Some(t) = &self.text_attention {
            scan("text_attention", t)?;
        }
        scan("final_logits", std::slice::from_ref(&self.final_logits))?;
        scan("layer_logits", &self.layer_logits)?;
        scan("layer_pi_max", std::slice::from_ref(&self.layer_pi_max))
    }

    /// Semantic invariants beyond shape: sorted ids, greedy token exported,
    /// attention sub-distributions, pi_max range.
    pub fn check_contents(&self, manifest: &TraceManifest) -> Result<()> {
        let step = self.step_index;
        if self.token_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("step {step}: token ids not strictly sorted")));
        }
        if let Some(&t) = self.token_ids.iter().find(|&&t| t as usize >= manifest.vocab_size) {
            return Err(Error::Invalid(format!("step {step}: token id {t} outside vocabulary")));
        }
        if self.token_ids.binary_search(&self.model_greedy_token).is_err() {
            return Err(Error::Invalid(format!(
                "step {step}: greedy token {} not among exported ids",
                self.model_greedy_token
            )));
        }
        for &layer in &manifest.exported_layers {
            self.attention_slice(manifest, layer)?;
            if let Some(pos) = manifest.layer_position(layer) {
                let pi = self.layer_pi_max[pos];
                if !(pi > 0.0 && pi <= 1.0) {
                    return Err(Error::Invalid(format!(
                        "step {step}: pi_max {pi} of layer {layer} outside (0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn attention_slice(&self, manifest: &TraceManifest, layer: usize) -> Result<AttentionSlice> {
        let pos = manifest
            .layer_position(layer)
            .ok_or(Error::IncompleteTrace { layer })?;
        AttentionSlice::from_f32(layer, manifest.heads, manifest.n_visual, &self.attention[pos])
    }

    pub fn text_slice(&self, manifest: &TraceManifest, layer: usize) -> Result<Option<AttentionSlice>> {
        let (Some(blocks), Some(n)) = (&self.text_attention, manifest.text_len()) else {
            return Ok(None);
        };
        let pos = manifest
            .layer_position(layer)
            .ok_or(Error::IncompleteTrace { layer })?;
        AttentionSlice::from_f32(layer, manifest.heads, n, &blocks[pos]).map(Some)
    }

    /// Final-layer logits as a view; the final layer is `num_layers - 1`.
    pub fn final_view(&self, manifest: &TraceManifest) -> Result<LogitView> {
        LogitView::new(
            manifest.num_layers.saturating_sub(1),
            self.token_ids.clone(),
            self.final_logits.iter().map(|&v| f64::from(v)).collect(),
            None,
        )
    }

    pub fn layer_view(&self, manifest: &TraceManifest, layer: usize) -> Result<LogitView> {
        let pos = manifest
            .layer_position(layer)
            .ok_or(Error::IncompleteTrace { layer })?;
        LogitView::new(
            layer,
            self.token_ids.clone(),
            self.layer_logits[pos].iter().map(|&v| f64::from(v)).collect(),
            Some(f64::from(self.layer_pi_max[pos])),
        )
    }
}

/// A manifest and its steps, fully in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub manifest: TraceManifest,
    pub steps: Vec<StepRecord>,
}

/// Step stream over a trace file in either encoding.
pub type StepStream = Box<dyn Iterator<Item = Result<StepRecord>> + Send>;

/// Opens a trace file, sniffing the encoding from the first four bytes.
pub fn open_trace(path: &Path) -> Result<(TraceManifest, StepStream)> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 4];
    let n = read_up_to(&mut file, &mut head)?;
    drop(file);
    if n == 4 && &head == MAGIC {
        let reader = TraceReader::open(BufReader::new(File::open(path)?))?;
        let manifest = reader.manifest().clone();
        Ok((manifest, Box::new(reader)))
    } else {
        let text = std::fs::read_to_string(path)?;
        let trace = read_ndjson_fixture(&text)?;
        Ok((trace.manifest, Box::new(trace.steps.into_iter().map(Ok))))
    }
}

/// Loads a whole trace file.
pub fn load_trace(path: &Path) -> Result<Trace> {
    let (manifest, steps) = open_trace(path)?;
    let steps = steps.collect::<Result<Vec<_>>>()?;
    Ok(Trace { manifest, steps })
}

/// SHA-256 of the file bytes, lowercase hex.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut file = BufReader::new(File::open(path)?);
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}
