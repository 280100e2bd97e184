//! Binary trace encoding.
//!
//! ```text
//! "LSCD" | version: u32 | manifest_len: u64 | manifest: UTF-8 JSON
//! step*: step_index: u32
//!        attention: f32 × (heads·n_visual) per exported layer
//!        text_attention: f32 × (heads·n_text) per exported layer, if has_text_slice
//!        M: u32 | token_ids: u32 × M | final_logits: f32 × M
//!        layer_logits: f32 × M per exported layer
//!        layer_pi_max: f32 per exported layer
//!        model_greedy_token: u32
//! ```
//!
//! Everything is little-endian.

use std::io::{self, Read, Write};

use super::{StepRecord, TraceManifest, FORMAT_VERSION, MAGIC};
use crate::error::{Error, Result};

/// Refuse manifests above this size rather than allocating blindly.
const MAX_MANIFEST_BYTES: u64 = 256 << 20;

/// Streaming writer. Steps must arrive in order and match the manifest.
pub struct TraceWriter<W: Write> {
    inner: W,
    manifest: TraceManifest,
    written: usize,
    buf: Vec<u8>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut inner: W, manifest: TraceManifest) -> Result<Self> {
        manifest.validate()?;
        let json = serde_json::to_vec(&manifest)?;
        inner.write_all(MAGIC)?;
        inner.write_all(&FORMAT_VERSION.to_le_bytes())?;
        inner.write_all(&(json.len() as u64).to_le_bytes())?;
        inner.write_all(&json)?;
        Ok(Self {
            inner,
            manifest,
            written: 0,
            buf: Vec::new(),
        })
    }

    pub fn write_step(&mut self, step: &StepRecord) -> Result<()> {
        if self.written >= self.manifest.step_count {
            return Err(Error::StepCountMismatch {
                expected: self.manifest.step_count,
                found: format!("at least {}", self.written + 1),
            });
        }
        check_step(&self.manifest, step, self.written)?;
        self.buf.clear();
        encode_step(step, &mut self.buf);
        self.inner.write_all(&self.buf)?;
        self.written += 1;
        Ok(())
    }

    /// Checks the step count and flushes.
    pub fn finish(mut self) -> Result<W> {
        if self.written != self.manifest.step_count {
            return Err(Error::StepCountMismatch {
                expected: self.manifest.step_count,
                found: self.written.to_string(),
            });
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

fn check_step(manifest: &TraceManifest, step: &StepRecord, expected_index: usize) -> Result<()> {
    if step.step_index as usize != expected_index {
        return Err(Error::Format(format!(
            "step index {} out of sequence, expected {expected_index}",
            step.step_index
        )));
    }
    step.check_shape(manifest)?;
    step.check_contents(manifest)
}

/// Validates the whole trace, then writes it. Nothing is written on failure.
pub fn write_trace<W: Write>(inner: W, manifest: &TraceManifest, steps: &[StepRecord]) -> Result<W> {
    manifest.validate()?;
    if steps.len() != manifest.step_count {
        return Err(Error::StepCountMismatch {
            expected: manifest.step_count,
            found: steps.len().to_string(),
        });
    }
    for (i, s) in steps.iter().enumerate() {
        check_step(manifest, s, i)?;
    }
    let mut writer = TraceWriter::new(inner, manifest.clone())?;
    for s in steps {
        writer.write_step(s)?;
    }
    writer.finish()
}

pub fn trace_to_bytes(manifest: &TraceManifest, steps: &[StepRecord]) -> Result<Vec<u8>> {
    write_trace(Vec::new(), manifest, steps)
}

fn encode_step(step: &StepRecord, out: &mut Vec<u8>) {
    let put_f32s = |out: &mut Vec<u8>, vs: &[f32]| {
        for v in vs {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    out.extend_from_slice(&step.step_index.to_le_bytes());
    for block in &step.attention {
        put_f32s(out, block);
    }
    if let Some(text) = &step.text_attention {
        for block in text {
            put_f32s(out, block);
        }
    }
    out.extend_from_slice(&(step.token_ids.len() as u32).to_le_bytes());
    for id in &step.token_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    put_f32s(out, &step.final_logits);
    for block in &step.layer_logits {
        put_f32s(out, block);
    }
    put_f32s(out, &step.layer_pi_max);
    out.extend_from_slice(&step.model_greedy_token.to_le_bytes());
}

/// Streaming reader: holds the manifest plus at most one step in memory.
pub struct TraceReader<R: Read> {
    inner: R,
    manifest: TraceManifest,
    next: usize,
    done: bool,
    buf: Vec<u8>,
}

/// Reads the header and returns a reader positioned at the first step.
pub fn read_trace<R: Read>(inner: R) -> Result<TraceReader<R>> {
    TraceReader::open(inner)
}

impl<R: Read> TraceReader<R> {
    pub fn open(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        fill(&mut inner, &mut magic, "magic bytes")?;
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = read_u32(&mut inner, "format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut len = [0u8; 8];
        fill(&mut inner, &mut len, "manifest length")?;
        let len = u64::from_le_bytes(len);
        if len > MAX_MANIFEST_BYTES {
            return Err(Error::Format(format!("manifest length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        fill(&mut inner, &mut json, "manifest")?;
        let manifest: TraceManifest = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("manifest JSON: {e}")))?;
        manifest.validate()?;
        if manifest.format_version != version {
            return Err(Error::Format(format!(
                "header version {version} disagrees with manifest version {}",
                manifest.format_version
            )));
        }
        Ok(Self {
            inner,
            manifest,
            next: 0,
            done: false,
            buf: Vec::new(),
        })
    }

    pub fn manifest(&self) -> &TraceManifest {
        &self.manifest
    }

    fn read_step(&mut self) -> Result<Option<StepRecord>> {
        let m = &self.manifest;
        if self.next == m.step_count {
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe)? {
                0 => Ok(None),
                _ => Err(Error::StepCountMismatch {
                    expected: m.step_count,
                    found: "trailing bytes after the last step".into(),
                }),
            };
        }
        let mut first = [0u8; 4];
        let got = read_some(&mut self.inner, &mut first)?;
        if got == 0 {
            return Err(Error::StepCountMismatch {
                expected: m.step_count,
                found: self.next.to_string(),
            });
        }
        if got < 4 {
            return Err(Error::Truncated(format!("step {} index", self.next)));
        }
        let step_index = u32::from_le_bytes(first);
        if step_index as usize != self.next {
            return Err(Error::Format(format!(
                "step index {step_index} out of sequence, expected {}",
                self.next
            )));
        }
        let ctx = |what: &str| format!("step {step_index} {what}");
        let n_layers = m.exported_layers.len();
        let block = m.attention_block_len();
        let mut attention = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            attention.push(read_f32s(&mut self.inner, &mut self.buf, block, &ctx("attention"))?);
        }
        let text_attention = match m.text_len() {
            Some(n) => {
                let mut blocks = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    blocks.push(read_f32s(
                        &mut self.inner,
                        &mut self.buf,
                        m.heads * n,
                        &ctx("text attention"),
                    )?);
                }
                Some(blocks)
            }
            None => None,
        };
        let count = read_u32(&mut self.inner, &ctx("token count"))? as usize;
        if count != m.candidate_token_count {
            return Err(Error::Format(format!(
                "step {step_index}: token count {count}, manifest declares {}",
                m.candidate_token_count
            )));
        }
        let token_ids = read_u32s(&mut self.inner, &mut self.buf, count, &ctx("token ids"))?;
        let final_logits = read_f32s(&mut self.inner, &mut self.buf, count, &ctx("final logits"))?;
        let mut layer_logits = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layer_logits.push(read_f32s(&mut self.inner, &mut self.buf, count, &ctx("layer logits"))?);
        }
        let layer_pi_max = read_f32s(&mut self.inner, &mut self.buf, n_layers, &ctx("pi_max"))?;
        let model_greedy_token = read_u32(&mut self.inner, &ctx("greedy token"))?;
        let step = StepRecord {
            step_index,
            attention,
            text_attention,
            token_ids,
            final_logits,
            layer_logits,
            layer_pi_max,
            model_greedy_token,
        };
        step.check_shape(m)?;
        self.next += 1;
        Ok(Some(step))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<StepRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_step() {
            Ok(Some(step)) => Some(Ok(step)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_some(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

fn fill(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    if read_some(r, buf)? < buf.len() {
        return Err(Error::Truncated(what.to_string()));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, buf: &mut Vec<u8>, n: usize, what: &str) -> Result<Vec<f32>> {
    buf.resize(n * 4, 0);
    fill(r, buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u32s(r: &mut impl Read, buf: &mut Vec<u8>, n: usize, what: &str) -> Result<Vec<u32>> {
    buf.resize(n * 4, 0);
    fill(r, buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
