use std::fmt;
use std::path::Path;

use serde::Serialize;

use super::{open_trace, StepRecord, TraceManifest};
use crate::energy::SUBDISTRIBUTION_TOLERANCE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// First failure seen, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub path: String,
    pub steps_read: usize,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({} steps read)", self.path, self.steps_read)?;
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            match &c.detail {
                Some(d) => writeln!(f, "  [{status}] {}: {d}", c.name)?,
                None => writeln!(f, "  [{status}] {}", c.name)?,
            }
        }
        Ok(())
    }
}

const CHECKS: [&str; 9] = [
    "header",
    "step_structure",
    "step_count",
    "finite_payloads",
    "token_ids_sorted",
    "greedy_in_token_ids",
    "attention_nonnegative",
    "attention_subdistribution",
    "pi_max_range",
];

struct Tally(Vec<CheckResult>);

impl Tally {
    fn fail(&mut self, name: &str, detail: String) {
        let c = self
            .0
            .iter_mut()
            .find(|c| c.name == name)
            .expect("known check name");
        if c.passed {
            c.passed = false;
            c.detail = Some(detail);
        }
    }
}

/// Reads a trace file end to end and reports every check.
///
/// Only failing to open the file is an error; everything else lands in the report.
pub fn validate_trace(path: &Path) -> Result<ValidationReport> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("trace file {} not found", path.display()),
        )));
    }
    let mut tally = Tally(
        CHECKS
            .iter()
            .map(|&name| CheckResult {
                name,
                passed: true,
                detail: None,
            })
            .collect(),
    );
    let mut steps_read = 0;
    match open_trace(path) {
        Err(e) => tally.fail("header", e.to_string()),
        Ok((manifest, steps)) => {
            for step in steps {
                match step {
                    Ok(step) => {
                        steps_read += 1;
                        check_step(&manifest, &step, &mut tally);
                    }
                    Err(e) => {
                        let name = match &e {
                            Error::StepCountMismatch { .. } => "step_count",
                            Error::NonFinite { .. } => "finite_payloads",
                            Error::Fixture { message, .. } if message.contains("NaN") => "finite_payloads",
                            _ => "step_structure",
                        };
                        tally.fail(name, e.to_string());
                        break;
                    }
                }
            }
        }
    }
    Ok(ValidationReport {
        path: path.display().to_string(),
        steps_read,
        checks: tally.0,
    })
}

fn check_step(manifest: &TraceManifest, step: &StepRecord, tally: &mut Tally) {
    let s = step.step_index;
    if step.token_ids.windows(2).any(|w| w[0] >= w[1]) {
        tally.fail("token_ids_sorted", format!("step {s}"));
    }
    if !step.token_ids.contains(&step.model_greedy_token) {
        tally.fail(
            "greedy_in_token_ids",
            format!("step {s}: token {}", step.model_greedy_token),
        );
    }
    let n = manifest.n_visual;
    for (pos, block) in step.attention.iter().enumerate() {
        let layer = manifest.exported_layers[pos];
        for (head, row) in block.chunks_exact(n).enumerate() {
            if let Some(i) = row.iter().position(|&v| v < 0.0) {
                tally.fail(
                    "attention_nonnegative",
                    format!("step {s}, layer {layer}, head {head}, index {i}"),
                );
            }
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if sum > 1.0 + SUBDISTRIBUTION_TOLERANCE {
                tally.fail(
                    "attention_subdistribution",
                    format!("step {s}, layer {layer}, head {head}: visual sum {sum}"),
                );
            }
        }
    }
    for (pos, &pi) in step.layer_pi_max.iter().enumerate() {
        if !(pi > 0.0 && pi <= 1.0) {
            tally.fail(
                "pi_max_range",
                format!("step {s}, layer {}: {pi}", manifest.exported_layers[pos]),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::binary::trace_to_bytes;
    use crate::trace::fixtures::{manifest, step};

    #[test]
    fn clean_trace_passes_every_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lscd");
        std::fs::write(&path, trace_to_bytes(&manifest(2), &[step(0), step(1)]).unwrap()).unwrap();
        let report = validate_trace(&path).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.steps_read, 2);
        assert_eq!(report.checks.len(), CHECKS.len());
    }

    #[test]
    fn failures_are_reported_per_check() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(1);
        let bytes = trace_to_bytes(&m, &[step(0)]).unwrap();

        // Attention (0.5 → 1.5) and pi_max (0.75 → 1.5) bypass the writer's checks here.
        let mut bytes2 = bytes.clone();
        let header = bytes.len() - 32;
        bytes2[header + 4..header + 8].copy_from_slice(&1.5f32.to_le_bytes());
        bytes2[header + 24..header + 28].copy_from_slice(&1.5f32.to_le_bytes());
        let path = dir.path().join("bad.lscd");
        std::fs::write(&path, &bytes2).unwrap();
        let report = validate_trace(&path).unwrap();
        assert!(!report.check("attention_subdistribution").unwrap().passed);
        assert!(!report.check("pi_max_range").unwrap().passed);
        assert!(report.check("attention_nonnegative").unwrap().passed);
        assert_eq!(report.failures(), 2);

        let path = dir.path().join("short.lscd");
        std::fs::write(&path, &bytes[..bytes.len() - 32]).unwrap();
        let report = validate_trace(&path).unwrap();
        assert!(!report.check("step_count").unwrap().passed);

        let path = dir.path().join("garbage.lscd");
        std::fs::write(&path, b"not a trace").unwrap();
        assert!(!validate_trace(&path).unwrap().check("header").unwrap().passed);

        assert!(validate_trace(&dir.path().join("missing.lscd")).is_err());
    }
}
