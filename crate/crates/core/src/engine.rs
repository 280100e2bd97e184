//! Trace replay: per-step layer scoring, selection, and remapped greedy choice.
//!
//! The replay visits each step record exactly once, in order. Scoring never
//! depends on the decode mode, so energy, mass and entropy columns agree
//! between a baseline run and a remapped run over the same trace.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::energy::{EnergyBasis, SpectralKernel};
use crate::error::{Error, Result};
use crate::remap::{greedy_token, softmax, RemapConfig, Remapper};
use crate::select::{score_layers_with, select_by_signal, CandidateLayerSet, Direction, Signal};
use crate::trace::{StepRecord, TraceManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Final-layer greedy.
    Baseline,
    /// Energy-selected peak / minimum layers with the closed-form remap.
    #[default]
    Lascd,
    /// Remap with layers picked by another score. The contrast layer takes
    /// `direction`, the correction layer the opposite.
    Ablation { signal: Signal, direction: Direction },
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::Baseline => "baseline",
            DecodeMode::Lascd => "lascd",
            DecodeMode::Ablation { .. } => "ablation",
        }
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(DecodeMode::Baseline),
            "lascd" => Ok(DecodeMode::Lascd),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodePolicy {
    pub mode: DecodeMode,
    pub remap: RemapConfig,
    pub candidates: CandidateLayerSet,
    pub kernel: SpectralKernel,
    pub energy_basis: EnergyBasis,
}

impl DecodePolicy {
    pub fn baseline() -> Self {
        Self {
            mode: DecodeMode::Baseline,
            ..Self::default()
        }
    }

    /// Signal and direction used to pick the contrast layer.
    pub fn selection(&self) -> (Signal, Direction) {
        match self.mode {
            DecodeMode::Ablation { signal, direction } => (signal, direction),
            _ => (Signal::Energy, Direction::Max),
        }
    }

    /// Checks the policy against a trace before anything is replayed.
    pub fn validate(&self, manifest: &TraceManifest) -> Result<()> {
        self.remap.validate()?;
        for &layer in self.candidates.layers() {
            if manifest.layer_position(layer).is_none() {
                return Err(Error::IncompleteTrace { layer });
            }
        }
        if manifest.grid.is_none()
            && matches!(self.kernel, SpectralKernel::Sobel | SpectralKernel::LoG(_))
        {
            return Err(Error::Config(format!(
                "kernel {} needs a grid but the trace declares none",
                self.kernel
            )));
        }
        if self.selection().0 == Signal::TextEnergy && !manifest.has_text_slice {
            return Err(Error::FeatureUnavailable(
                "text-energy selection needs a trace with text slices".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub energy: f64,
    pub mass: f64,
    pub entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_energy: Option<f64>,
    /// Sparse-renormalized probabilities of the watch tokens at this layer.
    pub watch_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub layers: Vec<LayerDiagnostics>,
    pub peak_layer: usize,
    pub gt_layer: usize,
    pub beta_eff: f64,
    pub chosen: u32,
    pub baseline: u32,
    pub model_greedy_token: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRun {
    pub tokens: Vec<u32>,
    pub baseline_tokens: Vec<u32>,
    pub model_greedy_tokens: Vec<u32>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl DecodeRun {
    /// Steps where the policy's token differs from final-layer greedy.
    pub fn divergence_steps(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.baseline_tokens)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }

    /// Steps whose peak and minimum layers coincide.
    pub fn coincident_steps(&self) -> Vec<usize> {
        self.diagnostics
            .iter()
            .filter(|d| d.peak_layer == d.gt_layer)
            .map(|d| d.step)
            .collect()
    }
}

/// Sparse softmax per layer, one row per entry of `layers`, one column per watch id.
pub fn per_layer_token_probs(
    manifest: &TraceManifest,
    step: &StepRecord,
    layers: &[usize],
    watch_ids: &[u32],
) -> Result<Vec<Vec<f64>>> {
    let columns = watch_positions(step, watch_ids)?;
    layers
        .iter()
        .map(|&layer| {
            let pos = manifest
                .layer_position(layer)
                .ok_or(Error::IncompleteTrace { layer })?;
            let logits: Vec<f64> = step.layer_logits[pos].iter().map(|&v| f64::from(v)).collect();
            let probs = softmax(&logits)?;
            Ok(columns.iter().map(|&c| probs[c]).collect())
        })
        .collect()
}

fn watch_positions(step: &StepRecord, watch_ids: &[u32]) -> Result<Vec<usize>> {
    watch_ids
        .iter()
        .map(|&id| {
            step.token_ids.binary_search(&id).map_err(|_| {
                Error::TraceContract(format!(
                    "watch token {id} is not among the exported ids of step {}",
                    step.step_index
                ))
            })
        })
        .collect()
}

/// Replays `steps` once under `policy`.
pub fn run_decode<I>(
    manifest: &TraceManifest,
    steps: I,
    policy: &DecodePolicy,
    watch_ids: &[u32],
) -> Result<DecodeRun>
where
    I: IntoIterator<Item = Result<StepRecord>>,
{
    policy.validate(manifest)?;
    let layout = manifest.layout()?;
    let (signal, direction) = policy.selection();
    let want_text = signal == Signal::TextEnergy;
    let mut remapper = Remapper::default();
    let mut run = DecodeRun {
        tokens: Vec::new(),
        baseline_tokens: Vec::new(),
        model_greedy_tokens: Vec::new(),
        diagnostics: Vec::new(),
    };

    for step in steps {
        let step = step?;
        let mut visual = BTreeMap::new();
        let mut text = BTreeMap::new();
        for &layer in policy.candidates.layers() {
            visual.insert(layer, step.attention_slice(manifest, layer)?);
            if want_text {
                if let Some(t) = step.text_slice(manifest, layer)? {
                    text.insert(layer, t);
                }
            }
        }
        let profile = score_layers_with(
            &visual,
            want_text.then_some(&text),
            &layout,
            &policy.kernel,
            &policy.candidates,
            policy.energy_basis,
        )?;
        let peak_layer = select_by_signal(&profile, signal, direction)?;
        let gt_layer = select_by_signal(&profile, signal, direction.opposite())?;

        let final_view = step.final_view(manifest)?;
        let baseline = greedy_token(&final_view);
        let (chosen, beta_eff) = match policy.mode {
            DecodeMode::Baseline => (baseline, 0.0),
            DecodeMode::Lascd | DecodeMode::Ablation { .. } => {
                let peak = step.layer_view(manifest, peak_layer)?;
                let gt = step.layer_view(manifest, gt_layer)?;
                let chosen = remapper.compose(&final_view, &peak, &gt, &policy.remap)?;
                (chosen, remapper.beta_eff())
            }
        };

        let probs = per_layer_token_probs(manifest, &step, policy.candidates.layers(), watch_ids)?;
        let layers = profile
            .records()
            .iter()
            .zip(probs)
            .map(|(r, watch_probs)| LayerDiagnostics {
                layer: r.layer,
                energy: r.energy,
                mass: r.mass,
                entropy: r.entropy,
                text_energy: r.text_energy,
                watch_probs,
            })
            .collect();

        run.tokens.push(chosen);
        run.baseline_tokens.push(baseline);
        run.model_greedy_tokens.push(step.model_greedy_token);
        run.diagnostics.push(StepDiagnostics {
            step: step.step_index as usize,
            layers,
            peak_layer,
            gt_layer,
            beta_eff,
            chosen,
            baseline,
            model_greedy_token: step.model_greedy_token,
        });
    }
    Ok(run)
}

/// Echo of the effective configuration, written into the decode summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub mode: String,
    /// Replay only supports greedy choice.
    pub decoding: &'static str,
    pub alpha: f64,
    pub beta: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub mask_basis: String,
    pub layers: String,
    pub kernel: String,
    pub signal: String,
    pub direction: String,
    pub energy_basis: String,
    pub watch_tokens: Vec<u32>,
}

impl ConfigEcho {
    pub fn new(policy: &DecodePolicy, watch_ids: &[u32]) -> Self {
        let (signal, direction) = policy.selection();
        Self {
            mode: policy.mode.name().to_string(),
            decoding: "greedy",
            alpha: policy.remap.alpha,
            beta: policy.remap.beta,
            top_k: policy.remap.top_k,
            top_p: policy.remap.top_p,
            mask_basis: policy.remap.mask_basis.name().to_string(),
            layers: policy.candidates.to_string(),
            kernel: policy.kernel.name().to_string(),
            signal: signal.name().to_string(),
            direction: direction.name().to_string(),
            energy_basis: policy.energy_basis.name().to_string(),
            watch_tokens: watch_ids.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeSummary {
    pub tokens: Vec<u32>,
    pub baseline_tokens: Vec<u32>,
    pub model_greedy_tokens: Vec<u32>,
    pub divergence_steps: Vec<usize>,
    /// Steps whose peak and minimum layers coincide.
    pub peak_equals_gt_steps: Vec<usize>,
    pub config: ConfigEcho,
    pub trace_digest: String,
    /// Energies were computed on head-averaged maps.
    pub head_averaged: bool,
}

impl DecodeSummary {
    pub fn new(run: &DecodeRun, manifest: &TraceManifest, config: ConfigEcho, trace_digest: String) -> Self {
        Self {
            tokens: run.tokens.clone(),
            baseline_tokens: run.baseline_tokens.clone(),
            model_greedy_tokens: run.model_greedy_tokens.clone(),
            divergence_steps: run.divergence_steps(),
            peak_equals_gt_steps: run.coincident_steps(),
            config,
            trace_digest,
            head_averaged: manifest.head_averaged,
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// One row per (step, candidate layer).
pub fn write_diagnostics_csv<W: Write>(
    diagnostics: &[StepDiagnostics],
    watch_ids: &[u32],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["step", "layer", "energy", "mass", "entropy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(watch_ids.iter().map(|id| format!("p_{id}")));
    header.extend(
        ["is_peak", "is_gt", "chosen", "baseline", "beta_eff", "peak_eq_gt", "prob_basis"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for d in diagnostics {
        for l in &d.layers {
            let mut row = vec![
                d.step.to_string(),
                l.layer.to_string(),
                fmt_f64(l.energy),
                fmt_f64(l.mass),
                fmt_f64(l.entropy),
            ];
            row.extend(l.watch_probs.iter().map(|&p| fmt_f64(p)));
            row.extend([
                u8::from(l.layer == d.peak_layer).to_string(),
                u8::from(l.layer == d.gt_layer).to_string(),
                d.chosen.to_string(),
                d.baseline.to_string(),
                fmt_f64(d.beta_eff),
                u8::from(d.peak_layer == d.gt_layer).to_string(),
                "sparse".to_string(),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_diagnostics_csv(diagnostics: &[StepDiagnostics], watch_ids: &[u32], path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_diagnostics_csv(diagnostics, watch_ids, file)
}

/// Per-layer score columns only, no decoding columns.
pub fn write_analysis_csv<W: Write>(
    diagnostics: &[StepDiagnostics],
    watch_ids: &[u32],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["step", "layer", "energy", "mass", "entropy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(watch_ids.iter().map(|id| format!("p_{id}")));
    header.push("prob_basis".into());
    w.write_record(&header)?;
    for d in diagnostics {
        for l in &d.layers {
            let mut row = vec![
                d.step.to_string(),
                l.layer.to_string(),
                fmt_f64(l.energy),
                fmt_f64(l.mass),
                fmt_f64(l.entropy),
            ];
            row.extend(l.watch_probs.iter().map(|&p| fmt_f64(p)));
            row.push("sparse".into());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{read_ndjson_fixture, Trace, FORMAT_VERSION};
    use std::cell::Cell;

    fn manifest(steps: usize, layers: Vec<usize>) -> TraceManifest {
        TraceManifest {
            format_version: FORMAT_VERSION,
            model_id: "toy".into(),
            num_layers: 32,
            heads: 1,
            n_visual: 4,
            grid: Some((2, 2)),
            n_text: None,
            vocab_size: 100,
            exported_layers: layers,
            candidate_token_count: 2,
            step_count: steps,
            visual_token_span: (2, 6),
            has_text_slice: false,
            token_strings: None,
            watch_token_ids: vec![],
            head_averaged: false,
            grid_omitted_reason: None,
        }
    }

    /// One step: layer 12 is spiky (peak), layer 20 uniform (minimum).
    fn flip_fixture() -> Trace {
        let m = serde_json::to_string(&manifest(1, vec![12, 20])).unwrap();
        let step = r#"{"step_index":0,"attention":[[[0.8,0.0,0.0,0.0]],[[0.1,0.1,0.1,0.1]]],"token_ids":[5,17],"final_logits":[2.0,1.9],"layer_logits":[[5.0,0.0],[1.0,1.0]],"layer_pi_max":[0.9,0.5],"model_greedy_token":5}"#;
        read_ndjson_fixture(&format!("{m}\n{step}\n")).unwrap()
    }

    fn policy(alpha: f64, beta: f64) -> DecodePolicy {
        DecodePolicy {
            remap: RemapConfig {
                alpha,
                beta,
                top_k: 10,
                top_p: 1.0,
                ..RemapConfig::default()
            },
            candidates: CandidateLayerSet::new(vec![12, 20]).unwrap(),
            ..DecodePolicy::default()
        }
    }

    #[test]
    fn remap_flips_the_hand_example() {
        let t = flip_fixture();
        let run = run_decode(&t.manifest, t.steps.iter().cloned().map(Ok), &policy(0.5, 0.0), &[]).unwrap();
        assert_eq!(run.diagnostics[0].peak_layer, 12);
        assert_eq!(run.diagnostics[0].gt_layer, 20);
        assert_eq!(run.tokens, vec![17]);
        assert_eq!(run.baseline_tokens, vec![5]);
        assert_eq!(run.divergence_steps(), vec![0]);

        let base = DecodePolicy {
            mode: DecodeMode::Baseline,
            ..policy(0.5, 0.0)
        };
        let b = run_decode(&t.manifest, t.steps.iter().cloned().map(Ok), &base, &[]).unwrap();
        assert_eq!(b.tokens, vec![5]);
        for (x, y) in b.diagnostics[0].layers.iter().zip(&run.diagnostics[0].layers) {
            assert_eq!((x.energy, x.mass, x.entropy), (y.energy, y.mass, y.entropy));
        }
    }

    #[test]
    fn zero_coefficients_reduce_to_baseline() {
        let t = flip_fixture();
        let run = run_decode(&t.manifest, t.steps.iter().cloned().map(Ok), &policy(0.0, 0.0), &[]).unwrap();
        assert_eq!(run.tokens, run.baseline_tokens);
    }

    #[test]
    fn constant_profiles_pick_the_lowest_layer() {
        let m = serde_json::to_string(&manifest(2, vec![3, 5, 9])).unwrap();
        let row = "[[0.2,0.3,0.1,0.1]]";
        let step = |i: usize| {
            format!(
                r#"{{"step_index":{i},"attention":[{row},{row},{row}],"token_ids":[1,2],"final_logits":[0.5,0.25],"layer_logits":[[0,0],[0,0],[0,0]],"layer_pi_max":[0.5,0.5,0.5],"model_greedy_token":1}}"#
            )
        };
        let t = read_ndjson_fixture(&format!("{m}\n{}\n{}", step(0), step(1))).unwrap();
        let p = DecodePolicy {
            candidates: CandidateLayerSet::new(vec![3, 5, 9]).unwrap(),
            ..DecodePolicy::default()
        };
        let run = run_decode(&t.manifest, t.steps.into_iter().map(Ok), &p, &[]).unwrap();
        for d in &run.diagnostics {
            assert_eq!((d.peak_layer, d.gt_layer), (3, 3));
        }
        assert_eq!(run.coincident_steps(), vec![0, 1]);
    }

    #[test]
    fn missing_candidate_fails_before_reading() {
        let t = flip_fixture();
        let reads = Cell::new(0);
        let steps = t.steps.iter().cloned().map(|s| {
            reads.set(reads.get() + 1);
            Ok(s)
        });
        let p = DecodePolicy {
            candidates: CandidateLayerSet::new(vec![12, 13]).unwrap(),
            ..policy(0.1, 0.0)
        };
        assert!(matches!(
            run_decode(&t.manifest, steps, &p, &[]),
            Err(Error::IncompleteTrace { layer: 13 })
        ));
        assert_eq!(reads.get(), 0);
    }

    #[test]
    fn each_step_is_read_once() {
        let t = flip_fixture();
        let reads = Cell::new(0);
        let steps = t.steps.iter().cloned().map(|s| {
            reads.set(reads.get() + 1);
            Ok(s)
        });
        run_decode(&t.manifest, steps, &policy(0.1, 0.0), &[]).unwrap();
        assert_eq!(reads.get(), t.steps.len());
    }

    #[test]
    fn watch_probabilities() {
        let t = flip_fixture();
        let probs = per_layer_token_probs(&t.manifest, &t.steps[0], &[12, 20], &[5, 17]).unwrap();
        // softmax(5, 0) and the uniform layer
        let e = (-5f64).exp();
        assert!((probs[0][0] - 1.0 / (1.0 + e)).abs() < 1e-7);
        assert_eq!(probs[1], vec![0.5, 0.5]);
        assert!(matches!(
            per_layer_token_probs(&t.manifest, &t.steps[0], &[12], &[6]),
            Err(Error::TraceContract(m)) if m.contains('6')
        ));

        let mut m = manifest(1, vec![12]);
        m.candidate_token_count = 4;
        let step = StepRecord {
            step_index: 0,
            attention: vec![vec![0.25; 4]],
            text_attention: None,
            token_ids: vec![0, 1, 2, 3],
            final_logits: vec![3.0, 2.0, 1.0, 0.0],
            layer_logits: vec![vec![3.0, 2.0, 1.0, 0.0]],
            layer_pi_max: vec![0.6],
            model_greedy_token: 0,
        };
        let probs = per_layer_token_probs(&m, &step, &[12], &[0, 1, 2, 3]).unwrap();
        let z: f64 = (0..4).map(|k| (-(k as f64)).exp()).sum();
        for (k, p) in probs[0].iter().enumerate() {
            assert!((p - (-(k as f64)).exp() / z).abs() < 1e-6);
        }
        let mut flat = step.clone();
        flat.layer_logits = vec![vec![0.0; 4]];
        assert_eq!(per_layer_token_probs(&m, &flat, &[12], &[2]).unwrap(), vec![vec![0.25]]);
        let mut spike = step;
        spike.layer_logits = vec![vec![0.0, 80.0, 0.0, 0.0]];
        assert!(per_layer_token_probs(&m, &spike, &[12], &[1]).unwrap()[0][0] > 1.0 - 1e-12);
    }

    #[test]
    fn csv_layout_is_stable() {
        let t = flip_fixture();
        let run = run_decode(&t.manifest, t.steps.iter().cloned().map(Ok), &policy(0.5, 0.0), &[5, 17]).unwrap();
        let mut buf = Vec::new();
        write_diagnostics_csv(&run.diagnostics, &[5, 17], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,layer,energy,mass,entropy,p_5,p_17,is_peak,is_gt,chosen,baseline,beta_eff,peak_eq_gt,prob_basis"
        );
        assert_eq!(text.lines().count(), 3);
        assert!(lines.next().unwrap().starts_with("0,12,"));
    }

    #[test]
    fn text_energy_ablation_requires_text_slices() {
        let t = flip_fixture();
        let p = DecodePolicy {
            mode: DecodeMode::Ablation {
                signal: Signal::TextEnergy,
                direction: Direction::Max,
            },
            ..policy(0.1, 0.0)
        };
        assert!(matches!(
            run_decode(&t.manifest, t.steps.iter().cloned().map(Ok), &p, &[]),
            Err(Error::FeatureUnavailable(_))
        ));
    }

    #[test]
    fn beta_requires_pi_max_semantics() {
        let t = flip_fixture();
        let run = run_decode(&t.manifest, t.steps.iter().cloned().map(Ok), &policy(0.1, 0.6), &[]).unwrap();
        assert!((run.diagnostics[0].beta_eff - 0.6 * 0.5).abs() < 1e-7);
    }
}
