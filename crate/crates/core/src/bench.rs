//! Timing of the per-step scoring and remap overhead.
//!
//! Replay has no model forward pass, so the measured time is only the added
//! cost of scoring candidate layers and remapping sparse logits.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::energy::{layer_energy, visual_mass, AttentionSlice, SpectralKernel, VisualLayout};
use crate::error::{Error, Result};
use crate::remap::{LogitView, RemapConfig, Remapper};

pub const MEASURED_QUANTITY: &str =
    "added per-step overhead only (layer scoring or logit remap); the model forward pass is not part of replay";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MachineInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub logical_cpus: usize,
    pub crate_version: &'static str,
}

impl MachineInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            crate_version: env!("CARGO_PKG_VERSION"),
        }
    }
}

/// Least-squares line and coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl LinearFit {
    pub fn of(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let intercept = my - slope * mx;
        let sse: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let e = y - (slope * x + intercept);
                e * e
            })
            .sum();
        let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
        Self {
            slope,
            intercept,
            r_squared,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    (percentile(&samples, 0.5), percentile(&samples, 0.95))
}

/// Synthetic candidate-layer slices for one configuration.
pub struct EnergyWorkload {
    slices: Vec<AttentionSlice>,
    layout: VisualLayout,
    kernel: SpectralKernel,
}

impl EnergyWorkload {
    /// Square grids are used when `n_visual` is a perfect square, otherwise the 1-D path.
    pub fn new(layers: usize, heads: usize, n_visual: usize, seed: u64) -> Result<Self> {
        if heads == 0 || n_visual == 0 {
            return Err(Error::Invalid("workload needs at least one head and one visual token".into()));
        }
        let side = (n_visual as f64).sqrt().round() as usize;
        let grid = (side * side == n_visual).then_some((side, side));
        let layout = VisualLayout::new(n_visual, grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slices = (0..layers)
            .map(|layer| {
                let mut values = Vec::with_capacity(heads * n_visual);
                for _ in 0..heads {
                    let row: Vec<f64> = (0..n_visual).map(|_| rng.random::<f64>()).collect();
                    let total: f64 = row.iter().sum::<f64>() * 1.25;
                    values.extend(row.iter().map(|v| v / total));
                }
                AttentionSlice::new(layer, heads, n_visual, values)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            slices,
            layout,
            kernel: SpectralKernel::Laplacian2D,
        })
    }

    /// Scores every layer once; allocation-free.
    pub fn run(&self) -> f64 {
        let mut acc = 0.0;
        for s in &self.slices {
            acc += layer_energy(s, &self.layout, &self.kernel).expect("workload is valid");
            acc += visual_mass(s);
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub layers: usize,
    pub heads: usize,
    pub n_visual: usize,
    /// |L|·H·N_v.
    pub work: usize,
    pub median_ns: f64,
    pub p95_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyBench {
    pub measured: &'static str,
    pub repetitions: usize,
    pub rows: Vec<EnergyRow>,
    /// Median time against |L|·H·N_v.
    pub fit: LinearFit,
    pub machine: MachineInfo,
}

/// Times layer scoring over the cartesian product of the given sizes.
pub fn bench_energy(
    layer_counts: &[usize],
    head_counts: &[usize],
    nv_list: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<EnergyBench> {
    if repetitions == 0 {
        return Err(Error::Invalid("repetitions must be positive".into()));
    }
    let mut configs = Vec::new();
    for &layers in layer_counts {
        for &heads in head_counts {
            for &n_visual in nv_list {
                configs.push(((layers, heads, n_visual), EnergyWorkload::new(layers, heads, n_visual, seed)?));
            }
        }
    }
    let samples = interleaved(&mut configs, repetitions, |w| {
        black_box(w.run());
        1
    });
    let rows: Vec<EnergyRow> = configs
        .iter()
        .zip(samples)
        .map(|(((layers, heads, n_visual), _), samples)| {
            let (median_ns, p95_ns) = summarize(samples);
            EnergyRow {
                layers: *layers,
                heads: *heads,
                n_visual: *n_visual,
                work: layers * heads * n_visual,
                median_ns,
                p95_ns,
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.work as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_ns).collect();
    Ok(EnergyBench {
        measured: MEASURED_QUANTITY,
        repetitions,
        fit: LinearFit::of(&xs, &ys),
        rows,
        machine: MachineInfo::current(),
    })
}

/// Random sparse views of width `m` sharing one id set.
pub struct RemapWorkload {
    final_view: LogitView,
    peak: LogitView,
    gt: LogitView,
    cfg: RemapConfig,
    remapper: Remapper,
}

impl RemapWorkload {
    pub fn new(m: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..m as u32).map(|i| i * 3 + 1).collect();
        let mut view = |layer: usize, pi: Option<f64>| {
            let values = (0..m).map(|_| rng.random_range(-8.0..8.0)).collect();
            LogitView::new(layer, ids.clone(), values, pi)
        };
        let final_view = view(31, None)?;
        let peak = view(12, Some(0.7))?;
        let gt = view(24, Some(0.4))?;
        let cfg = RemapConfig {
            alpha,
            beta: 0.2,
            ..RemapConfig::default()
        };
        cfg.validate()?;
        Ok(Self {
            final_view,
            peak,
            gt,
            cfg,
            remapper: Remapper::default(),
        })
    }

    pub fn width(&self) -> usize {
        self.final_view.len()
    }

    /// One remap; allocation-free after the first call.
    pub fn run(&mut self) -> u32 {
        self.remapper
            .compose(&self.final_view, &self.peak, &self.gt, &self.cfg)
            .expect("workload is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemapRow {
    pub m: usize,
    pub median_ns: f64,
    pub p95_ns: f64,
    pub median_ns_alpha_zero: f64,
    /// Median time with α = 0 over the time with α > 0.
    pub alpha_zero_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemapBench {
    pub measured: &'static str,
    pub repetitions: usize,
    pub rows: Vec<RemapRow>,
    /// Median time against M.
    pub fit: LinearFit,
    pub machine: MachineInfo,
}

// Each timed sample batches calls so that small M stays above timer resolution.
const REMAP_BATCH_TARGET: usize = 1 << 16;

// Runs a warm-up pass, then takes repetitions round-robin across configurations
// so clock drift during the sweep affects every configuration alike. `step`
// returns how many operations it ran; samples are per operation.
fn interleaved<K, W>(
    configs: &mut [(K, W)],
    repetitions: usize,
    mut step: impl FnMut(&mut W) -> usize,
) -> Vec<Vec<f64>> {
    let warm = Instant::now();
    while warm.elapsed().as_millis() < WARMUP_MS {
        for (_, w) in configs.iter_mut() {
            step(w);
        }
    }
    let mut samples = vec![Vec::with_capacity(repetitions); configs.len()];
    for _ in 0..repetitions {
        for (i, (_, w)) in configs.iter_mut().enumerate() {
            let t = Instant::now();
            let ops = step(w);
            samples[i].push(t.elapsed().as_nanos() as f64 / ops as f64);
        }
    }
    samples
}

const WARMUP_MS: u128 = 150;

/// Times one remap per sparse width, with and without the contrast term.
pub fn bench_remap(m_list: &[usize], repetitions: usize, seed: u64) -> Result<RemapBench> {
    if repetitions == 0 {
        return Err(Error::Invalid("repetitions must be positive".into()));
    }
    let mut configs = Vec::new();
    for &m in m_list {
        configs.push(((m, false), RemapWorkload::new(m, 0.1, seed)?));
        configs.push(((m, true), RemapWorkload::new(m, 0.0, seed)?));
    }
    let samples = interleaved(&mut configs, repetitions, |w| {
        let batch = (REMAP_BATCH_TARGET / w.width().max(1)).max(1);
        for _ in 0..batch {
            black_box(w.run());
        }
        batch
    });
    let medians: Vec<(f64, f64)> = samples.into_iter().map(summarize).collect();
    let rows: Vec<RemapRow> = m_list
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let (median_ns, p95_ns) = medians[2 * i];
            let median_ns_alpha_zero = medians[2 * i + 1].0;
            RemapRow {
                m,
                median_ns,
                p95_ns,
                median_ns_alpha_zero,
                alpha_zero_ratio: median_ns_alpha_zero / median_ns,
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_ns).collect();
    Ok(RemapBench {
        measured: MEASURED_QUANTITY,
        repetitions,
        fit: LinearFit::of(&xs, &ys),
        rows,
        machine: MachineInfo::current(),
    })
}

pub const DEFAULT_LAYER_COUNTS: [usize; 3] = [4, 8, 16];
pub const DEFAULT_HEAD_COUNTS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_NV_LIST: [usize; 3] = [256, 576, 1024];
pub const DEFAULT_M_LIST: [usize; 9] = [16, 32, 64, 128, 256, 512, 1024, 2048, 4096];
