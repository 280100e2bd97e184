use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use lascd_core::bench::{
    bench_energy, bench_remap, DEFAULT_HEAD_COUNTS, DEFAULT_LAYER_COUNTS, DEFAULT_M_LIST,
    DEFAULT_NV_LIST,
};
use lascd_core::engine::{
    emit_diagnostics_csv, run_decode, write_analysis_csv, ConfigEcho,
    DecodeMode, DecodePolicy, DecodeSummary,
};
use lascd_core::remap::{MaskBasis, RemapConfig};
use lascd_core::theory::{verify_theory, GridGraph, TheoryConfig};
use lascd_core::trace::{file_digest, open_trace, validate_trace, TraceManifest};
use lascd_core::{CandidateLayerSet, Direction, EnergyBasis, Error, ErrorClass, Signal, SpectralKernel};

const EXIT_VALIDATION: u8 = 2;
const EXIT_TRACE_CONTRACT: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Replay decoding traces with Laplacian-energy layer selection and contrastive logit remapping.
#[derive(Parser)]
#[command(name = "lascd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay one or more traces and write chosen tokens and per-layer diagnostics.
    Decode(DecodeArgs),
    /// Write per-layer energy, mass, entropy and watch-token probabilities without decoding.
    Analyze(AnalyzeArgs),
    /// Check the coherent-region bound, fragmentation scaling and noise amplification numerically.
    VerifyTheory(TheoryArgs),
    /// Time layer scoring and logit remapping.
    Bench(BenchArgs),
    /// Check a trace file against the format contract.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct ScoringArgs {
    /// Candidate layers: half-open range `a:b` or a list `8,12,20`.
    #[arg(long, default_value = "8:29")]
    layers: CandidateLayerSet,
    /// Spectral kernel: laplacian2d, laplacian1d, sobel or log.
    #[arg(long, default_value = "laplacian2d")]
    kernel: SpectralKernel,
    /// Energy basis: raw, or normalized by visual mass.
    #[arg(long, default_value = "raw")]
    energy_basis: EnergyBasis,
    /// Watch tokens for probability columns, as ids or strings from the manifest's token table
    /// (defaults to the manifest's watch list).
    #[arg(long, value_delimiter = ',')]
    watch_tokens: Vec<String>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Trace file (binary or NDJSON). Repeat for several traces.
    #[arg(long, required = true)]
    trace: Vec<PathBuf>,
    /// Contrast strength against the peak-energy layer.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Correction strength from the minimum-energy layer, gated by its top probability.
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Candidate mask size.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Nucleus mass of the candidate mask.
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    /// Layer score used for selection: energy, mass, entropy or text-energy.
    #[arg(long, default_value = "energy")]
    signal: Signal,
    /// Direction that picks the contrast layer; the correction layer takes the opposite.
    #[arg(long, default_value = "max")]
    direction: Direction,
    /// Decoding mode: lascd or baseline (final-layer greedy).
    #[arg(long, default_value = "lascd")]
    mode: DecodeMode,
    /// Logits the candidate mask is computed from: final or composed.
    #[arg(long, default_value = "final")]
    mask_basis: MaskBasis,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Summary JSON path (a directory with several traces). Printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Diagnostics CSV path (a directory with several traces).
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// CSV path. Printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    /// Grid for the noise-amplification check, `RxC`.
    #[arg(long, default_value = "16x16", value_parser = parse_grid)]
    grid: GridGraph,
    /// Monte Carlo samples.
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    /// Noise scale.
    #[arg(long, default_value_t = 0.005)]
    sigma: f64,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    /// Report path. Printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAYER_COUNTS)]
    layer_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HEAD_COUNTS)]
    head_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_NV_LIST)]
    nv: Vec<usize>,
    /// Sparse logit widths for the remap timing.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_M_LIST)]
    m: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    repetitions: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// CSV table path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON report path. Printed to stdout when absent.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn parse_grid(s: &str) -> Result<GridGraph, String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("grid {s:?} is not of the form RxC"))?;
    let r = r.trim().parse().map_err(|e| format!("grid rows: {e}"))?;
    let c = c.trim().parse().map_err(|e| format!("grid cols: {e}"))?;
    GridGraph::new(r, c).map_err(|e| e.to_string())
}

enum Failure {
    Core(Error),
    Usage(String),
    Contract(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Decode(a) => cmd_decode(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::VerifyTheory(a) => cmd_verify_theory(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Contract(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_TRACE_CONTRACT)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Validation => EXIT_VALIDATION,
                ErrorClass::TraceContract => EXIT_TRACE_CONTRACT,
            })
        }
    }
}

fn resolve_watch(manifest: &TraceManifest, given: &[String]) -> Result<Vec<u32>, Error> {
    if given.is_empty() {
        return Ok(manifest.watch_token_ids.clone());
    }
    given
        .iter()
        .map(|t| match t.trim().parse::<u32>() {
            Ok(id) => Ok(id),
            Err(_) => manifest.token_id_for(t.trim()),
        })
        .collect()
}

fn with_context(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn decode_policy(a: &DecodeArgs) -> DecodePolicy {
    let mode = match a.mode {
        DecodeMode::Lascd if a.signal != Signal::Energy || a.direction != Direction::Max => {
            DecodeMode::Ablation {
                signal: a.signal,
                direction: a.direction,
            }
        }
        m => m,
    };
    DecodePolicy {
        mode,
        remap: RemapConfig {
            alpha: a.alpha,
            beta: a.beta,
            top_k: a.top_k,
            top_p: a.top_p,
            mask_basis: a.mask_basis,
        },
        candidates: a.scoring.layers.clone(),
        kernel: a.scoring.kernel.clone(),
        energy_basis: a.scoring.energy_basis,
    }
}

fn decode_one(
    path: &Path,
    policy: &DecodePolicy,
    watch: &[String],
    out: Option<&Path>,
    diagnostics: Option<&Path>,
) -> Result<(), Error> {
    let (manifest, steps) = open_trace(path).map_err(|e| with_context(path, e))?;
    let watch_ids = resolve_watch(&manifest, watch)?;
    let run = run_decode(&manifest, steps, policy, &watch_ids)?;
    let digest = file_digest(path)?;
    let summary = DecodeSummary::new(&run, &manifest, ConfigEcho::new(policy, &watch_ids), digest);
    if let Some(d) = diagnostics {
        emit_diagnostics_csv(&run.diagnostics, &watch_ids, d)?;
    }
    write_json(&summary, out)
}

fn thread_cap() -> Result<Option<usize>, Failure> {
    match std::env::var("LSCD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("LSCD_THREADS={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

fn cmd_decode(a: DecodeArgs) -> CmdResult {
    let policy = decode_policy(&a);
    policy.remap.validate()?;
    if a.trace.len() == 1 {
        decode_one(&a.trace[0], &policy, &a.scoring.watch_tokens, a.out.as_deref(), a.diagnostics.as_deref())?;
        return Ok(0);
    }

    for dir in [&a.out, &a.diagnostics].into_iter().flatten() {
        fs::create_dir_all(dir)?;
    }
    let mut stems: Vec<String> = a
        .trace
        .iter()
        .map(|p| p.file_stem().map_or_else(|| "trace".into(), |s| s.to_string_lossy().into_owned()))
        .collect();
    let mut sorted = stems.clone();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        stems = (0..stems.len()).map(|i| format!("{}-{i}", stems[i])).collect();
    }
    let threads = thread_cap()?.unwrap_or_else(rayon::current_num_threads).min(a.trace.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let results: Vec<Result<(), Error>> = pool.install(|| {
        a.trace
            .par_iter()
            .zip(&stems)
            .map(|(path, stem)| {
                let out = a.out.as_ref().map(|d| d.join(format!("{stem}.json")));
                let diag = a.diagnostics.as_ref().map(|d| d.join(format!("{stem}.csv")));
                decode_one(path, &policy, &a.scoring.watch_tokens, out.as_deref(), diag.as_deref())
            })
            .collect()
    });
    // Report every failure, exit with the first one's class.
    let mut first = None;
    for (path, r) in a.trace.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("error: {}: {e}", path.display());
            first.get_or_insert(e);
        }
    }
    match first {
        None => Ok(0),
        Some(e) => Ok(match e.class() {
            ErrorClass::Validation => EXIT_VALIDATION,
            ErrorClass::TraceContract => EXIT_TRACE_CONTRACT,
        }),
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let (manifest, steps) = open_trace(&a.trace).map_err(|e| with_context(&a.trace, e))?;
    let watch_ids = resolve_watch(&manifest, &a.scoring.watch_tokens)?;
    let policy = DecodePolicy {
        mode: DecodeMode::Baseline,
        candidates: a.scoring.layers,
        kernel: a.scoring.kernel,
        energy_basis: a.scoring.energy_basis,
        ..DecodePolicy::default()
    };
    let run = run_decode(&manifest, steps, &policy, &watch_ids)?;
    match a.out {
        Some(p) => write_analysis_csv(&run.diagnostics, &watch_ids, BufWriter::new(File::create(p)?))?,
        None => write_analysis_csv(&run.diagnostics, &watch_ids, io::stdout().lock())?,
    }
    Ok(0)
}

fn cmd_verify_theory(a: TheoryArgs) -> CmdResult {
    let cfg = TheoryConfig {
        grid: a.grid,
        samples: a.samples,
        sigma: a.sigma,
        seed: a.seed,
        ..TheoryConfig::default()
    };
    let report = verify_theory(&cfg)?;
    write_json(&report, a.out.as_deref())?;
    Ok(if report.passed { 0 } else { EXIT_VALIDATION })
}

#[derive(Serialize)]
struct BenchReport {
    energy: lascd_core::bench::EnergyBench,
    remap: lascd_core::bench::RemapBench,
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let energy = bench_energy(&a.layer_counts, &a.head_counts, &a.nv, a.repetitions, a.seed)?;
    let remap = bench_remap(&a.m, a.repetitions, a.seed)?;
    if let Some(p) = &a.csv {
        let mut w = BufWriter::new(File::create(p)?);
        writeln!(w, "kind,layers,heads,n_visual,m,work,median_ns,p95_ns")?;
        for r in &energy.rows {
            writeln!(
                w,
                "energy,{},{},{},,{},{},{}",
                r.layers, r.heads, r.n_visual, r.work, r.median_ns, r.p95_ns
            )?;
        }
        for r in &remap.rows {
            writeln!(w, "remap,,,,{},{},{},{}", r.m, r.m, r.median_ns, r.p95_ns)?;
        }
        w.flush()?;
    }
    write_json(&BenchReport { energy, remap }, a.json.as_deref())?;
    Ok(0)
}

fn cmd_validate(a: ValidateArgs) -> CmdResult {
    let report = validate_trace(&a.trace).map_err(|e| with_context(&a.trace, e))?;
    if a.json {
        write_json(&report, None)?;
    } else {
        print!("{report}");
    }
    if report.passed() {
        Ok(0)
    } else {
        Err(Failure::Contract(format!(
            "{} of {} checks failed",
            report.failures(),
            report.checks.len()
        )))
    }
}
