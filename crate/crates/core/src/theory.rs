//! Grid models of region-uniform and perturbed attention, with numeric checks
//! of the coherent-region bound, fragmentation scaling and noise amplification.
//!
//! All operators here use the zero-padded 5-point Laplacian, the same one the
//! layer scorer applies to a single head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::energy::{laplace5, laplacian2d_sq};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GridGraph {
    pub rows: usize,
    pub cols: usize,
}

impl GridGraph {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!("grid {rows}x{cols} has no nodes")));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn nodes(&self) -> usize {
        self.rows * self.cols
    }

    fn check(&self, v: &[f64]) {
        assert_eq!(v.len(), self.nodes(), "vector length does not match grid");
    }
}

/// Δv with zero padding.
pub fn apply_laplacian(grid: &GridGraph, v: &[f64]) -> Vec<f64> {
    grid.check(v);
    let mut out = Vec::with_capacity(v.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            out.push(laplace5(v, grid.rows, grid.cols, r, c));
        }
    }
    out
}

/// ‖Δα‖₂.
pub fn normalized_energy(grid: &GridGraph, alpha: &[f64]) -> f64 {
    energy_sq(grid, alpha).sqrt()
}

fn energy_sq(grid: &GridGraph, v: &[f64]) -> f64 {
    grid.check(v);
    laplacian2d_sq(v, grid.rows, grid.cols)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    pub fn new(grid: &GridGraph, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid.nodes() {
            return Err(Error::Invalid(format!(
                "mask has {} cells, grid has {}",
                cells.len(),
                grid.nodes()
            )));
        }
        if !cells.iter().any(|&c| c) {
            return Err(Error::Invalid("region mask is empty".into()));
        }
        Ok(Self {
            rows: grid.rows,
            cols: grid.cols,
            cells,
        })
    }

    pub fn rectangle(grid: &GridGraph, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > grid.rows || left + width > grid.cols {
            return Err(Error::Invalid(format!(
                "rectangle {height}x{width} at ({top},{left}) does not fit {}x{}",
                grid.rows, grid.cols
            )));
        }
        let mut cells = vec![false; grid.nodes()];
        for r in top..top + height {
            cells[r * grid.cols + left..r * grid.cols + left + width].fill(true);
        }
        Self::new(grid, cells)
    }

    pub fn full(grid: &GridGraph) -> Self {
        Self {
            rows: grid.rows,
            cols: grid.cols,
            cells: vec![true; grid.nodes()],
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Region cells with at least one 4-neighbor outside the region or off the grid.
    pub fn boundary(&self) -> usize {
        let mut count = 0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.contains(r, c) {
                    continue;
                }
                let inside = |dr: isize, dc: isize| {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    rr >= 0
                        && cc >= 0
                        && (rr as usize) < self.rows
                        && (cc as usize) < self.cols
                        && self.contains(rr as usize, cc as usize)
                };
                if !(inside(-1, 0) && inside(1, 0) && inside(0, -1) && inside(0, 1)) {
                    count += 1;
                }
            }
        }
        count
    }

    fn union(&mut self, other: &RegionMask) {
        for (a, &b) in self.cells.iter_mut().zip(&other.cells) {
            *a |= b;
        }
    }
}

/// 1/|R| on the region, 0 elsewhere.
pub fn make_region_uniform(grid: &GridGraph, mask: &RegionMask) -> Vec<f64> {
    assert_eq!(mask.cells.len(), grid.nodes(), "mask does not match grid");
    let value = 1.0 / mask.area() as f64;
    mask.cells.iter().map(|&c| if c { value } else { 0.0 }).collect()
}

#[derive(Debug, Clone)]
pub struct Fragmented {
    pub alpha: Vec<f64>,
    pub components: Vec<RegionMask>,
}

impl Fragmented {
    pub fn union(&self) -> RegionMask {
        let mut all = self.components[0].clone();
        for c in &self.components[1..] {
            all.union(c);
        }
        all
    }
}

/// Splits `area` cells into `k` near-square components laid out on a lattice.
///
/// `min_separation` is the number of empty cells kept between components and
/// must be at least 2, so no off-region cell touches two components. One empty
/// row and column is kept along the grid border.
pub fn make_fragmented(grid: &GridGraph, k: usize, area: usize, min_separation: usize) -> Result<Fragmented> {
    if k == 0 || area < k {
        return Err(Error::Sizing(format!("cannot split area {area} into {k} components")));
    }
    if min_separation < 2 {
        return Err(Error::Sizing(format!(
            "separation {min_separation} lets neighboring responses overlap; need at least 2"
        )));
    }
    let base = area / k;
    let extra = area % k;
    let largest = base + usize::from(extra > 0);
    let width = (largest as f64).sqrt().ceil() as usize;
    let height = largest.div_ceil(width);
    let margin = 1;
    let fit = |span: usize, len: usize| {
        if span < 2 * margin + len {
            0
        } else {
            (span - 2 * margin + min_separation) / (len + min_separation)
        }
    };
    let (per_row, per_col) = (fit(grid.cols, width), fit(grid.rows, height));
    if per_row * per_col < k {
        return Err(Error::Sizing(format!(
            "{k} components of {height}x{width} with separation {min_separation} do not fit a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let value = 1.0 / area as f64;
    let mut alpha = vec![0.0; grid.nodes()];
    let mut components = Vec::with_capacity(k);
    for i in 0..k {
        let cells_here = base + usize::from(i < extra);
        let top = margin + (i / per_row) * (height + min_separation);
        let left = margin + (i % per_row) * (width + min_separation);
        let mut cells = vec![false; grid.nodes()];
        for j in 0..cells_here {
            let idx = (top + j / width) * grid.cols + left + j % width;
            cells[idx] = true;
            alpha[idx] = value;
        }
        components.push(RegionMask::new(grid, cells)?);
    }
    Ok(Fragmented { alpha, components })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionRecord {
    pub area: usize,
    pub boundary: usize,
    pub energy_sq: f64,
    /// E²·|R|²/|∂R|.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherentBoundReport {
    pub grid: GridGraph,
    pub regions: usize,
    /// Largest E²·|R|²/|∂R| over all regions.
    pub constant: f64,
    pub bound_holds: bool,
    /// Cells whose 4-neighborhood shares their value, summed over regions.
    pub flat_cells_checked: usize,
    pub flat_cells_nonzero: usize,
    pub passed: bool,
    #[serde(skip)]
    pub records: Vec<RegionRecord>,
}

/// Fits the constant C in E² ≤ C·|∂R|/|R|² and checks flat cells respond with zero.
pub fn verify_coherent_bound(grid: &GridGraph, masks: &[RegionMask]) -> CoherentBoundReport {
    let mut records = Vec::with_capacity(masks.len());
    let mut flat_checked = 0;
    let mut flat_nonzero = 0;
    for mask in masks {
        let alpha = make_region_uniform(grid, mask);
        let response = apply_laplacian(grid, &alpha);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                if is_flat(grid, &alpha, r, c) {
                    flat_checked += 1;
                    if response[r * grid.cols + c] != 0.0 {
                        flat_nonzero += 1;
                    }
                }
            }
        }
        let energy_sq: f64 = response.iter().map(|x| x * x).sum();
        let (area, boundary) = (mask.area(), mask.boundary());
        records.push(RegionRecord {
            area,
            boundary,
            energy_sq,
            ratio: energy_sq * (area * area) as f64 / boundary as f64,
        });
    }
    let constant = records.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let bound_holds = records.iter().all(|r| {
        let bound = constant * r.boundary as f64 / (r.area * r.area) as f64;
        r.energy_sq <= bound * (1.0 + 1e-12)
    });
    CoherentBoundReport {
        grid: *grid,
        regions: records.len(),
        constant,
        bound_holds,
        flat_cells_checked: flat_checked,
        flat_cells_nonzero: flat_nonzero,
        passed: bound_holds && flat_nonzero == 0 && !records.is_empty(),
        records,
    }
}

fn is_flat(grid: &GridGraph, v: &[f64], r: usize, c: usize) -> bool {
    let x = v[r * grid.cols + c];
    let at = |rr: isize, cc: isize| {
        if rr < 0 || cc < 0 || rr as usize >= grid.rows || cc as usize >= grid.cols {
            0.0
        } else {
            v[rr as usize * grid.cols + cc as usize]
        }
    };
    let (r, c) = (r as isize, c as isize);
    [at(r - 1, c), at(r + 1, c), at(r, c - 1), at(r, c + 1)]
        .iter()
        .all(|&n| n == x)
}

/// Every axis-aligned rectangle of the grid.
pub fn all_rectangles(grid: &GridGraph) -> Vec<RegionMask> {
    let mut out = Vec::new();
    for top in 0..grid.rows {
        for height in 1..=grid.rows - top {
            for left in 0..grid.cols {
                for width in 1..=grid.cols - left {
                    out.push(RegionMask::rectangle(grid, top, left, height, width).expect("fits by construction"));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FragmentationEntry {
    pub k: usize,
    pub energy_sq: f64,
    pub boundary_sum: usize,
    /// E²(K)/E²(first K in the list).
    pub ratio: f64,
    pub sqrt_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FragmentationReport {
    pub grid: GridGraph,
    pub area: usize,
    pub min_separation: usize,
    pub entries: Vec<FragmentationEntry>,
    pub strictly_increasing: bool,
    pub passed: bool,
}

pub fn verify_fragmentation(
    grid: &GridGraph,
    area: usize,
    ks: &[usize],
    min_separation: usize,
) -> Result<FragmentationReport> {
    let mut entries: Vec<FragmentationEntry> = Vec::with_capacity(ks.len());
    for &k in ks {
        let frag = make_fragmented(grid, k, area, min_separation)?;
        let energy_sq = energy_sq(grid, &frag.alpha);
        let boundary_sum = frag.components.iter().map(RegionMask::boundary).sum();
        let first = entries.first().map_or(energy_sq, |e| e.energy_sq);
        entries.push(FragmentationEntry {
            k,
            energy_sq,
            boundary_sum,
            ratio: energy_sq / first,
            sqrt_k: (k as f64).sqrt(),
        });
    }
    let strictly_increasing = entries.windows(2).all(|w| w[1].energy_sq > w[0].energy_sq);
    Ok(FragmentationReport {
        grid: *grid,
        area,
        min_separation,
        entries,
        strictly_increasing,
        passed: strictly_increasing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub pi: Vec<f64>,
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn uniform(grid: &GridGraph, sigma: f64, samples: usize, seed: u64) -> Self {
        let n = grid.nodes();
        Self {
            pi: vec![1.0 / n as f64; n],
            sigma,
            samples,
            seed,
        }
    }

    pub fn validate(&self, grid: &GridGraph) -> Result<()> {
        if self.pi.len() != grid.nodes() {
            return Err(Error::Invalid(format!(
                "baseline has {} entries, grid has {}",
                self.pi.len(),
                grid.nodes()
            )));
        }
        if self.pi.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Invalid("baseline must be finite and nonnegative".into()));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("baseline sums to {total}, not 1")));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise scale {} must be positive", self.sigma)));
        }
        if self.samples < 1000 {
            return Err(Error::Invalid(format!("{} samples is below the minimum of 1000", self.samples)));
        }
        Ok(())
    }
}

/// Σ = σ²(I − 11ᵀ/N), row-major.
pub fn centered_isotropic_covariance(n: usize, sigma: f64) -> Vec<f64> {
    let s2 = sigma * sigma;
    let off = -s2 / n as f64;
    let mut m = vec![off; n * n];
    for i in 0..n {
        m[i * n + i] = s2 + off;
    }
    m
}

fn check_covariance(grid: &GridGraph, sigma: &[f64]) -> Result<usize> {
    let n = grid.nodes();
    if sigma.len() != n * n {
        return Err(Error::Invalid(format!("covariance has {} entries, expected {}", sigma.len(), n * n)));
    }
    for i in 0..n {
        let d = sigma[i * n + i];
        if !d.is_finite() || d < 0.0 {
            return Err(Error::Invalid(format!("covariance diagonal {i} is negative or not finite")));
        }
        for j in 0..i {
            let (a, b) = (sigma[i * n + j], sigma[j * n + i]);
            if !a.is_finite() || (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::Invalid(format!("covariance is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(n)
}

/// Tr(ΔᵀΔΣ), summing (Δe_j)·(ΔΣe_j) over columns.
pub fn trace_delta_sq_sigma(grid: &GridGraph, sigma: &[f64]) -> Result<f64> {
    let n = check_covariance(grid, sigma)?;
    let mut unit = vec![0.0; n];
    let mut column = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..n {
        unit[j] = 1.0;
        for i in 0..n {
            column[i] = sigma[i * n + j];
        }
        let de = apply_laplacian(grid, &unit);
        let ds = apply_laplacian(grid, &column);
        total += de.iter().zip(&ds).map(|(a, b)| a * b).sum::<f64>();
        unit[j] = 0.0;
    }
    Ok(total)
}

/// Tr(ΔᵀΔ): squared column norms of Δ.
pub fn trace_delta_sq(grid: &GridGraph) -> f64 {
    let n = grid.nodes();
    let mut unit = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..n {
        unit[j] = 1.0;
        total += energy_sq(grid, &unit);
        unit[j] = 0.0;
    }
    total
}

/// σ_Δ² = Tr(ΔᵀΔΣ)/Tr(ΔᵀΔ).
pub fn sigma_delta_sq(sigma: &[f64], grid: &GridGraph) -> Result<f64> {
    Ok(trace_delta_sq_sigma(grid, sigma)? / trace_delta_sq(grid))
}

/// ‖Δπ‖² + Tr(ΔᵀΔ·σ²(I − 11ᵀ/N)).
pub fn amplification_closed_form(grid: &GridGraph, pi: &[f64], sigma: f64) -> Result<f64> {
    let cov = centered_isotropic_covariance(grid.nodes(), sigma);
    Ok(energy_sq(grid, pi) + trace_delta_sq_sigma(grid, &cov)?)
}

/// Exact E‖Δ(π+η)‖² for η = σ(ξ − mean ξ), ξ uniform on {−1, 1}^N.
pub fn exact_two_point_expectation(grid: &GridGraph, pi: &[f64], sigma: f64) -> Result<f64> {
    let n = grid.nodes();
    if n > 20 {
        return Err(Error::Invalid(format!("exhaustive expectation over 2^{n} outcomes is too large")));
    }
    grid.check(pi);
    let mut x = vec![0.0; n];
    let mut total = 0.0;
    for bits in 0u32..(1 << n) {
        let xi: Vec<f64> = (0..n).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let mean = xi.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            x[i] = pi[i] + sigma * (xi[i] - mean);
        }
        total += energy_sq(grid, &x);
    }
    Ok(total / f64::from(1u32 << n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanEstimate {
    fn of(xs: impl Iterator<Item = f64> + Clone, n: usize) -> Self {
        let nf = n as f64;
        let mean = xs.clone().sum::<f64>() / nf;
        let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
        Self {
            mean,
            stderr: (var / nf).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmplificationReport {
    pub grid: GridGraph,
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
    /// ‖Δπ‖².
    pub base_energy_sq: f64,
    /// Tr(ΔᵀΔΣ).
    pub trace_term: f64,
    pub sigma_delta_sq: f64,
    pub closed_form: f64,
    pub estimate: MeanEstimate,
    /// |estimate − closed form| in standard errors.
    pub z_score: f64,
    pub tolerance_se: f64,
    pub within_tolerance: bool,
    /// Mean of 2(Δπ)ᵀ(Δη); zero in expectation.
    pub cross_term: MeanEstimate,
    pub cross_term_ok: bool,
    /// Samples of π + η with a negative coordinate (kept, not projected).
    pub negative_samples: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JensenReport {
    /// ‖Δπ‖.
    pub base_energy: f64,
    /// Mean of ‖Δ(π+η)‖.
    pub estimate: MeanEstimate,
    pub tolerance_se: f64,
    pub passed: bool,
}

const TOLERANCE_SE: f64 = 3.0;

/// Monte Carlo check of E‖Δ(π+η)‖² = ‖Δπ‖² + Tr(ΔᵀΔΣ) and of the norm lower bound.
///
/// Sample `i` draws from its own ChaCha stream, so results do not depend on the
/// thread count.
pub fn verify_energy_amplification(
    spec: &PerturbationSpec,
    grid: &GridGraph,
) -> Result<(AmplificationReport, JensenReport)> {
    spec.validate(grid)?;
    let n = grid.nodes();
    let cov = centered_isotropic_covariance(n, spec.sigma);
    let trace_term = trace_delta_sq_sigma(grid, &cov)?;
    let lap_pi = apply_laplacian(grid, &spec.pi);
    let base_energy_sq: f64 = lap_pi.iter().map(|x| x * x).sum();
    let closed_form = base_energy_sq + trace_term;

    let draws: Vec<(f64, f64, bool)> = (0..spec.samples)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n]),
            |(eta, x), i| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i as u64);
                for e in eta.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *e = spec.sigma * z;
                }
                let mean = eta.iter().sum::<f64>() / n as f64;
                eta.iter_mut().for_each(|e| *e -= mean);
                let mut negative = false;
                for k in 0..n {
                    x[k] = spec.pi[k] + eta[k];
                    negative |= x[k] < 0.0;
                }
                let q = laplacian2d_sq(x, grid.rows, grid.cols);
                let mut cross = 0.0;
                for r in 0..grid.rows {
                    for c in 0..grid.cols {
                        cross += lap_pi[r * grid.cols + c] * laplace5(eta, grid.rows, grid.cols, r, c);
                    }
                }
                (q, 2.0 * cross, negative)
            },
        )
        .collect();

    let m = spec.samples;
    let estimate = MeanEstimate::of(draws.iter().map(|d| d.0), m);
    let cross_term = MeanEstimate::of(draws.iter().map(|d| d.1), m);
    let norms = MeanEstimate::of(draws.iter().map(|d| d.0.sqrt()), m);
    let negative_samples = draws.iter().filter(|d| d.2).count();

    let z_score = (estimate.mean - closed_form).abs() / estimate.stderr;
    let within_tolerance = z_score <= TOLERANCE_SE;
    let cross_term_ok = cross_term.mean.abs() <= TOLERANCE_SE * cross_term.stderr || cross_term.stderr == 0.0 && cross_term.mean == 0.0;
    let base_energy = base_energy_sq.sqrt();
    let jensen = JensenReport {
        base_energy,
        passed: norms.mean >= base_energy - TOLERANCE_SE * norms.stderr,
        estimate: norms,
        tolerance_se: TOLERANCE_SE,
    };
    let report = AmplificationReport {
        grid: *grid,
        sigma: spec.sigma,
        samples: spec.samples,
        seed: spec.seed,
        base_energy_sq,
        trace_term,
        sigma_delta_sq: trace_term / trace_delta_sq(grid),
        closed_form,
        estimate,
        z_score,
        tolerance_se: TOLERANCE_SE,
        within_tolerance,
        cross_term,
        cross_term_ok,
        negative_samples,
        passed: within_tolerance && cross_term_ok,
    };
    Ok((report, jensen))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactCheck {
    pub grid: GridGraph,
    pub sigma: f64,
    pub exhaustive: f64,
    pub closed_form: f64,
    pub abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Closed form against the exhaustive two-point expectation.
pub fn verify_exact_small(grid: &GridGraph, pi: &[f64], sigma: f64) -> Result<ExactCheck> {
    let exhaustive = exact_two_point_expectation(grid, pi, sigma)?;
    let closed_form = amplification_closed_form(grid, pi, sigma)?;
    let abs_error = (exhaustive - closed_form).abs();
    let tolerance = 1e-12;
    Ok(ExactCheck {
        grid: *grid,
        sigma,
        exhaustive,
        closed_form,
        abs_error,
        tolerance,
        passed: abs_error <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConfig {
    /// Grid for the noise-amplification check.
    pub grid: GridGraph,
    pub samples: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Side of the grid whose rectangles are enumerated.
    pub bound_side: usize,
    pub fragment_grid: GridGraph,
    pub fragment_area: usize,
    pub fragment_counts: Vec<usize>,
    pub fragment_separation: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            grid: GridGraph { rows: 16, cols: 16 },
            samples: 20_000,
            sigma: 0.005,
            seed: 0x5eed,
            bound_side: 12,
            fragment_grid: GridGraph { rows: 48, cols: 48 },
            fragment_area: 64,
            fragment_counts: vec![1, 4, 16],
            fragment_separation: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub monte_carlo: AmplificationReport,
    pub exact: ExactCheck,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub prop1: CoherentBoundReport,
    pub prop2: FragmentationReport,
    pub theorem1: Theorem1Report,
    pub jensen: JensenReport,
    pub passed: bool,
}

pub fn verify_theory(cfg: &TheoryConfig) -> Result<TheoryReport> {
    let bound_grid = GridGraph::square(cfg.bound_side)?;
    let prop1 = verify_coherent_bound(&bound_grid, &all_rectangles(&bound_grid));
    let prop2 = verify_fragmentation(
        &cfg.fragment_grid,
        cfg.fragment_area,
        &cfg.fragment_counts,
        cfg.fragment_separation,
    )?;
    let spec = PerturbationSpec::uniform(&cfg.grid, cfg.sigma, cfg.samples, cfg.seed);
    let (monte_carlo, jensen) = verify_energy_amplification(&spec, &cfg.grid)?;
    let small = GridGraph::square(2)?;
    let exact = verify_exact_small(&small, &[0.4, 0.3, 0.2, 0.1], cfg.sigma)?;
    let theorem1 = Theorem1Report {
        passed: monte_carlo.passed && exact.passed,
        monte_carlo,
        exact,
    };
    Ok(TheoryReport {
        passed: prop1.passed && prop2.passed && theorem1.passed && jensen.passed,
        prop1,
        prop2,
        theorem1,
        jensen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{layer_energy, AttentionSlice, SpectralKernel, VisualLayout};
    use proptest::prelude::*;

    fn g(r: usize, c: usize) -> GridGraph {
        GridGraph::new(r, c).unwrap()
    }

    #[test]
    fn energy_examples() {
        assert_eq!(normalized_energy(&g(3, 3), &[0.0; 9]), 0.0);
        assert!((normalized_energy(&g(2, 2), &[0.25; 4]) - 1.0).abs() < 1e-15);
        let mut delta = vec![0.0; 25];
        delta[12] = 1.0;
        let resp = apply_laplacian(&g(5, 5), &delta);
        assert_eq!(resp[12], -4.0);
        for i in [7, 11, 13, 17] {
            assert_eq!(resp[i], 1.0);
        }
        assert!((normalized_energy(&g(5, 5), &delta) - 20f64.sqrt()).abs() < 1e-15);
        assert!(GridGraph::new(0, 3).is_err());
    }

    proptest! {
        #[test]
        fn matches_layer_scorer(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rows * cols;
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() / n as f64).collect();
            let slice = AttentionSlice::new(0, 1, n, v.clone()).unwrap();
            let layout = VisualLayout::new(n, Some((rows, cols))).unwrap();
            let e = layer_energy(&slice, &layout, &SpectralKernel::Laplacian2D).unwrap();
            prop_assert!((e - normalized_energy(&g(rows, cols), &v)).abs() <= 1e-12);
        }
    }

    #[test]
    fn region_uniform_examples() {
        let grid = g(4, 4);
        let full = make_region_uniform(&grid, &RegionMask::full(&grid));
        assert!(full.iter().all(|&v| v == 1.0 / 16.0));
        let one = make_region_uniform(&grid, &RegionMask::rectangle(&grid, 1, 2, 1, 1).unwrap());
        assert_eq!(one.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(one.iter().sum::<f64>(), 1.0);
        let block = make_region_uniform(&grid, &RegionMask::rectangle(&grid, 1, 1, 2, 2).unwrap());
        assert_eq!(block.iter().filter(|&&v| v == 0.25).count(), 4);
        assert_eq!(block.iter().sum::<f64>(), 1.0);
        assert!(RegionMask::new(&grid, vec![false; 16]).is_err());
        assert!(RegionMask::rectangle(&grid, 3, 3, 2, 1).is_err());
    }

    #[test]
    fn mask_boundary_counts() {
        let grid = g(6, 6);
        assert_eq!(RegionMask::full(&grid).boundary(), 20);
        assert_eq!(RegionMask::rectangle(&grid, 1, 1, 4, 4).unwrap().boundary(), 12);
        assert_eq!(RegionMask::rectangle(&grid, 2, 2, 1, 1).unwrap().boundary(), 1);
        assert_eq!(RegionMask::rectangle(&grid, 0, 0, 2, 3).unwrap().boundary(), 6);
    }

    // A b×b block of value v away from the border: corners respond −2v, other
    // edge cells −v, the 4b outside neighbors +v.
    fn block_energy_sq(b: usize, v: f64) -> f64 {
        if b == 1 {
            20.0 * v * v
        } else {
            (8 * b + 8) as f64 * v * v
        }
    }

    #[test]
    fn fragmentation_examples() {
        let grid = g(32, 32);
        let one = make_fragmented(&grid, 1, 64, 2).unwrap();
        let single = make_region_uniform(&grid, &one.union());
        assert_eq!(one.alpha, single);

        let four = make_fragmented(&grid, 4, 64, 2).unwrap();
        assert_eq!(four.components.len(), 4);
        for c in &four.components {
            assert_eq!(c.area(), 16);
            assert_eq!(c.boundary(), 12);
        }
        assert_eq!(four.union().area(), 64);
        assert!(four.alpha.iter().all(|&v| v == 0.0 || v == 1.0 / 64.0));
        assert_chebyshev_gap(&grid, &four.components, 3);

        assert!(matches!(make_fragmented(&g(8, 8), 16, 64, 2), Err(Error::Sizing(_))));
        assert!(matches!(make_fragmented(&grid, 4, 64, 1), Err(Error::Sizing(_))));
    }

    fn assert_chebyshev_gap(grid: &GridGraph, comps: &[RegionMask], min: usize) {
        let cells = |m: &RegionMask| -> Vec<(usize, usize)> {
            (0..grid.rows)
                .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
                .filter(|&(r, c)| m.contains(r, c))
                .collect()
        };
        for i in 0..comps.len() {
            for j in i + 1..comps.len() {
                for &(r1, c1) in &cells(&comps[i]) {
                    for &(r2, c2) in &cells(&comps[j]) {
                        assert!(r1.abs_diff(r2).max(c1.abs_diff(c2)) >= min);
                    }
                }
            }
        }
    }

    #[test]
    fn fragmentation_matches_block_oracle() {
        let report = verify_fragmentation(&g(48, 48), 64, &[1, 4, 16], 2).unwrap();
        let v = 1.0 / 64.0;
        let expected = [
            block_energy_sq(8, v),
            4.0 * block_energy_sq(4, v),
            16.0 * block_energy_sq(2, v),
        ];
        let boundary = [28, 4 * 12, 16 * 4];
        for (i, e) in report.entries.iter().enumerate() {
            assert!((e.energy_sq - expected[i]).abs() < 1e-15);
            assert_eq!(e.boundary_sum, boundary[i]);
        }
        assert_eq!(report.entries[0].ratio, 1.0);
        // 384 / 72
        assert!((report.entries[2].ratio - 16.0 / 3.0).abs() < 1e-12);
        assert!(report.passed);
    }

    #[test]
    fn coherent_bound_examples() {
        let grid = g(5, 5);
        let full = RegionMask::full(&grid);
        let alpha = make_region_uniform(&grid, &full);
        let resp = apply_laplacian(&grid, &alpha);
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(resp[r * 5 + c], 0.0);
            }
        }
        assert!(resp[0] != 0.0);

        let single = RegionMask::rectangle(&grid, 2, 2, 1, 1).unwrap();
        let report = verify_coherent_bound(&grid, &[single]);
        assert!((report.records[0].ratio - 20.0).abs() < 1e-12);
        assert!((report.constant - 20.0).abs() < 1e-12);
        assert!(report.passed);
    }

    #[test]
    fn sigma_delta_examples() {
        let one = g(1, 1);
        assert_eq!(sigma_delta_sq(&[0.0], &one).unwrap(), 0.0);
        assert_eq!(trace_delta_sq(&one), 16.0);
        assert_eq!(sigma_delta_sq(&[1.0], &one).unwrap(), 1.0);
        for (r, c) in [(1, 2), (2, 2), (3, 4), (5, 5)] {
            let grid = g(r, c);
            let cov = centered_isotropic_covariance(grid.nodes(), 0.3);
            assert!(sigma_delta_sq(&cov, &grid).unwrap() > 0.0);
        }
        assert!(sigma_delta_sq(&[1.0, 0.5, 0.0, 1.0], &g(1, 2)).is_err());
    }

    // Dense oracle: build Δ as a matrix and form Tr(ΔᵀΔΣ) directly.
    #[test]
    fn trace_term_matches_dense_product() {
        let grid = g(3, 4);
        let n = grid.nodes();
        let mut delta = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for (i, v) in apply_laplacian(&grid, &e).into_iter().enumerate() {
                delta[i * n + j] = v;
            }
        }
        let cov = centered_isotropic_covariance(n, 0.2);
        let mut dtd = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dtd[i * n + j] = (0..n).map(|k| delta[k * n + i] * delta[k * n + j]).sum();
            }
        }
        let dense: f64 = (0..n)
            .map(|i| (0..n).map(|k| dtd[i * n + k] * cov[k * n + i]).sum::<f64>())
            .sum();
        assert!((trace_delta_sq_sigma(&grid, &cov).unwrap() - dense).abs() < 1e-13);
    }

    #[test]
    fn exact_two_point_identity() {
        let grid = g(2, 2);
        let check = verify_exact_small(&grid, &[0.4, 0.3, 0.2, 0.1], 0.05).unwrap();
        assert!(check.passed, "{check:?}");
        let zero = amplification_closed_form(&grid, &[0.25; 4], 0.0).unwrap();
        assert_eq!(zero, energy_sq(&grid, &[0.25; 4]));
    }

    #[test]
    fn monte_carlo_small_grid() {
        let grid = g(3, 3);
        let spec = PerturbationSpec::uniform(&grid, 0.01, 10_000, 7);
        let (report, jensen) = verify_energy_amplification(&spec, &grid).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(jensen.passed);
        let (again, _) = verify_energy_amplification(&spec, &grid).unwrap();
        assert_eq!(report, again);
        let bad = PerturbationSpec { samples: 10, ..spec };
        assert!(verify_energy_amplification(&bad, &grid).is_err());
    }
}
