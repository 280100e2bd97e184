//! Visual-attention scoring for a single decoding step.
//!
//! An [`AttentionSlice`] holds the last query's attention weights over the
//! visual-token span, one row per head. From it we compute
//!
//! * the visual mass: sum of the head-averaged row,
//! * the high-frequency energy: mean over heads of the Frobenius norm of the
//!   zero-padded stencil response of each head's map,
//! * the Shannon entropy of the renormalized head-averaged row.
//!
//! The energy takes the norm per head and then averages. It is not the norm of
//! the head-averaged map, and the two differ whenever heads disagree.
//!
//! All accumulation happens in `f64`, whatever the payload precision.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Slack allowed on a head's visual sum above 1 (softmax sub-row round-off).
pub const SUBDISTRIBUTION_TOLERANCE: f64 = 1e-4;

/// Per-head attention of the current query restricted to one token span.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSlice {
    layer: usize,
    heads: usize,
    len: usize,
    values: Vec<f64>,
}

impl AttentionSlice {
    /// Builds a slice from a head-major `heads × len` buffer.
    pub fn new(layer: usize, heads: usize, len: usize, values: Vec<f64>) -> Result<Self> {
        if heads == 0 || len == 0 {
            return Err(Error::Format(format!(
                "attention slice for layer {layer} needs at least one head and one position"
            )));
        }
        if values.len() != heads * len {
            return Err(Error::Format(format!(
                "attention slice for layer {layer}: expected {heads}×{len} values, got {}",
                values.len()
            )));
        }
        for (head, row) in values.chunks_exact(len).enumerate() {
            let mut sum = 0.0;
            for (index, &value) in row.iter().enumerate() {
                if !value.is_finite() {
                    return Err(Error::NonFiniteAttention {
                        layer,
                        head,
                        index,
                        value,
                    });
                }
                if value < 0.0 {
                    return Err(Error::NegativeAttention {
                        layer,
                        head,
                        index,
                        value,
                    });
                }
                sum += value;
            }
            if sum > 1.0 + SUBDISTRIBUTION_TOLERANCE {
                return Err(Error::AttentionMass { layer, head, sum });
            }
        }
        Ok(Self {
            layer,
            heads,
            len,
            values,
        })
    }

    pub fn from_f32(layer: usize, heads: usize, len: usize, values: &[f32]) -> Result<Self> {
        Self::new(
            layer,
            heads,
            len,
            values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn from_rows(layer: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::Format(format!(
                "attention slice for layer {layer}: ragged head rows"
            )));
        }
        Self::new(layer, rows.len(), len, rows.concat())
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Number of positions per head.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head(&self, head: usize) -> &[f64] {
        &self.values[head * self.len..(head + 1) * self.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn head_average(&self) -> Vec<f64> {
        let mut avg = vec![0.0; self.len];
        for row in self.values.chunks_exact(self.len) {
            for (a, &v) in avg.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = 1.0 / self.heads as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
        avg
    }

    /// Multiplies every weight by `factor`; the result must still be a valid slice.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.layer,
            self.heads,
            self.len,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

/// How the visual tokens are arranged spatially.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualLayout {
    n_visual: usize,
    grid: Option<Grid>,
}

impl VisualLayout {
    pub fn new(n_visual: usize, grid: Option<(usize, usize)>) -> Result<Self> {
        if let Some((rows, cols)) = grid {
            if rows == 0 || cols == 0 || rows * cols != n_visual {
                return Err(Error::Format(format!(
                    "grid {rows}×{cols} does not tile {n_visual} visual tokens"
                )));
            }
        }
        Ok(Self {
            n_visual,
            grid: grid.map(|(rows, cols)| Grid { rows, cols }),
        })
    }

    /// Layout without a spatial grid; 1-D operators only.
    pub fn sequence(n_visual: usize) -> Self {
        Self {
            n_visual,
            grid: None,
        }
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn grid(&self) -> Option<Grid> {
        self.grid
    }
}

/// A dense row-major 2-D map.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl GridMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sampled Laplacian-of-Gaussian stencil, mean-centered so it sums to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogKernel {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl LogKernel {
    pub fn new(sigma: f64, radius: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) || radius == 0 {
            return Err(Error::Config(format!(
                "LoG kernel needs sigma > 0 and radius ≥ 1 (got sigma={sigma}, radius={radius})"
            )));
        }
        let side = 2 * radius + 1;
        let r = radius as isize;
        let s2 = sigma * sigma;
        let mut weights = Vec::with_capacity(side * side);
        for dy in -r..=r {
            for dx in -r..=r {
                let q = ((dx * dx + dy * dy) as f64) / (2.0 * s2);
                weights.push(-(1.0 - q) * (-q).exp() / (std::f64::consts::PI * s2 * s2));
            }
        }
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        weights.iter_mut().for_each(|w| *w -= mean);
        Ok(Self {
            sigma,
            radius,
            weights,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Row-major `(2r+1)²` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Default for LogKernel {
    fn default() -> Self {
        Self::new(1.0, 2).expect("default LoG parameters are valid")
    }
}

/// High-pass operator applied to each head's attention map.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum SpectralKernel {
    /// 5-point stencil `[[0,1,0],[1,-4,1],[0,1,0]]`.
    #[default]
    Laplacian2D,
    /// Second difference `[1,-2,1]` along the token axis.
    Laplacian1D,
    /// Gradient magnitude from the two 3×3 Sobel filters.
    Sobel,
    LoG(LogKernel),
}

impl SpectralKernel {
    pub const LAPLACIAN_2D: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    pub const LAPLACIAN_1D: [f64; 3] = [1.0, -2.0, 1.0];
    pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

    pub fn log() -> Self {
        SpectralKernel::LoG(LogKernel::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            SpectralKernel::Laplacian2D => "laplacian2d",
            SpectralKernel::Laplacian1D => "laplacian1d",
            SpectralKernel::Sobel => "sobel",
            SpectralKernel::LoG(_) => "log",
        }
    }
}

impl fmt::Display for SpectralKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpectralKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplacian2d" => Ok(SpectralKernel::Laplacian2D),
            "laplacian1d" => Ok(SpectralKernel::Laplacian1D),
            "sobel" => Ok(SpectralKernel::Sobel),
            "log" => Ok(SpectralKernel::log()),
            other => Err(Error::Config(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Which slice the energy is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergyBasis {
    /// The slice as exported.
    #[default]
    Raw,
    /// The slice rescaled so its head-averaged row sums to one.
    Normalized,
}

impl EnergyBasis {
    pub fn name(self) -> &'static str {
        match self {
            EnergyBasis::Raw => "raw",
            EnergyBasis::Normalized => "normalized",
        }
    }
}

impl FromStr for EnergyBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EnergyBasis::Raw),
            "normalized" => Ok(EnergyBasis::Normalized),
            other => Err(Error::Config(format!("unknown energy basis {other:?}"))),
        }
    }
}

/// `m = Σ_i (1/H) Σ_h a[h][i]`.
pub fn visual_mass(slice: &AttentionSlice) -> f64 {
    slice.values.iter().sum::<f64>() / slice.heads as f64
}

/// Fills a `rows × cols` map row-major from one head's row.
pub fn reshape_to_grid(head_row: &[f64], layout: &VisualLayout) -> Result<GridMap> {
    let grid = layout.grid.ok_or(Error::NoGrid)?;
    if grid.rows * grid.cols != head_row.len() {
        return Err(Error::Format(format!(
            "grid {}×{} does not tile a row of {} values",
            grid.rows,
            grid.cols,
            head_row.len()
        )));
    }
    Ok(GridMap {
        rows: grid.rows,
        cols: grid.cols,
        data: head_row.to_vec(),
    })
}

/// Zero-padded stencil response of a 2-D map. Only the Laplacian and LoG
/// kernels produce a single response map.
pub fn laplacian_response(map: &GridMap, kernel: &SpectralKernel) -> Result<GridMap> {
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite value in map".into()));
    }
    let (rows, cols) = (map.rows, map.cols);
    let mut data = Vec::with_capacity(rows * cols);
    match kernel {
        SpectralKernel::Laplacian2D => {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(laplace5(&map.data, rows, cols, r, c));
                }
            }
        }
        SpectralKernel::LoG(k) => {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(correlate_at(&map.data, rows, cols, r, c, &k.weights, k.radius));
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "{other} does not produce a single 2-D response map"
            )))
        }
    }
    Ok(GridMap { rows, cols, data })
}

/// `E = (1/H) Σ_h ‖K ∗ A_h‖_F`.
///
/// 2-D kernels need a declared grid. The 5-point Laplacian falls back to the
/// 1-D second difference when the layout has none; Sobel and LoG do not.
pub fn layer_energy(
    slice: &AttentionSlice,
    layout: &VisualLayout,
    kernel: &SpectralKernel,
) -> Result<f64> {
    if layout.n_visual != slice.len {
        return Err(Error::Config(format!(
            "layout declares {} visual tokens but layer {} slice has {}",
            layout.n_visual, slice.layer, slice.len
        )));
    }
    let shape = resolve_shape(layout, kernel)?;
    let total: f64 = slice
        .values
        .chunks_exact(slice.len)
        .map(|row| head_energy(row, shape, kernel))
        .sum();
    Ok(total / slice.heads as f64)
}

/// [`layer_energy`] in the requested basis. A zero-mass slice has zero
/// normalized energy.
pub fn layer_energy_in_basis(
    slice: &AttentionSlice,
    layout: &VisualLayout,
    kernel: &SpectralKernel,
    basis: EnergyBasis,
) -> Result<f64> {
    let raw = layer_energy(slice, layout, kernel)?;
    Ok(match basis {
        EnergyBasis::Raw => raw,
        EnergyBasis::Normalized => {
            let mass = visual_mass(slice);
            if mass > 0.0 {
                raw / mass
            } else {
                0.0
            }
        }
    })
}

/// Entropy (nats) of the head-averaged row after renormalizing it to sum 1.
pub fn shannon_entropy(slice: &AttentionSlice) -> Result<f64> {
    let avg = slice.head_average();
    let mass: f64 = avg.iter().sum();
    if mass <= 0.0 {
        return Err(Error::ZeroMass { layer: slice.layer });
    }
    let h = avg
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| {
            let p = a / mass;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// 1-D second-difference energy over the text-token axis.
pub fn text_energy(text_slice: Option<&AttentionSlice>) -> Result<f64> {
    let slice = text_slice
        .ok_or_else(|| Error::FeatureUnavailable("trace carries no text attention slice".into()))?;
    let total: f64 = slice
        .values
        .chunks_exact(slice.len)
        .map(|row| laplacian1d_sq(row).sqrt())
        .sum();
    Ok(total / slice.heads as f64)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Line,
    Plane(usize, usize),
}

fn resolve_shape(layout: &VisualLayout, kernel: &SpectralKernel) -> Result<Shape> {
    match (kernel, layout.grid) {
        (SpectralKernel::Laplacian1D, _) => Ok(Shape::Line),
        (SpectralKernel::Laplacian2D, None) => Ok(Shape::Line),
        (_, Some(g)) => Ok(Shape::Plane(g.rows, g.cols)),
        (k, None) => Err(Error::Config(format!(
            "kernel {k} needs a grid layout but the trace declares none"
        ))),
    }
}

fn head_energy(row: &[f64], shape: Shape, kernel: &SpectralKernel) -> f64 {
    match shape {
        Shape::Line => laplacian1d_sq(row).sqrt(),
        Shape::Plane(rows, cols) => match kernel {
            SpectralKernel::Laplacian2D | SpectralKernel::Laplacian1D => {
                laplacian2d_sq(row, rows, cols).sqrt()
            }
            SpectralKernel::Sobel => sobel_sq(row, rows, cols).sqrt(),
            SpectralKernel::LoG(k) => correlate_sq(row, rows, cols, &k.weights, k.radius).sqrt(),
        },
    }
}

// Written as a sum of neighbor differences so that a cell whose neighbors all
// share its value responds with an exact zero.
#[inline]
pub(crate) fn laplace5(data: &[f64], rows: usize, cols: usize, r: usize, c: usize) -> f64 {
    let v = data[r * cols + c];
    let up = if r > 0 { data[(r - 1) * cols + c] } else { 0.0 };
    let down = if r + 1 < rows { data[(r + 1) * cols + c] } else { 0.0 };
    let left = if c > 0 { data[r * cols + c - 1] } else { 0.0 };
    let right = if c + 1 < cols { data[r * cols + c + 1] } else { 0.0 };
    (up - v) + (down - v) + (left - v) + (right - v)
}

pub(crate) fn laplacian2d_sq(data: &[f64], rows: usize, cols: usize) -> f64 {
    let mut acc = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let resp = laplace5(data, rows, cols, r, c);
            acc += resp * resp;
        }
    }
    acc
}

pub(crate) fn laplacian1d_sq(row: &[f64]) -> f64 {
    let n = row.len();
    let mut acc = 0.0;
    for i in 0..n {
        let v = row[i];
        let left = if i > 0 { row[i - 1] } else { 0.0 };
        let right = if i + 1 < n { row[i + 1] } else { 0.0 };
        let resp = (left - v) + (right - v);
        acc += resp * resp;
    }
    acc
}

fn sobel_sq(data: &[f64], rows: usize, cols: usize) -> f64 {
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            data[r as usize * cols + c as usize]
        }
    };
    let mut acc = 0.0;
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let (nw, n, ne) = (at(r - 1, c - 1), at(r - 1, c), at(r - 1, c + 1));
            let (w, e) = (at(r, c - 1), at(r, c + 1));
            let (sw, s, se) = (at(r + 1, c - 1), at(r + 1, c), at(r + 1, c + 1));
            let gx = (ne + 2.0 * e + se) - (nw + 2.0 * w + sw);
            let gy = (sw + 2.0 * s + se) - (nw + 2.0 * n + ne);
            acc += gx * gx + gy * gy;
        }
    }
    acc
}

#[inline]
fn correlate_at(
    data: &[f64],
    rows: usize,
    cols: usize,
    r: usize,
    c: usize,
    weights: &[f64],
    radius: usize,
) -> f64 {
    let side = 2 * radius + 1;
    let r0 = r as isize - radius as isize;
    let c0 = c as isize - radius as isize;
    let mut sum = 0.0;
    for ky in 0..side {
        let rr = r0 + ky as isize;
        if rr < 0 || rr >= rows as isize {
            continue;
        }
        let base = rr as usize * cols;
        for kx in 0..side {
            let cc = c0 + kx as isize;
            if cc < 0 || cc >= cols as isize {
                continue;
            }
            sum += weights[ky * side + kx] * data[base + cc as usize];
        }
    }
    sum
}

fn correlate_sq(data: &[f64], rows: usize, cols: usize, weights: &[f64], radius: usize) -> f64 {
    let mut acc = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let resp = correlate_at(data, rows, cols, r, c, weights, radius);
            acc += resp * resp;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(values: &[f64]) -> AttentionSlice {
        AttentionSlice::new(0, 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn mass_examples() {
        assert!((visual_mass(&single(&[0.1, 0.2, 0.3])) - 0.6).abs() < 1e-15);
        let zeros = AttentionSlice::new(3, 2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(visual_mass(&zeros), 0.0);
        let two = AttentionSlice::from_rows(0, &[vec![0.4, 0.0], vec![0.0, 0.2]]).unwrap();
        assert!((visual_mass(&two) - 0.3).abs() < 1e-15);
        let avg = two.head_average();
        assert!((avg.iter().sum::<f64>() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invalid_slices_name_their_position() {
        let err = AttentionSlice::new(7, 2, 2, vec![0.1, 0.1, f64::NAN, 0.0]).unwrap_err();
        match err {
            Error::NonFiniteAttention {
                layer, head, index, ..
            } => assert_eq!((layer, head, index), (7, 1, 0)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            AttentionSlice::new(0, 1, 2, vec![0.9, 0.2]),
            Err(Error::AttentionMass { .. })
        ));
        assert!(AttentionSlice::new(0, 1, 2, vec![0.5, 0.50009]).is_ok());
        assert!(matches!(
            AttentionSlice::new(0, 1, 2, vec![-0.1, 0.2]),
            Err(Error::NegativeAttention { .. })
        ));
    }

    #[test]
    fn reshape_examples() {
        let layout = VisualLayout::new(4, Some((2, 2))).unwrap();
        let m = reshape_to_grid(&[1.0, 2.0, 3.0, 4.0], &layout).unwrap();
        assert_eq!((m.get(0, 1), m.get(1, 0)), (2.0, 3.0));
        let layout = VisualLayout::new(6, Some((2, 3))).unwrap();
        let m = reshape_to_grid(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &layout).unwrap();
        assert_eq!(m.get(1, 2), 6.0);
        assert_eq!(m.get(0, 2), 3.0);
        assert!(matches!(VisualLayout::new(4, Some((3, 2))), Err(Error::Format(_))));
        assert!(matches!(
            reshape_to_grid(&[0.0; 4], &VisualLayout::sequence(4)),
            Err(Error::NoGrid)
        ));
    }

    #[test]
    fn response_examples() {
        let zero = GridMap {
            rows: 3,
            cols: 3,
            data: vec![0.0; 9],
        };
        let resp = laplacian_response(&zero, &SpectralKernel::Laplacian2D).unwrap();
        assert!(resp.data.iter().all(|&v| v == 0.0));

        let uniform = GridMap {
            rows: 2,
            cols: 2,
            data: vec![0.25; 4],
        };
        let resp = laplacian_response(&uniform, &SpectralKernel::Laplacian2D).unwrap();
        assert!(resp.data.iter().all(|&v| (v + 0.5).abs() < 1e-15));

        let one = GridMap {
            rows: 1,
            cols: 1,
            data: vec![0.3],
        };
        let resp = laplacian_response(&one, &SpectralKernel::Laplacian2D).unwrap();
        assert!((resp.data[0] + 1.2).abs() < 1e-15);
        assert!(laplacian_response(&one, &SpectralKernel::Sobel).is_err());
    }

    #[test]
    fn energy_examples() {
        for kernel in [
            SpectralKernel::Laplacian2D,
            SpectralKernel::Laplacian1D,
            SpectralKernel::Sobel,
            SpectralKernel::log(),
        ] {
            let zero = AttentionSlice::new(0, 2, 4, vec![0.0; 8]).unwrap();
            let layout = VisualLayout::new(4, Some((2, 2))).unwrap();
            assert_eq!(layer_energy(&zero, &layout, &kernel).unwrap(), 0.0);
        }
        let e = layer_energy(
            &single(&[0.0, 1.0, 0.0, 0.0]),
            &VisualLayout::sequence(4),
            &SpectralKernel::Laplacian1D,
        )
        .unwrap();
        assert!((e - 6f64.sqrt()).abs() < 1e-12);

        let row = [0.1, 0.3, 0.05, 0.2];
        let layout = VisualLayout::new(4, Some((2, 2))).unwrap();
        let one = layer_energy(&single(&row), &layout, &SpectralKernel::Laplacian2D).unwrap();
        let both = AttentionSlice::from_rows(0, &[row.to_vec(), row.to_vec()]).unwrap();
        let two = layer_energy(&both, &layout, &SpectralKernel::Laplacian2D).unwrap();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn uniform_two_by_two_energy_is_one() {
        let layout = VisualLayout::new(4, Some((2, 2))).unwrap();
        let e = layer_energy(&single(&[0.25; 4]), &layout, &SpectralKernel::Laplacian2D).unwrap();
        assert!((e - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_token_grid_energy_is_four_times_mean() {
        let layout = VisualLayout::new(1, Some((1, 1))).unwrap();
        let s = AttentionSlice::from_rows(0, &[vec![0.2], vec![0.4]]).unwrap();
        let e = layer_energy(&s, &layout, &SpectralKernel::Laplacian2D).unwrap();
        assert!((e - 4.0 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn kernel_layout_mismatch() {
        let s = single(&[0.25; 4]);
        let line = VisualLayout::sequence(4);
        assert!(matches!(
            layer_energy(&s, &line, &SpectralKernel::Sobel),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            layer_energy(&s, &line, &SpectralKernel::log()),
            Err(Error::Config(_))
        ));
        // 5-point Laplacian without a grid uses the 1-D fallback.
        let fallback = layer_energy(&s, &line, &SpectralKernel::Laplacian2D).unwrap();
        let explicit = layer_energy(&s, &line, &SpectralKernel::Laplacian1D).unwrap();
        assert_eq!(fallback, explicit);
        let wrong = VisualLayout::sequence(5);
        assert!(layer_energy(&s, &wrong, &SpectralKernel::Laplacian1D).is_err());
    }

    #[test]
    fn entropy_examples() {
        let h = shannon_entropy(&single(&[0.25; 4])).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert_eq!(shannon_entropy(&single(&[0.0, 0.7, 0.0, 0.0])).unwrap(), 0.0);
        let h = shannon_entropy(&single(&[0.5, 0.5, 0.0, 0.0])).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            shannon_entropy(&single(&[0.0; 3])),
            Err(Error::ZeroMass { .. })
        ));
    }

    #[test]
    fn text_energy_examples() {
        assert_eq!(text_energy(Some(&single(&[0.0; 5]))).unwrap(), 0.0);
        assert!((text_energy(Some(&single(&[0.3]))).unwrap() - 0.6).abs() < 1e-15);
        let e = text_energy(Some(&single(&[0.0, 1.0, 0.0]))).unwrap();
        assert!((e - 6f64.sqrt()).abs() < 1e-12);
        assert!(matches!(text_energy(None), Err(Error::FeatureUnavailable(_))));
    }

    #[test]
    fn log_kernel_is_zero_sum_and_center_negative() {
        let k = LogKernel::default();
        assert_eq!(k.weights().len(), 25);
        assert!(k.weights().iter().sum::<f64>().abs() < 1e-12);
        assert!(k.weights()[12] < 0.0);
    }

    #[test]
    fn opposing_heads_norm_average_exceeds_average_norm() {
        let layout = VisualLayout::new(4, Some((2, 2))).unwrap();
        let s = AttentionSlice::from_rows(0, &[vec![0.8, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.8]])
            .unwrap();
        let per_head = layer_energy(&s, &layout, &SpectralKernel::Laplacian2D).unwrap();
        let averaged = single(&s.head_average());
        let of_mean = layer_energy(&averaged, &layout, &SpectralKernel::Laplacian2D).unwrap();
        assert!(per_head > of_mean + 1e-3, "{per_head} vs {of_mean}");
    }

    #[test]
    fn permutation_changes_energy_not_mass_or_entropy() {
        let layout = VisualLayout::new(4, Some((2, 2))).unwrap();
        let a = single(&[0.4, 0.0, 0.0, 0.4]);
        let b = single(&[0.4, 0.4, 0.0, 0.0]);
        let ea = layer_energy(&a, &layout, &SpectralKernel::Laplacian2D).unwrap();
        let eb = layer_energy(&b, &layout, &SpectralKernel::Laplacian2D).unwrap();
        assert!((ea - eb).abs() > 1e-3);
        assert_eq!(visual_mass(&a), visual_mass(&b));
        assert_eq!(shannon_entropy(&a).unwrap(), shannon_entropy(&b).unwrap());
    }

    #[test]
    fn normalized_basis_divides_by_mass() {
        let layout = VisualLayout::new(4, Some((2, 2))).unwrap();
        let s = single(&[0.1, 0.05, 0.05, 0.0]);
        let raw = layer_energy(&s, &layout, &SpectralKernel::Laplacian2D).unwrap();
        let norm =
            layer_energy_in_basis(&s, &layout, &SpectralKernel::Laplacian2D, EnergyBasis::Normalized)
                .unwrap();
        assert!((norm - raw / 0.2).abs() < 1e-12);
    }

    fn slice_strategy() -> impl Strategy<Value = (AttentionSlice, VisualLayout)> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(heads, rows, cols)| {
            proptest::collection::vec(0.0f64..1.0, heads * rows * cols).prop_map(move |raw| {
                let n = rows * cols;
                let mut values = raw;
                for row in values.chunks_mut(n) {
                    let s: f64 = row.iter().sum::<f64>().max(1.0);
                    row.iter_mut().for_each(|v| *v /= s);
                }
                (
                    AttentionSlice::new(0, heads, n, values).unwrap(),
                    VisualLayout::new(n, Some((rows, cols))).unwrap(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn energy_is_positively_homogeneous((slice, layout) in slice_strategy(), c in 0.0f64..1.0) {
            for kernel in [SpectralKernel::Laplacian2D, SpectralKernel::Laplacian1D, SpectralKernel::Sobel, SpectralKernel::log()] {
                let base = layer_energy(&slice, &layout, &kernel).unwrap();
                let scaled = layer_energy(&slice.scaled(c).unwrap(), &layout, &kernel).unwrap();
                prop_assert!((scaled - c * base).abs() <= 1e-12 * (1.0 + base));
            }
        }

        #[test]
        fn mass_and_entropy_ignore_permutations((slice, _layout) in slice_strategy(), seed in any::<u64>()) {
            let n = slice.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut state = seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (state >> 33) as usize % (i + 1));
            }
            let mut permuted = Vec::with_capacity(slice.values().len());
            for h in 0..slice.heads() {
                let row = slice.head(h);
                permuted.extend(perm.iter().map(|&p| row[p]));
            }
            let other = AttentionSlice::new(0, slice.heads(), n, permuted).unwrap();
            prop_assert!((visual_mass(&slice) - visual_mass(&other)).abs() < 1e-12);
            if visual_mass(&slice) > 0.0 {
                let a = shannon_entropy(&slice).unwrap();
                let b = shannon_entropy(&other).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn norm_average_dominates_average_norm((slice, layout) in slice_strategy()) {
            let per_head = layer_energy(&slice, &layout, &SpectralKernel::Laplacian2D).unwrap();
            let averaged = AttentionSlice::new(0, 1, slice.len(), slice.head_average()).unwrap();
            let of_mean = layer_energy(&averaged, &layout, &SpectralKernel::Laplacian2D).unwrap();
            prop_assert!(per_head + 1e-12 >= of_mean);
        }
    }
}
