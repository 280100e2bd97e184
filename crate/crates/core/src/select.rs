//! Per-step layer scoring and peak / minimum selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::energy::{
    layer_energy_in_basis, shannon_entropy, text_energy, visual_mass, AttentionSlice,
    EnergyBasis, SpectralKernel, VisualLayout,
};
use crate::error::{Error, Result};

/// Default candidate range `[8, 29)`.
pub const DEFAULT_LAYER_RANGE: (usize, usize) = (8, 29);

/// Strictly increasing, non-empty list of decoder layers to score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct CandidateLayerSet(Vec<usize>);

impl CandidateLayerSet {
    pub fn new(layers: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("candidate layer set is empty".into()));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "candidate layers must be strictly increasing: {layers:?}"
            )));
        }
        Ok(Self(layers))
    }

    /// Half-open range `[start, end)`.
    pub fn range(start: usize, end: usize) -> Result<Self> {
        Self::new((start..end).collect())
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    /// Checks every layer lies below the model depth.
    pub fn check_depth(&self, num_layers: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l >= num_layers) {
            Some(l) => Err(Error::Config(format!(
                "candidate layer {l} outside model depth {num_layers}"
            ))),
            None => Ok(()),
        }
    }
}

impl Default for CandidateLayerSet {
    fn default() -> Self {
        Self::range(DEFAULT_LAYER_RANGE.0, DEFAULT_LAYER_RANGE.1).expect("default range non-empty")
    }
}

impl FromStr for CandidateLayerSet {
    type Err = Error;

    /// Accepts `a:b` (half-open) or a comma list `8,12,20`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse layer set {s:?}"));
        let s = s.trim();
        if let Some((a, b)) = s.split_once(':') {
            let start: usize = a.trim().parse().map_err(|_| bad())?;
            let end: usize = b.trim().parse().map_err(|_| bad())?;
            return Self::range(start, end);
        }
        let layers = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}

impl fmt::Display for CandidateLayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let contiguous = self.0.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous && self.0.len() > 1 {
            write!(f, "{}:{}", self.0[0], self.0[self.0.len() - 1] + 1)
        } else {
            let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerScore {
    pub layer: usize,
    pub energy: f64,
    pub mass: f64,
    /// Zero when the slice has no visual mass.
    pub entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_energy: Option<f64>,
}

/// One record per candidate layer, in candidate order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyProfile {
    records: Vec<LayerScore>,
}

impl EnergyProfile {
    pub fn new(records: Vec<LayerScore>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("energy profile is empty".into()));
        }
        for r in &records {
            let scores = [r.energy, r.mass, r.entropy, r.text_energy.unwrap_or(0.0)];
            if scores.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Invalid(format!(
                    "layer {} has a negative or non-finite score",
                    r.layer
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[LayerScore] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&LayerScore> {
        self.records.iter().find(|r| r.layer == layer)
    }

    fn column(&self, signal: Signal) -> Option<Vec<f64>> {
        self.records
            .iter()
            .map(|r| match signal {
                Signal::Energy => Some(r.energy),
                Signal::Mass => Some(r.mass),
                Signal::Entropy => Some(r.entropy),
                Signal::TextEnergy => r.text_energy,
            })
            .collect()
    }
}

/// Score used to rank layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signal {
    #[default]
    Energy,
    Mass,
    Entropy,
    TextEnergy,
}

impl Signal {
    pub fn name(self) -> &'static str {
        match self {
            Signal::Energy => "energy",
            Signal::Mass => "mass",
            Signal::Entropy => "entropy",
            Signal::TextEnergy => "text-energy",
        }
    }
}

impl FromStr for Signal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(Signal::Energy),
            "mass" => Ok(Signal::Mass),
            "entropy" => Ok(Signal::Entropy),
            "text-energy" | "text_energy" => Ok(Signal::TextEnergy),
            other => Err(Error::Config(format!("unknown signal {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Max,
    Min,
}

impl Direction {
    pub fn opposite(self) -> Self {
        match self {
            Direction::Max => Direction::Min,
            Direction::Min => Direction::Max,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Max => "max",
            Direction::Min => "min",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Direction::Max),
            "min" => Ok(Direction::Min),
            other => Err(Error::Config(format!("unknown direction {other:?}"))),
        }
    }
}

/// Scores every candidate layer on the raw slice.
pub fn score_layers(
    step_attention: &BTreeMap<usize, AttentionSlice>,
    layout: &VisualLayout,
    kernel: &SpectralKernel,
    candidates: &CandidateLayerSet,
) -> Result<EnergyProfile> {
    score_layers_with(
        step_attention,
        None,
        layout,
        kernel,
        candidates,
        EnergyBasis::Raw,
    )
}

/// Like [`score_layers`], with an energy basis and optional text slices.
pub fn score_layers_with(
    step_attention: &BTreeMap<usize, AttentionSlice>,
    text_attention: Option<&BTreeMap<usize, AttentionSlice>>,
    layout: &VisualLayout,
    kernel: &SpectralKernel,
    candidates: &CandidateLayerSet,
    basis: EnergyBasis,
) -> Result<EnergyProfile> {
    let mut records = Vec::with_capacity(candidates.len());
    for &layer in candidates.layers() {
        let slice = step_attention
            .get(&layer)
            .ok_or(Error::IncompleteTrace { layer })?;
        let text = match text_attention {
            Some(map) => Some(text_energy(Some(
                map.get(&layer).ok_or(Error::IncompleteTrace { layer })?,
            ))?),
            None => None,
        };
        records.push(score_slice(slice, layout, kernel, basis, text)?);
    }
    EnergyProfile::new(records)
}

pub(crate) fn score_slice(
    slice: &AttentionSlice,
    layout: &VisualLayout,
    kernel: &SpectralKernel,
    basis: EnergyBasis,
    text_energy: Option<f64>,
) -> Result<LayerScore> {
    let mass = visual_mass(slice);
    let entropy = match shannon_entropy(slice) {
        Ok(h) => h,
        Err(Error::ZeroMass { .. }) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(LayerScore {
        layer: slice.layer(),
        energy: layer_energy_in_basis(slice, layout, kernel, basis)?,
        mass,
        entropy,
        text_energy,
    })
}

/// Layer with the largest energy; ties go to the lowest layer.
pub fn select_peak(profile: &EnergyProfile) -> usize {
    select_by_signal(profile, Signal::Energy, Direction::Max).expect("energy column always present")
}

/// Layer with the smallest energy; ties go to the lowest layer.
pub fn select_min(profile: &EnergyProfile) -> usize {
    select_by_signal(profile, Signal::Energy, Direction::Min).expect("energy column always present")
}

/// Arg-extremum of the chosen column. Only [`Signal::TextEnergy`] can fail,
/// when the profile was scored without text slices.
pub fn select_by_signal(profile: &EnergyProfile, signal: Signal, direction: Direction) -> Result<usize> {
    let column = profile.column(signal).ok_or_else(|| {
        Error::FeatureUnavailable(format!("profile carries no {} scores", signal.name()))
    })?;
    let mut best = 0;
    for (i, &v) in column.iter().enumerate().skip(1) {
        // Records are in ascending layer order, so strict comparison keeps the lowest layer.
        let better = match direction {
            Direction::Max => v > column[best],
            Direction::Min => v < column[best],
        };
        if better {
            best = i;
        }
    }
    Ok(profile.records[best].layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(layers: &[usize], energies: &[f64]) -> EnergyProfile {
        EnergyProfile::new(
            layers
                .iter()
                .zip(energies)
                .map(|(&layer, &energy)| LayerScore {
                    layer,
                    energy,
                    mass: 0.0,
                    entropy: 0.0,
                    text_energy: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_layer_sets() {
        let d: CandidateLayerSet = "8:29".parse().unwrap();
        assert_eq!(d, CandidateLayerSet::default());
        assert_eq!(d.len(), 21);
        assert_eq!(d.to_string(), "8:29");
        let l: CandidateLayerSet = "8,12,20".parse().unwrap();
        assert_eq!(l.layers(), &[8, 12, 20]);
        assert_eq!(l.to_string(), "8,12,20");
        assert!("12,8".parse::<CandidateLayerSet>().is_err());
        assert!("5:5".parse::<CandidateLayerSet>().is_err());
        assert!("a:b".parse::<CandidateLayerSet>().is_err());
        assert!(l.check_depth(20).is_err());
        assert!(l.check_depth(21).is_ok());
    }

    #[test]
    fn peak_and_min_examples() {
        let p = profile(&[8, 9, 10], &[0.2, 0.9, 0.5]);
        assert_eq!(select_peak(&p), 9);
        assert_eq!(select_min(&p), 8);
        let single = profile(&[14], &[0.3]);
        assert_eq!((select_peak(&single), select_min(&single)), (14, 14));
        let tie = profile(&[8, 9], &[0.5, 0.5]);
        assert_eq!((select_peak(&tie), select_min(&tie)), (8, 8));
    }

    #[test]
    fn select_by_other_signals() {
        let mut p = profile(&[3, 4], &[0.0, 0.0]);
        p.records[0].mass = 0.3;
        p.records[1].mass = 0.7;
        p.records[0].entropy = 1.38;
        p.records[1].entropy = 0.0;
        assert_eq!(select_by_signal(&p, Signal::Mass, Direction::Max).unwrap(), 4);
        assert_eq!(select_by_signal(&p, Signal::Entropy, Direction::Min).unwrap(), 4);
        assert!(matches!(
            select_by_signal(&p, Signal::TextEnergy, Direction::Max),
            Err(Error::FeatureUnavailable(_))
        ));
    }

    #[test]
    fn scoring_composes_energy_oracles() {
        // Energies √6, 0 and 1 built from the 1-D and 2×2 hand examples.
        let layout = VisualLayout::new(4, Some((2, 2))).unwrap();
        let mut step = BTreeMap::new();
        step.insert(8, AttentionSlice::new(8, 1, 4, vec![0.25; 4]).unwrap());
        step.insert(9, AttentionSlice::new(9, 1, 4, vec![0.0; 4]).unwrap());
        step.insert(10, AttentionSlice::new(10, 1, 4, vec![0.25; 4]).unwrap());
        let candidates = CandidateLayerSet::new(vec![8, 9, 10]).unwrap();
        let p = score_layers(&step, &layout, &SpectralKernel::Laplacian2D, &candidates).unwrap();
        let e: Vec<f64> = p.records().iter().map(|r| r.energy).collect();
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1] == 0.0 && (e[2] - 1.0).abs() < 1e-15);
        assert_eq!(select_peak(&p), 8);
        assert_eq!(select_min(&p), 9);
        assert_eq!(p.records()[1].entropy, 0.0);

        let line = VisualLayout::sequence(4);
        step.insert(9, AttentionSlice::new(9, 1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let p = score_layers(&step, &line, &SpectralKernel::Laplacian1D, &candidates).unwrap();
        assert!((p.records()[1].energy - 6f64.sqrt()).abs() < 1e-12);

        let one = CandidateLayerSet::new(vec![9]).unwrap();
        assert_eq!(score_layers(&step, &line, &SpectralKernel::Laplacian1D, &one).unwrap().len(), 1);

        let missing = CandidateLayerSet::new(vec![9, 11]).unwrap();
        assert!(matches!(
            score_layers(&step, &line, &SpectralKernel::Laplacian1D, &missing),
            Err(Error::IncompleteTrace { layer: 11 })
        ));
    }

    proptest! {
        #[test]
        fn selection_properties(energies in proptest::collection::vec(0.0f64..10.0, 1..30), scale in 0.01f64..100.0, keep in any::<u64>()) {
            let layers: Vec<usize> = (0..energies.len()).map(|i| 2 * i + 1).collect();
            let p = profile(&layers, &energies);
            let peak = select_peak(&p);
            let min = select_min(&p);
            let at = |l: usize| p.get(l).unwrap().energy;
            for r in p.records() {
                prop_assert!(at(min) <= r.energy && r.energy <= at(peak));
            }
            let scaled: Vec<f64> = energies.iter().map(|e| e * scale).collect();
            let q = profile(&layers, &scaled);
            prop_assert_eq!(select_peak(&q), peak);
            prop_assert_eq!(select_min(&q), min);
            prop_assert_eq!(select_by_signal(&p, Signal::Energy, Direction::Max).unwrap(), peak);

            // Subsets that retain the selected layer cannot do better.
            let subset: Vec<usize> = (0..layers.len())
                .filter(|&i| layers[i] == peak || layers[i] == min || (keep >> (i % 64)) & 1 == 1)
                .collect();
            let sub = profile(
                &subset.iter().map(|&i| layers[i]).collect::<Vec<_>>(),
                &subset.iter().map(|&i| energies[i]).collect::<Vec<_>>(),
            );
            prop_assert!(sub.get(select_peak(&sub)).unwrap().energy >= at(peak));
            prop_assert!(sub.get(select_min(&sub)).unwrap().energy <= at(min));
        }
    }
}
