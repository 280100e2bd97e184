//! Layer scoring by high-frequency attention energy and closed-form
//! contrastive remapping of next-token logits, replayed over recorded traces.
//!
//! The pipeline per decoding step:
//!
//! 1. [`energy`] scores each candidate layer's visual attention slice.
//! 2. [`select`] picks the highest- and lowest-energy layers.
//! 3. [`remap`] contrasts the final logits against the peak layer, adds a
//!    confidence-gated correction from the minimum layer, and takes the argmax
//!    inside the final layer's top-k / nucleus mask.
//!
//! [`engine`] drives this over a [`trace`] file. [`theory`] holds the grid
//! models used to check the energy bounds numerically and [`bench`] times the
//! per-step overhead.

pub mod bench;
pub mod energy;
pub mod engine;
pub mod error;
pub mod remap;
pub mod select;
pub mod theory;
pub mod trace;

pub use energy::{
    layer_energy, visual_mass, AttentionSlice, EnergyBasis, SpectralKernel, VisualLayout,
};
pub use engine::{run_decode, DecodeMode, DecodePolicy, DecodeRun, StepDiagnostics};
pub use error::{Error, ErrorClass, Result};
pub use remap::{compose_full, LogitView, RemapConfig, RemapOutcome, Remapper};
pub use select::{
    score_layers, select_by_signal, select_min, select_peak, CandidateLayerSet, Direction,
    EnergyProfile, Signal,
};
pub use trace::{StepRecord, Trace, TraceManifest};
