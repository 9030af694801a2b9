//! Ensemble-style early-exit inference over replayable multi-exit traces.
//!
//! Exit classifiers are treated as experts whose weighted confidences add up
//! while consecutive exits agree on the label. This crate provides the exit
//! rule and its baselines ([`policy`]), threshold calibration
//! ([`calibration`]), replay evaluation ([`evaluation`]), an empirical check
//! of the condition under which early exiting beats the final layer
//! ([`theory`]), a seedable synthetic trace generator ([`synth`]) and the
//! trace, config and report file formats ([`trace_io`]).

pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod policy;
pub mod synth;
pub mod theory;
pub mod trace;
pub mod trace_io;

pub use calibration::{calibrate_classical, calibrate_error_rate, final_error_rate, CalibrationReport};
pub use error::{Error, Result};
pub use evaluation::{compare, evaluate, speedup, EvalReport};
pub use policy::{ExitDecision, Policy, ThresholdVector, WeightScheme};
pub use synth::{generate, SynthConfig};
pub use theory::{check_condition, standalone_error_rates, theorem_bound, TheoremReport};
pub use trace::{Dataset, ExitRecord, Label, ProbVector, SampleTrace, SequenceTrace, Split};
