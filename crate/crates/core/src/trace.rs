//! Multi-exit inference traces.
//!
//! A [`SampleTrace`] records, for one input, the class distribution produced
//! by every exit classifier in depth order. Everything downstream (policies,
//! calibration, evaluation, the performance-condition checker) replays these
//! traces instead of running a network.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on `sum(probs) == 1`.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Class index.
pub type Label = usize;

/// A normalized class distribution with at least two classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::validation(
                "class-count",
                format!("need at least 2 classes, got {}", probs.len()),
            ));
        }
        if let Some((c, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::validation(
                "probability-range",
                format!("class {c} has probability {p}, outside [0, 1]"),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::validation(
                "normalization",
                format!("probabilities sum to {sum}, expected 1 within {NORMALIZATION_TOLERANCE:e}"),
            ));
        }
        Ok(ProbVector(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// Argmax (lowest index on ties) and the maximum probability.
    pub fn argmax(&self) -> (Label, f64) {
        let mut best = 0;
        for (c, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = c;
            }
        }
        (best, self.0[best])
    }
}

/// Output of the exit classifier attached after layer `exit_index` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    exit_index: usize,
    probs: ProbVector,
    label: Label,
    confidence: f64,
}

impl ExitRecord {
    pub fn new(exit_index: usize, probs: ProbVector) -> Self {
        let (label, confidence) = probs.argmax();
        ExitRecord {
            exit_index,
            probs,
            label,
            confidence,
        }
    }

    pub fn exit_index(&self) -> usize {
        self.exit_index
    }

    pub fn probs(&self) -> &ProbVector {
        &self.probs
    }

    /// Predicted label and its confidence (the maximum class probability).
    pub fn predict(&self) -> (Label, f64) {
        (self.label, self.confidence)
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// One input's per-exit distributions, ordered by depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    id: String,
    true_label: Option<Label>,
    records: Vec<ExitRecord>,
}

impl SampleTrace {
    /// Build a trace from per-exit probability rows (row `i` is exit `i + 1`).
    pub fn new(id: impl Into<String>, true_label: Option<Label>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, row)| Ok(ExitRecord::new(i + 1, ProbVector::new(row)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(id, true_label, records)
    }

    pub fn from_records(
        id: impl Into<String>,
        true_label: Option<Label>,
        records: Vec<ExitRecord>,
    ) -> Result<Self> {
        let id = id.into();
        if records.is_empty() {
            return Err(Error::validation("layer-count", format!("trace `{id}` has no exits")));
        }
        for (i, r) in records.iter().enumerate() {
            if r.exit_index != i + 1 {
                return Err(Error::validation(
                    "exit-index",
                    format!("trace `{id}`: position {} holds exit {}", i + 1, r.exit_index),
                ));
            }
        }
        let classes = records[0].probs.classes();
        if let Some(r) = records.iter().find(|r| r.probs.classes() != classes) {
            return Err(Error::validation(
                "class-count",
                format!(
                    "trace `{id}`: exit {} has {} classes, exit 1 has {classes}",
                    r.exit_index,
                    r.probs.classes()
                ),
            ));
        }
        if let Some(y) = true_label {
            if y >= classes {
                return Err(Error::validation(
                    "label-range",
                    format!("trace `{id}`: label {y} but only {classes} classes"),
                ));
            }
        }
        Ok(SampleTrace {
            id,
            true_label,
            records,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn true_label(&self) -> Option<Label> {
        self.true_label
    }

    pub fn records(&self) -> &[ExitRecord] {
        &self.records
    }

    /// Exit `t`, 1-based.
    pub fn record(&self, t: usize) -> &ExitRecord {
        &self.records[t - 1]
    }

    pub fn layers(&self) -> usize {
        self.records.len()
    }

    pub fn classes(&self) -> usize {
        self.records[0].probs.classes()
    }

    pub fn predictions(&self) -> impl Iterator<Item = Label> + '_ {
        self.records.iter().map(ExitRecord::label)
    }

    /// Label of the final exit.
    pub fn final_prediction(&self) -> Label {
        self.records[self.records.len() - 1].label
    }

    pub(crate) fn require_label(&self) -> Result<Label> {
        self.true_label.ok_or_else(|| Error::LabelRequired {
            id: self.id.clone(),
        })
    }

    pub(crate) fn with_label(mut self, label: Option<Label>) -> Self {
        self.true_label = label;
        self
    }
}

/// Label and confidence of one exit record.
pub fn predict(record: &ExitRecord) -> (Label, f64) {
    record.predict()
}

/// Number of adjacent prediction changes among exits `1..=upto`.
pub fn prediction_change_count(trace: &SampleTrace, upto: usize) -> Result<usize> {
    if upto == 0 || upto > trace.layers() {
        return Err(Error::Range {
            what: "exit index",
            value: upto.to_string(),
            range: format!("1..={}", trace.layers()),
        });
    }
    Ok(trace.records[..upto]
        .windows(2)
        .filter(|w| w[0].label != w[1].label)
        .count())
}

/// An autoregressively decoded sequence: one [`SampleTrace`] per decoding step,
/// classes are vocabulary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTrace {
    id: String,
    token_traces: Vec<SampleTrace>,
    eos_token: Label,
    reference_tokens: Option<Vec<Label>>,
}

impl SequenceTrace {
    /// Token step `k` inherits `reference_tokens[k]` as its label when present.
    pub fn new(
        id: impl Into<String>,
        token_traces: Vec<SampleTrace>,
        eos_token: Label,
        reference_tokens: Option<Vec<Label>>,
    ) -> Result<Self> {
        let id = id.into();
        if token_traces.is_empty() {
            return Err(Error::validation("token-count", format!("sequence `{id}` has no token steps")));
        }
        let layers = token_traces[0].layers();
        let classes = token_traces[0].classes();
        for (k, t) in token_traces.iter().enumerate() {
            if t.layers() != layers {
                return Err(Error::validation(
                    "layer-count",
                    format!("sequence `{id}` step {k} has {} exits, step 0 has {layers}", t.layers()),
                ));
            }
            if t.classes() != classes {
                return Err(Error::validation(
                    "class-count",
                    format!("sequence `{id}` step {k} has {} classes, step 0 has {classes}", t.classes()),
                ));
            }
        }
        if eos_token >= classes {
            return Err(Error::validation(
                "eos-range",
                format!("sequence `{id}`: eos token {eos_token} but only {classes} classes"),
            ));
        }
        if let Some(r) = reference_tokens.as_ref().and_then(|r| r.iter().find(|&&t| t >= classes)) {
            return Err(Error::validation(
                "label-range",
                format!("sequence `{id}`: reference token {r} but only {classes} classes"),
            ));
        }
        let token_traces = token_traces
            .into_iter()
            .enumerate()
            .map(|(k, t)| {
                let label = reference_tokens.as_ref().and_then(|r| r.get(k).copied());
                t.with_label(label)
            })
            .collect();
        Ok(SequenceTrace {
            id,
            token_traces,
            eos_token,
            reference_tokens,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn token_traces(&self) -> &[SampleTrace] {
        &self.token_traces
    }

    pub fn eos_token(&self) -> Label {
        self.eos_token
    }

    pub fn reference_tokens(&self) -> Option<&[Label]> {
        self.reference_tokens.as_deref()
    }

    pub fn layers(&self) -> usize {
        self.token_traces[0].layers()
    }

    pub fn classes(&self) -> usize {
        self.token_traces[0].classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Traces {
    Classification(Vec<SampleTrace>),
    Sequence {
        eos_token: Label,
        traces: Vec<SequenceTrace>,
    },
}

/// A homogeneous collection of traces: every trace has the same layer and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    layers: usize,
    classes: usize,
    split: Option<Split>,
    traces: Traces,
}

impl Dataset {
    pub fn classification(
        layers: usize,
        classes: usize,
        split: Option<Split>,
        traces: Vec<SampleTrace>,
    ) -> Result<Self> {
        check_dims(layers, classes)?;
        for t in &traces {
            check_trace_dims(t.id(), t.layers(), t.classes(), layers, classes)?;
        }
        Ok(Dataset {
            layers,
            classes,
            split,
            traces: Traces::Classification(traces),
        })
    }

    pub fn sequence(
        layers: usize,
        classes: usize,
        split: Option<Split>,
        eos_token: Label,
        traces: Vec<SequenceTrace>,
    ) -> Result<Self> {
        check_dims(layers, classes)?;
        if eos_token >= classes {
            return Err(Error::validation(
                "eos-range",
                format!("eos token {eos_token} but only {classes} classes"),
            ));
        }
        for t in &traces {
            check_trace_dims(t.id(), t.layers(), t.classes(), layers, classes)?;
            if t.eos_token() != eos_token {
                return Err(Error::shape(format!(
                    "sequence `{}` declares eos {} but the dataset uses {eos_token}",
                    t.id(),
                    t.eos_token()
                )));
            }
        }
        Ok(Dataset {
            layers,
            classes,
            split,
            traces: Traces::Sequence { eos_token, traces },
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    pub fn traces(&self) -> &Traces {
        &self.traces
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self.traces, Traces::Sequence { .. })
    }

    /// Number of top-level traces (samples or sequences).
    pub fn len(&self) -> usize {
        match &self.traces {
            Traces::Classification(t) => t.len(),
            Traces::Sequence { traces, .. } => traces.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decision units: the samples themselves, or every recorded token step of
    /// every sequence (labeled from the reference tokens).
    pub fn units(&self) -> Vec<&SampleTrace> {
        match &self.traces {
            Traces::Classification(t) => t.iter().collect(),
            Traces::Sequence { traces, .. } => traces.iter().flat_map(|s| s.token_traces.iter()).collect(),
        }
    }

    /// Decision units, failing on an empty dataset or any unlabeled unit.
    pub fn labeled_units(&self) -> Result<Vec<&SampleTrace>> {
        let units = self.units();
        if units.is_empty() {
            return Err(Error::EmptyData);
        }
        if let Some(u) = units.iter().find(|u| u.true_label.is_none()) {
            return Err(Error::LabelRequired { id: u.id.clone() });
        }
        Ok(units)
    }

    pub fn find(&self, id: &str) -> Option<&SampleTrace> {
        match &self.traces {
            Traces::Classification(t) => t.iter().find(|t| t.id == id),
            Traces::Sequence { .. } => None,
        }
    }

    pub fn find_sequence(&self, id: &str) -> Option<&SequenceTrace> {
        match &self.traces {
            Traces::Classification(_) => None,
            Traces::Sequence { traces, .. } => traces.iter().find(|t| t.id == id),
        }
    }
}

fn check_dims(layers: usize, classes: usize) -> Result<()> {
    if layers < 1 {
        return Err(Error::validation("layer-count", "dataset needs at least one exit"));
    }
    if classes < 2 {
        return Err(Error::validation(
            "class-count",
            format!("need at least 2 classes, got {classes}"),
        ));
    }
    Ok(())
}

fn check_trace_dims(id: &str, l: usize, c: usize, layers: usize, classes: usize) -> Result<()> {
    if l != layers {
        return Err(Error::validation(
            "layer-count",
            format!("trace `{id}` has {l} exits, dataset declares {layers}"),
        ));
    }
    if c != classes {
        return Err(Error::validation(
            "class-count",
            format!("trace `{id}` has {c} classes, dataset declares {classes}"),
        ));
    }
    Ok(())
}
