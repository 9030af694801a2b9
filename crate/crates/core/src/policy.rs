//! Exit policies.
//!
//! The ensemble rule treats every exit classifier as an expert. Its weighted
//! confidence accumulates while consecutive exits agree on the label and
//! resets to the current exit's weighted confidence when they disagree:
//!
//! ```text
//! S_1 = w_1 * C_1
//! S_i = S_{i-1} + w_i * C_i   if yhat_{i-1} == yhat_i
//!     = w_i * C_i             otherwise
//! ```
//!
//! A sample leaves at the first exit `i < L` with `S_i >= alpha_i`; the final
//! exit always answers. Confidence-threshold, patience and majority-vote
//! policies are provided as baselines.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ExitRecord, Label, SampleTrace, SequenceTrace};

/// Per-exit expert weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightScheme {
    /// `w_i = lambda * i`, `lambda` being the processing cost of one exit.
    Cost { lambda: f64 },
    /// `w_i = acc_i`, validation accuracy of exit `i`, unnormalized.
    Accuracy { acc: Vec<f64> },
    Explicit { weights: Vec<f64> },
}

impl WeightScheme {
    pub fn materialize(&self, layers: usize) -> Result<Vec<f64>> {
        match self {
            WeightScheme::Cost { lambda } => {
                if !(lambda.is_finite() && *lambda > 0.0) {
                    return Err(Error::Domain(format!("cost lambda must be positive, got {lambda}")));
                }
                Ok((1..=layers).map(|i| lambda * i as f64).collect())
            }
            WeightScheme::Accuracy { acc } => {
                check_len("accuracy weights", acc.len(), layers)?;
                if let Some(a) = acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                    return Err(Error::Domain(format!("accuracy weight {a} outside [0, 1]")));
                }
                Ok(acc.clone())
            }
            WeightScheme::Explicit { weights } => {
                check_len("explicit weights", weights.len(), layers)?;
                if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
                    return Err(Error::Domain(format!("explicit weight {w} must be positive")));
                }
                Ok(weights.clone())
            }
        }
    }
}

pub fn materialize_weights(scheme: &WeightScheme, layers: usize) -> Result<Vec<f64>> {
    scheme.materialize(layers)
}

fn check_len(what: &str, got: usize, layers: usize) -> Result<()> {
    if got != layers {
        return Err(Error::shape(format!("{what}: expected {layers} values, got {got}")));
    }
    Ok(())
}

/// Per-exit thresholds. The last entry is never consulted: the final exit always fires.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::shape("threshold vector is empty"));
        }
        if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::Domain(format!("threshold {a} must be finite and non-negative")));
        }
        Ok(ThresholdVector(alphas))
    }

    pub fn uniform(alpha: f64, layers: usize) -> Result<Self> {
        Self::new(vec![alpha; layers])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Beem {
        weights: WeightScheme,
        thresholds: ThresholdVector,
    },
    ConfidenceThreshold { tau: f64 },
    Patience { patience: usize },
    MajorityVote { quorum: usize },
    FinalOnly,
}

impl Policy {
    /// Verify parameter ranges and that the policy fits `layers` exits.
    pub fn check(&self, layers: usize) -> Result<()> {
        match self {
            Policy::Beem { weights, thresholds } => {
                weights.materialize(layers)?;
                check_len("thresholds", thresholds.len(), layers)
            }
            Policy::ConfidenceThreshold { tau } => {
                if *tau > 0.0 && *tau < 1.0 {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("confidence threshold {tau} outside (0, 1)")))
                }
            }
            Policy::Patience { patience } if *patience == 0 => {
                Err(Error::Domain("patience must be at least 1".into()))
            }
            Policy::MajorityVote { quorum } if *quorum == 0 => {
                Err(Error::Domain("quorum must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Decide where `trace` exits.
    ///
    /// Panics if the policy does not fit the trace's depth; call [`Policy::check`] first.
    pub fn decide(&self, trace: &SampleTrace) -> ExitDecision {
        match self {
            Policy::Beem { weights, thresholds } => {
                let w = weights
                    .materialize(trace.layers())
                    .expect("weight scheme does not fit trace depth");
                run_beem(trace, &w, thresholds)
            }
            Policy::ConfidenceThreshold { tau } => run_confidence(trace, *tau),
            Policy::Patience { patience } => run_patience(trace, *patience),
            Policy::MajorityVote { quorum } => run_majority(trace, *quorum),
            Policy::FinalOnly => run_final(trace),
        }
    }

    /// Resolve weights once so that repeated decisions skip materialization.
    pub fn prepare(&self, layers: usize) -> Result<PreparedPolicy<'_>> {
        self.check(layers)?;
        let weights = match self {
            Policy::Beem { weights, .. } => Some(weights.materialize(layers)?),
            _ => None,
        };
        Ok(PreparedPolicy { policy: self, weights })
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Beem { weights, thresholds } => {
                let w = match weights {
                    WeightScheme::Cost { lambda } => format!("cost λ={lambda}"),
                    WeightScheme::Accuracy { .. } => "accuracy".to_string(),
                    WeightScheme::Explicit { .. } => "explicit".to_string(),
                };
                let a = thresholds.as_slice();
                if a[..a.len().saturating_sub(1)].windows(2).all(|p| p[0] == p[1]) {
                    write!(f, "beem ({w}, α={})", a[0])
                } else {
                    write!(f, "beem ({w}, per-exit α)")
                }
            }
            Policy::ConfidenceThreshold { tau } => write!(f, "confidence (τ={tau})"),
            Policy::Patience { patience } => write!(f, "patience ({patience})"),
            Policy::MajorityVote { quorum } => write!(f, "majority (quorum {quorum})"),
            Policy::FinalOnly => f.write_str("final-only"),
        }
    }
}

/// A policy with its weights materialized for a fixed depth.
#[derive(Debug, Clone)]
pub struct PreparedPolicy<'a> {
    policy: &'a Policy,
    weights: Option<Vec<f64>>,
}

impl PreparedPolicy<'_> {
    pub fn decide(&self, trace: &SampleTrace) -> ExitDecision {
        match (self.policy, &self.weights) {
            (Policy::Beem { thresholds, .. }, Some(w)) => run_beem(trace, w, thresholds),
            (p, _) => p.decide(trace),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitDecision {
    /// 1-based exit that answered.
    pub exit_layer: usize,
    pub label: Label,
    pub score_at_exit: f64,
    /// The policy's running score at exits `1..=exit_layer`.
    pub per_layer_scores: Vec<f64>,
}

/// One step of the weighted-confidence recurrence. `prev` is `None` at exit 1.
pub fn beem_step(prev: Option<(f64, Label)>, record: &ExitRecord, weight: f64) -> (f64, Label) {
    let (label, conf) = record.predict();
    let own = weight * conf;
    match prev {
        Some((score, prev_label)) if prev_label == label => (score + own, label),
        _ => (own, label),
    }
}

pub fn run_beem(trace: &SampleTrace, weights: &[f64], thresholds: &ThresholdVector) -> ExitDecision {
    let layers = trace.layers();
    assert_eq!(weights.len(), layers, "weights do not match trace depth");
    assert_eq!(thresholds.len(), layers, "thresholds do not match trace depth");
    let alphas = thresholds.as_slice();

    let mut scores = Vec::with_capacity(layers);
    let mut state = None;
    for (i, record) in trace.records().iter().enumerate() {
        let (s, label) = beem_step(state, record, weights[i]);
        scores.push(s);
        state = Some((s, label));
        if i + 1 == layers || s >= alphas[i] {
            return ExitDecision {
                exit_layer: i + 1,
                label,
                score_at_exit: s,
                per_layer_scores: scores,
            };
        }
    }
    unreachable!("trace has at least one exit")
}

pub fn run_confidence(trace: &SampleTrace, tau: f64) -> ExitDecision {
    let layers = trace.layers();
    let mut scores = Vec::with_capacity(layers);
    for (i, record) in trace.records().iter().enumerate() {
        let (label, conf) = record.predict();
        scores.push(conf);
        if i + 1 == layers || conf >= tau {
            return ExitDecision {
                exit_layer: i + 1,
                label,
                score_at_exit: conf,
                per_layer_scores: scores,
            };
        }
    }
    unreachable!("trace has at least one exit")
}

/// Exits once the last `patience` adjacent prediction pairs all agree.
/// The running score is the current agreement streak.
pub fn run_patience(trace: &SampleTrace, patience: usize) -> ExitDecision {
    let layers = trace.layers();
    let mut scores = Vec::with_capacity(layers);
    let mut streak = 0usize;
    let mut prev: Option<Label> = None;
    for (i, record) in trace.records().iter().enumerate() {
        let label = record.label();
        streak = if prev == Some(label) { streak + 1 } else { 0 };
        prev = Some(label);
        scores.push(streak as f64);
        if i + 1 == layers || streak >= patience {
            return ExitDecision {
                exit_layer: i + 1,
                label,
                score_at_exit: streak as f64,
                per_layer_scores: scores,
            };
        }
    }
    unreachable!("trace has at least one exit")
}

/// Exits at the first exit `i >= quorum` where one label holds more than `i / 2`
/// of the votes cast by exits `1..=i`. The running score is the leading vote share.
pub fn run_majority(trace: &SampleTrace, quorum: usize) -> ExitDecision {
    let layers = trace.layers();
    let mut votes = vec![0usize; trace.classes()];
    let mut scores = Vec::with_capacity(layers);
    for (i, record) in trace.records().iter().enumerate() {
        let cast = i + 1;
        votes[record.label()] += 1;
        // Lowest index wins equal counts; irrelevant for a strict majority.
        let (leader, &count) = votes
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|(_, &v)| v)
            .expect("at least two classes");
        let share = count as f64 / cast as f64;
        scores.push(share);
        if cast >= quorum && 2 * count > cast {
            return ExitDecision {
                exit_layer: cast,
                label: leader,
                score_at_exit: share,
                per_layer_scores: scores,
            };
        }
        if cast == layers {
            return ExitDecision {
                exit_layer: cast,
                label: record.label(),
                score_at_exit: share,
                per_layer_scores: scores,
            };
        }
    }
    unreachable!("trace has at least one exit")
}

pub fn run_final(trace: &SampleTrace) -> ExitDecision {
    let layers = trace.layers();
    let (label, conf) = trace.record(layers).predict();
    ExitDecision {
        exit_layer: layers,
        label,
        score_at_exit: conf,
        per_layer_scores: trace.records().iter().map(ExitRecord::confidence).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDecision {
    pub tokens: Vec<Label>,
    pub exit_layers: Vec<usize>,
    /// False when no emitted token was the end-of-sequence token.
    pub terminated: bool,
}

/// Decode a sequence token by token. Every step is an independent decision
/// (ensemble scores do not carry across tokens); decoding stops after `eos`.
pub fn run_sequence(seq: &SequenceTrace, policy: &Policy) -> SequenceDecision {
    let prepared = policy
        .prepare(seq.layers())
        .expect("policy does not fit sequence depth");
    decode_sequence(seq, &prepared)
}

pub(crate) fn decode_sequence(seq: &SequenceTrace, policy: &PreparedPolicy<'_>) -> SequenceDecision {
    let mut tokens = Vec::new();
    let mut exit_layers = Vec::new();
    for step in seq.token_traces() {
        let d = policy.decide(step);
        tokens.push(d.label);
        exit_layers.push(d.exit_layer);
        if d.label == seq.eos_token() {
            return SequenceDecision {
                tokens,
                exit_layers,
                terminated: true,
            };
        }
    }
    SequenceDecision {
        tokens,
        exit_layers,
        terminated: false,
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::trace::tests::trace_from;

    const A: Label = 0;
    const B: Label = 1;
    const C: Label = 2;

    fn rec(label: Label, conf: f64) -> ExitRecord {
        let t = trace_from(&[(label, conf)], 3, None);
        t.record(1).clone()
    }

    #[test]
    fn step_examples() {
        let (s, y) = beem_step(Some((0.06, A)), &rec(A, 0.9), 0.2);
        assert_abs_diff_eq!(s, 0.24, epsilon = 1e-12);
        assert_eq!(y, A);
        let (s, y) = beem_step(Some((0.09, A)), &rec(B, 0.5), 0.2);
        assert_abs_diff_eq!(s, 0.10, epsilon = 1e-12);
        assert_eq!(y, B);
        let (s, _) = beem_step(None, &rec(A, 0.6), 0.1);
        assert_abs_diff_eq!(s, 0.06, epsilon = 1e-12);
    }

    #[test]
    fn beem_worked_examples() {
        let w = [0.1, 0.2, 0.3];
        let t = trace_from(&[(A, 0.6), (A, 0.9), (A, 0.9)], 3, None);
        let d = run_beem(&t, &w, &ThresholdVector::uniform(0.2, 3).unwrap());
        assert_eq!((d.exit_layer, d.label), (2, A));
        assert_abs_diff_eq!(d.score_at_exit, 0.24, epsilon = 1e-12);

        let d = run_beem(&t, &w, &ThresholdVector::uniform(0.0, 3).unwrap());
        assert_eq!(d.exit_layer, 1);

        let t = trace_from(&[(A, 0.9), (B, 0.5), (B, 0.6)], 3, None);
        let d = run_beem(&t, &w, &ThresholdVector::uniform(0.15, 3).unwrap());
        assert_eq!((d.exit_layer, d.label), (3, B));
        for (got, want) in d.per_layer_scores.iter().zip([0.09, 0.10, 0.28]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn final_exit_fires_below_threshold() {
        let t = trace_from(&[(A, 0.4), (B, 0.4)], 3, None);
        let d = run_beem(&t, &[1.0, 1.0], &ThresholdVector::uniform(100.0, 2).unwrap());
        assert_eq!((d.exit_layer, d.label), (2, B));
    }

    #[test]
    fn confidence_examples() {
        let t = trace_from(&[(A, 0.5), (A, 0.95), (A, 0.9)], 3, None);
        assert_eq!(run_confidence(&t, 0.9).exit_layer, 2);
        assert_eq!(run_confidence(&t, 1.0 / 3.0).exit_layer, 1);
        let t = trace_from(&[(A, 0.5), (A, 0.6), (A, 0.7)], 3, None);
        assert_eq!(run_confidence(&t, 0.9).exit_layer, 3);
    }

    #[test]
    fn patience_examples() {
        let t = trace_from(&[(A, 0.9), (A, 0.9), (B, 0.9), (B, 0.9), (B, 0.9)], 3, None);
        let d = run_patience(&t, 2);
        assert_eq!((d.exit_layer, d.label), (5, B));
        let t = trace_from(&[(A, 0.9), (A, 0.9), (A, 0.9)], 3, None);
        assert_eq!(run_patience(&t, 2).exit_layer, 3);
        assert_eq!(run_patience(&t, 3).exit_layer, 3);
        assert_eq!(run_patience(&t, 1).exit_layer, 2);
    }

    #[test]
    fn majority_examples() {
        let t = trace_from(&[(A, 0.9), (B, 0.9), (A, 0.9)], 3, None);
        let d = run_majority(&t, 3);
        assert_eq!((d.exit_layer, d.label), (3, A));
        assert_eq!(run_majority(&t, 1).exit_layer, 1);

        let preds: Vec<_> = [A, B, C, A, B, C].iter().map(|&y| (y, 0.6)).collect();
        let t = trace_from(&preds, 3, None);
        let d = run_majority(&t, 3);
        assert_eq!((d.exit_layer, d.label), (6, C));
    }

    #[test]
    fn weight_materialization() {
        let w = materialize_weights(&WeightScheme::Cost { lambda: 0.1 }, 12).unwrap();
        for (i, wi) in w.iter().enumerate() {
            assert_abs_diff_eq!(*wi, 0.1 * (i + 1) as f64, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w[11], 1.2, epsilon = 1e-12);
        assert_eq!(materialize_weights(&WeightScheme::Cost { lambda: 1.0 }, 3).unwrap(), vec![1.0, 2.0, 3.0]);
        let acc = WeightScheme::Accuracy { acc: vec![0.7, 0.8, 0.9] };
        assert_eq!(acc.materialize(3).unwrap(), vec![0.7, 0.8, 0.9]);
        assert!(matches!(acc.materialize(4), Err(Error::Shape { .. })));
        let ex = WeightScheme::Explicit { weights: vec![1.0, 0.0] };
        assert!(matches!(ex.materialize(2), Err(Error::Domain(_))));
    }

    #[test]
    fn policy_parameter_ranges() {
        assert!(Policy::ConfidenceThreshold { tau: 1.0 }.check(3).is_err());
        assert!(Policy::Patience { patience: 0 }.check(3).is_err());
        assert!(Policy::MajorityVote { quorum: 0 }.check(3).is_err());
        let p = Policy::Beem {
            weights: WeightScheme::Cost { lambda: 0.1 },
            thresholds: ThresholdVector::uniform(1.0, 4).unwrap(),
        };
        assert!(p.check(3).is_err());
        assert!(p.check(4).is_ok());
        assert!(ThresholdVector::new(vec![-1.0]).is_err());
    }

    fn seq(preds: &[Label], eos: Label) -> SequenceTrace {
        let steps = preds
            .iter()
            .map(|&y| trace_from(&[(y, 0.6), (y, 0.9)], 4, None))
            .collect();
        SequenceTrace::new("s", steps, eos, None).unwrap()
    }

    #[test]
    fn sequence_stops_at_eos() {
        let s = seq(&[1, 3, 2], 3);
        let d = run_sequence(&s, &Policy::FinalOnly);
        assert_eq!(d.tokens, vec![1, 3]);
        assert_eq!(d.exit_layers, vec![2, 2]);
        assert!(d.terminated);

        let s = seq(&[1, 2], 3);
        let d = run_sequence(&s, &Policy::FinalOnly);
        assert_eq!(d.tokens, vec![1, 2]);
        assert!(!d.terminated);
    }

    #[test]
    fn sequence_single_eos_step() {
        let s = seq(&[3], 3);
        let p = Policy::Beem {
            weights: WeightScheme::Cost { lambda: 1.0 },
            thresholds: ThresholdVector::uniform(0.1, 2).unwrap(),
        };
        let d = run_sequence(&s, &p);
        assert_eq!(d.tokens, vec![3]);
        assert_eq!(d.exit_layers, vec![1]);
    }

    #[test]
    fn sequence_scores_reset_between_tokens() {
        // Step b's first exit alone scores 0.6 < 0.8; a score carried over from
        // step a (same label) would have exited there.
        let steps = vec![
            SampleTrace::new("a", None, vec![vec![0.05, 0.9, 0.05], vec![0.05, 0.9, 0.05]]).unwrap(),
            SampleTrace::new("b", None, vec![vec![0.3, 0.6, 0.1], vec![0.05, 0.05, 0.9]]).unwrap(),
        ];
        let s = SequenceTrace::new("s", steps, 2, None).unwrap();
        let p = Policy::Beem {
            weights: WeightScheme::Explicit { weights: vec![1.0, 1.0] },
            thresholds: ThresholdVector::uniform(0.8, 2).unwrap(),
        };
        let d = run_sequence(&s, &p);
        assert_eq!(d.tokens, vec![1, 2]);
        assert_eq!(d.exit_layers, vec![1, 2]);
        assert!(d.terminated);
    }
}
