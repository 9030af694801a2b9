//! Replay a policy over a dataset and summarize accuracy and depth.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{decode_sequence, Policy};
use crate::trace::{Dataset, Traces};

/// `sum(L * n_i) / sum(i * n_i)` for per-exit unit counts `n_1..n_L`.
pub fn speedup(exit_counts: &[u64]) -> f64 {
    let layers = exit_counts.len() as f64;
    let (total, depth) = depth_sums(exit_counts);
    layers * total / depth
}

/// `1 - sum(i * n_i) / sum(L * n_i)`.
pub fn time_reduction(exit_counts: &[u64]) -> f64 {
    let layers = exit_counts.len() as f64;
    let (total, depth) = depth_sums(exit_counts);
    1.0 - depth / (layers * total)
}

fn depth_sums(exit_counts: &[u64]) -> (f64, f64) {
    exit_counts
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(n, d), (i, &c)| (n + c as f64, d + ((i + 1) as u64 * c) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    /// Decision units: samples, or emitted tokens for sequence data.
    pub sample_count: u64,
    /// Absent when any unit is unlabeled.
    pub accuracy: Option<f64>,
    pub speedup: f64,
    pub time_reduction: f64,
    /// `n_i`: units answered by exit `i`.
    pub exit_counts: Vec<u64>,
    /// Error among units answered by exit `i`; absent when nobody exited there
    /// or labels are missing.
    pub per_exit_error: Vec<Option<f64>>,
    /// Sequence data only: sequences that never emitted the end token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unterminated: Option<u64>,
}

/// Outcome of one decision unit: exit layer and correctness (if labeled).
type Unit = (usize, Option<bool>);

pub fn evaluate(data: &Dataset, policy: &Policy) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let layers = data.layers();
    let prepared = policy.prepare(layers)?;

    let (units, accuracy_denominator, unterminated): (Vec<Unit>, Option<u64>, Option<u64>) =
        match data.traces() {
            Traces::Classification(traces) => {
                let units: Vec<Unit> = traces
                    .par_iter()
                    .map(|t| {
                        let d = prepared.decide(t);
                        (d.exit_layer, t.true_label().map(|y| y == d.label))
                    })
                    .collect();
                let denom = units.iter().all(|u| u.1.is_some()).then_some(units.len() as u64);
                (units, denom, None)
            }
            Traces::Sequence { traces, .. } => {
                let decoded: Vec<_> = traces.par_iter().map(|s| (s, decode_sequence(s, &prepared))).collect();
                let mut units = Vec::new();
                let mut denom = Some(0u64);
                let mut open = 0;
                for (seq, d) in &decoded {
                    let reference = seq.reference_tokens();
                    for (k, (&tok, &exit)) in d.tokens.iter().zip(&d.exit_layers).enumerate() {
                        units.push((exit, reference.map(|r| r.get(k) == Some(&tok))));
                    }
                    // Missing and surplus tokens both count against accuracy.
                    denom = match (denom, reference) {
                        (Some(n), Some(r)) => Some(n + d.tokens.len().max(r.len()) as u64),
                        _ => None,
                    };
                    open += u64::from(!d.terminated);
                }
                (units, denom, Some(open))
            }
        };

    let mut exit_counts = vec![0u64; layers];
    let mut wrong_at = vec![0u64; layers];
    let mut correct = 0u64;
    for &(exit, ok) in &units {
        exit_counts[exit - 1] += 1;
        match ok {
            Some(true) => correct += 1,
            Some(false) => wrong_at[exit - 1] += 1,
            None => {}
        }
    }
    if units.is_empty() {
        return Err(Error::EmptyData);
    }
    let labeled = accuracy_denominator.is_some();
    let per_exit_error = exit_counts
        .iter()
        .zip(&wrong_at)
        .map(|(&n, &w)| (labeled && n > 0).then(|| w as f64 / n as f64))
        .collect();

    Ok(EvalReport {
        policy: policy.to_string(),
        sample_count: units.len() as u64,
        accuracy: accuracy_denominator.map(|d| correct as f64 / d as f64),
        speedup: speedup(&exit_counts),
        time_reduction: time_reduction(&exit_counts),
        exit_counts,
        per_exit_error,
        unterminated,
    })
}

/// One report per policy, in the given order, over the same data.
pub fn compare(data: &Dataset, policies: &[Policy]) -> Result<Vec<EvalReport>> {
    if policies.is_empty() {
        return Err(Error::Domain("compare needs at least one policy".into()));
    }
    policies.iter().map(|p| evaluate(data, p)).collect()
}

/// Plain-text table with accuracy (%) and speedup columns.
pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.policy.chars().count())
        .max()
        .unwrap_or(0)
        .max("Policy".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "Policy", "Acc", "Speed");
    for r in reports {
        let acc = r.accuracy.map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a));
        let pad = width - r.policy.chars().count();
        let _ = writeln!(out, "{}{}  {:>7}  {:>6.2}x", r.policy, " ".repeat(pad), acc, r.speedup);
    }
    out
}
