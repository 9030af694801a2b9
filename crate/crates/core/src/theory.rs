//! Empirical check of the sufficient condition under which the ensemble exit
//! rule errs less often than the final exit alone.
//!
//! For each exit `t < L` the condition reads
//!
//! ```text
//! q_t < a_t / (a_t + (1/p - 1) * b_t^(t-1))
//! ```
//!
//! with `q_t` the standalone error of exit `t`, `p` the final exit's error,
//! `b_t = max(q_1..q_t) / min(q_1..q_t)` and `a_t = A_t^1 / A_t^0`, where
//! `A_t^c` is the probability of exiting at `t` given `c` prediction changes
//! among exits `1..=t`. The `A` terms are population constants in the
//! analysis; here they are estimated as conditional frequencies, and the
//! supporting counts are reported so thin estimates can be spotted.
//!
//! Satisfying the condition is sufficient, not necessary.

use serde::{Deserialize, Serialize};

use crate::calibration::final_error_rate;
use crate::error::{Error, Result};
use crate::trace::{prediction_change_count, Dataset};
use crate::policy::Policy;

/// `q_i`: fraction of units whose exit-`i` prediction is wrong, no exiting.
pub fn standalone_error_rates(data: &Dataset) -> Result<Vec<f64>> {
    let units = data.labeled_units()?;
    let mut wrong = vec![0usize; data.layers()];
    for u in &units {
        let y = u.true_label();
        for (i, pred) in u.predictions().enumerate() {
            if Some(pred) != y {
                wrong[i] += 1;
            }
        }
    }
    Ok(wrong.iter().map(|&w| w as f64 / units.len() as f64).collect())
}

/// Conditional exit frequencies behind `a_t` for one exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AEstimate {
    pub exit: usize,
    /// Units with no prediction change among exits `1..=t`.
    pub support0: usize,
    /// ... of which exited at `t`.
    pub exits0: usize,
    /// Units with exactly one change.
    pub support1: usize,
    pub exits1: usize,
    /// `A_t^1 / A_t^0`; absent when either conditioning set is empty or `A_t^0 = 0`.
    pub a: Option<f64>,
}

/// Estimate `a_t` for exits `1..L-1` by replaying `policy` on every unit.
/// Labels are not needed.
pub fn estimate_a(data: &Dataset, policy: &Policy) -> Result<Vec<AEstimate>> {
    let layers = data.layers();
    let prepared = policy.prepare(layers)?;
    let mut est: Vec<AEstimate> = (1..layers)
        .map(|t| AEstimate {
            exit: t,
            support0: 0,
            exits0: 0,
            support1: 0,
            exits1: 0,
            a: None,
        })
        .collect();
    for u in data.units() {
        let exit = prepared.decide(u).exit_layer;
        for e in est.iter_mut() {
            let exited = usize::from(exit == e.exit);
            match prediction_change_count(u, e.exit)? {
                0 => {
                    e.support0 += 1;
                    e.exits0 += exited;
                }
                1 => {
                    e.support1 += 1;
                    e.exits1 += exited;
                }
                _ => {}
            }
        }
    }
    for e in est.iter_mut() {
        if e.support0 > 0 && e.support1 > 0 && e.exits0 > 0 {
            let a1 = e.exits1 as f64 / e.support1 as f64;
            let a0 = e.exits0 as f64 / e.support0 as f64;
            e.a = Some(a1 / a0);
        }
    }
    Ok(est)
}

/// `a / (a + (1/p - 1) * b^(t-1))`.
pub fn theorem_bound(a: f64, b: f64, p: f64, t: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("final error rate p = {p} outside (0, 1)")));
    }
    if !(a.is_finite() && a >= 0.0) {
        return Err(Error::Domain(format!("a = {a} must be finite and non-negative")));
    }
    if !(b.is_finite() && b >= 1.0) {
        return Err(Error::Domain(format!("b = {b} must be finite and at least 1")));
    }
    if t == 0 {
        return Err(Error::Domain("exit index must be at least 1".into()));
    }
    let exponent = i32::try_from(t - 1).map_err(|_| Error::Domain(format!("exit index {t} too large")))?;
    Ok(a / (a + (1.0 / p - 1.0) * b.powi(exponent)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitCondition {
    pub exit: usize,
    pub q: f64,
    pub a: Option<f64>,
    /// `max(q_1..q_t) / min(q_1..q_t)`; absent when the minimum is 0.
    pub b: Option<f64>,
    pub bound: Option<f64>,
    /// `q < bound`; absent when not estimable.
    pub satisfied: Option<bool>,
    pub estimable: bool,
    pub support: AEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub policy: String,
    /// Final-exit error rate.
    pub p: f64,
    pub exits: Vec<ExitCondition>,
    pub estimable_exits: usize,
    /// Conjunction of `satisfied` over estimable exits.
    pub all_satisfied: bool,
}

pub fn check_condition(data: &Dataset, policy: &Policy) -> Result<TheoremReport> {
    let q = standalone_error_rates(data)?;
    let p = final_error_rate(data)?;
    let a_est = estimate_a(data, policy)?;

    let mut q_max = f64::NEG_INFINITY;
    let mut q_min = f64::INFINITY;
    let exits: Vec<ExitCondition> = a_est
        .into_iter()
        .map(|support| {
            let t = support.exit;
            let q_t = q[t - 1];
            q_max = q_max.max(q_t);
            q_min = q_min.min(q_t);
            let b = (q_min > 0.0).then(|| q_max / q_min);
            let bound = match (support.a, b) {
                (Some(a), Some(b)) => theorem_bound(a, b, p, t).ok(),
                _ => None,
            };
            ExitCondition {
                exit: t,
                q: q_t,
                a: support.a,
                b,
                bound,
                satisfied: bound.map(|bd| q_t < bd),
                estimable: bound.is_some(),
                support,
            }
        })
        .collect();
    let estimable_exits = exits.iter().filter(|e| e.estimable).count();
    let all_satisfied = exits.iter().all(|e| e.satisfied != Some(false));
    Ok(TheoremReport {
        policy: policy.to_string(),
        p,
        exits,
        estimable_exits,
        all_satisfied,
    })
}
