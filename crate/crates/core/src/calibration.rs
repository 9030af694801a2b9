//! Threshold selection on a labeled validation set.
//!
//! Two procedures are provided:
//!
//! * [`calibrate_classical`] picks one uniform threshold from a grid by
//!   validation accuracy.
//! * [`calibrate_error_rate`] picks, for each exit `t = 1..L-1` in order, the
//!   smallest grid value whose exited-and-misclassified fraction at `t` is at
//!   most the final exit's error rate `p`. Thresholds of earlier exits are
//!   fixed first, so the population reaching exit `t` is exactly the one the
//!   deployed policy will see on the same data.
//!
//! Ensemble scores do not depend on thresholds, so both procedures compute
//! every unit's score sequence once ([`ScoreTable`]) and scan it per candidate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::speedup;
use crate::policy::{beem_step, Policy, ThresholdVector, WeightScheme};
use crate::trace::{Dataset, Label, SampleTrace};

/// Uniform-threshold search space of the classical method.
pub const CLASSICAL_GRID: [f64; 5] = [0.3, 0.6, 0.9, 1.2, 1.5];

/// `{0.5, 1.0, ..., 5.0, L}`: the error-rate method's search space. `L` keeps
/// every exit feasible whenever no weight exceeds 1.
pub fn error_rate_grid(layers: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (1..=10).map(|k| k as f64 * 0.5).collect();
    g.push(layers as f64);
    normalize_grid(&g, None).expect("static grid is valid")
}

/// Sort, dedupe and optionally append a sentinel value.
fn normalize_grid(grid: &[f64], sentinel: Option<f64>) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Domain("threshold grid is empty".into()));
    }
    if let Some(a) = grid.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::Domain(format!("grid value {a} must be finite and non-negative")));
    }
    let mut g = grid.to_vec();
    g.extend(sentinel);
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

/// Error rate of the final exit over all labeled units.
pub fn final_error_rate(val: &Dataset) -> Result<f64> {
    let units = val.labeled_units()?;
    let wrong = units
        .iter()
        .filter(|u| Some(u.final_prediction()) != u.true_label())
        .count();
    Ok(wrong as f64 / units.len() as f64)
}

/// Every unit's ensemble score and prediction at every exit.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    layers: usize,
    scores: Vec<Vec<f64>>,
    preds: Vec<Vec<Label>>,
    labels: Vec<Label>,
}

impl ScoreTable {
    pub fn build(units: &[&SampleTrace], weights: &[f64]) -> Result<Self> {
        let layers = weights.len();
        let mut scores = Vec::with_capacity(units.len());
        let mut preds = Vec::with_capacity(units.len());
        let mut labels = Vec::with_capacity(units.len());
        for u in units {
            if u.layers() != layers {
                return Err(Error::shape(format!(
                    "trace `{}` has {} exits, weights cover {layers}",
                    u.id(),
                    u.layers()
                )));
            }
            labels.push(u.require_label()?);
            let mut s_row = Vec::with_capacity(layers);
            let mut y_row = Vec::with_capacity(layers);
            let mut state = None;
            for (rec, &w) in u.records().iter().zip(weights) {
                let (s, y) = beem_step(state, rec, w);
                s_row.push(s);
                y_row.push(y);
                state = Some((s, y));
            }
            scores.push(s_row);
            preds.push(y_row);
        }
        Ok(ScoreTable {
            layers,
            scores,
            preds,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Units still running when exit `t` (1-based) is reached under `prefix`
    /// (thresholds of exits `1..t`).
    fn survivors(&self, prefix: &[f64], t: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| (0..t - 1).all(|i| self.scores[j][i] < prefix[i]))
            .collect()
    }

    fn stats_over(&self, alive: &[usize], alpha: f64, t: usize) -> ExitStats {
        let (mut stop, mut misc) = (0, 0);
        for &j in alive {
            if self.scores[j][t - 1] >= alpha {
                stop += 1;
                if self.preds[j][t - 1] != self.labels[j] {
                    misc += 1;
                }
            }
        }
        ExitStats::new(stop, misc)
    }

    pub fn exit_stats(&self, prefix: &[f64], alpha: f64, t: usize) -> Result<ExitStats> {
        if t == 0 || t > self.layers {
            return Err(Error::Range {
                what: "exit index",
                value: t.to_string(),
                range: format!("1..={}", self.layers),
            });
        }
        if prefix.len() < t - 1 {
            return Err(Error::shape(format!(
                "exit {t} needs {} fixed thresholds, got {}",
                t - 1,
                prefix.len()
            )));
        }
        Ok(self.stats_over(&self.survivors(prefix, t), alpha, t))
    }

    /// Exit layer of unit `j` under `thresholds`.
    fn exit_of(&self, j: usize, thresholds: &[f64]) -> usize {
        (0..self.layers - 1)
            .find(|&i| self.scores[j][i] >= thresholds[i])
            .map_or(self.layers, |i| i + 1)
    }
}

/// Coverage and error among units leaving at one exit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitStats {
    pub c_stop: usize,
    pub c_misc: usize,
    /// `c_misc / c_stop`, 0 when nobody exits.
    pub error_rate: f64,
}

impl ExitStats {
    fn new(c_stop: usize, c_misc: usize) -> Self {
        let error_rate = if c_stop == 0 {
            0.0
        } else {
            c_misc as f64 / c_stop as f64
        };
        ExitStats {
            c_stop,
            c_misc,
            error_rate,
        }
    }
}

/// Replay the ensemble rule on `val` with thresholds `fixed_prefix` on exits
/// `1..t` and count who leaves at exit `t` under candidate `alpha`.
pub fn exit_stats(
    val: &Dataset,
    weights: &WeightScheme,
    fixed_prefix: &[f64],
    alpha: f64,
    t: usize,
) -> Result<ExitStats> {
    let units = val.labeled_units()?;
    let w = weights.materialize(val.layers())?;
    ScoreTable::build(&units, &w)?.exit_stats(fixed_prefix, alpha, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMethod {
    ErrorRate,
    Classical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitCalibration {
    pub exit: usize,
    pub alpha: f64,
    pub c_stop: usize,
    pub c_misc: usize,
    pub error_rate: f64,
    /// Whether `error_rate <= p` holds at this exit.
    pub feasible: bool,
}

/// Validation accuracy and speedup of one uniform grid threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub accuracy: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: CalibrationMethod,
    pub weight_scheme: WeightScheme,
    /// Materialized per-exit weights.
    pub weights: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Exits `1..L-1`.
    pub per_exit: Vec<ExitCalibration>,
    /// Final-exit error rate the constraint was checked against.
    pub p: f64,
    pub grid: Vec<f64>,
    /// Classical method only: every grid value's validation outcome.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<GridPoint>,
}

impl CalibrationReport {
    pub fn threshold_vector(&self) -> Result<ThresholdVector> {
        ThresholdVector::new(self.thresholds.clone())
    }

    pub fn policy(&self) -> Result<Policy> {
        Ok(Policy::Beem {
            weights: self.weight_scheme.clone(),
            thresholds: self.threshold_vector()?,
        })
    }
}

fn check_p(p: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Domain(format!("error-rate bound p = {p} outside [0, 1]")))
    }
}

/// Per-exit thresholds: smallest grid value meeting `error_rate <= p`, exits in order.
///
/// `L` is always added to the grid. If even that is infeasible (possible only
/// with weights above 1), the exit is closed with a threshold just above the
/// largest score any survivor reaches there, and flagged infeasible.
pub fn calibrate_error_rate(
    val: &Dataset,
    weights: &WeightScheme,
    grid: &[f64],
    p_override: Option<f64>,
) -> Result<CalibrationReport> {
    let units = val.labeled_units()?;
    let layers = val.layers();
    let w = weights.materialize(layers)?;
    let grid = normalize_grid(grid, Some(layers as f64))?;
    let p = check_p(match p_override {
        Some(p) => p,
        None => final_error_rate(val)?,
    })?;
    let table = ScoreTable::build(&units, &w)?;

    let mut alive: Vec<usize> = (0..table.len()).collect();
    let mut thresholds = Vec::with_capacity(layers);
    let mut per_exit = Vec::with_capacity(layers.saturating_sub(1));
    for t in 1..layers {
        let stats: Vec<ExitStats> = grid
            .par_iter()
            .map(|&a| table.stats_over(&alive, a, t))
            .collect();
        let chosen = grid
            .iter()
            .zip(&stats)
            .find(|(_, s)| s.error_rate <= p)
            .map(|(&a, &s)| (a, s, true));
        let (alpha, s, feasible) = chosen.unwrap_or_else(|| {
            let top = alive
                .iter()
                .map(|&j| table.scores[j][t - 1])
                .fold(0.0, f64::max);
            let alpha = top.next_up();
            (alpha, table.stats_over(&alive, alpha, t), false)
        });
        per_exit.push(ExitCalibration {
            exit: t,
            alpha,
            c_stop: s.c_stop,
            c_misc: s.c_misc,
            error_rate: s.error_rate,
            feasible,
        });
        thresholds.push(alpha);
        alive.retain(|&j| table.scores[j][t - 1] < alpha);
    }
    // The final exit always answers; its threshold is recorded as L.
    thresholds.push(layers as f64);

    Ok(CalibrationReport {
        method: CalibrationMethod::ErrorRate,
        weight_scheme: weights.clone(),
        weights: w,
        thresholds,
        per_exit,
        p,
        grid,
        candidates: Vec::new(),
    })
}

/// One uniform threshold from `grid`, maximizing validation accuracy; ties go
/// to the higher speedup, then to the smaller threshold.
pub fn calibrate_classical(val: &Dataset, weights: &WeightScheme, grid: &[f64]) -> Result<CalibrationReport> {
    let units = val.labeled_units()?;
    let layers = val.layers();
    let w = weights.materialize(layers)?;
    let grid = normalize_grid(grid, None)?;
    let p = final_error_rate(val)?;
    let table = ScoreTable::build(&units, &w)?;
    let n = table.len();

    struct Outcome {
        correct: usize,
        depth: usize,
        counts: Vec<u64>,
        misc: Vec<usize>,
    }
    let outcomes: Vec<Outcome> = grid
        .par_iter()
        .map(|&a| {
            let th = vec![a; layers];
            let mut counts = vec![0u64; layers];
            let mut misc = vec![0usize; layers];
            let (mut correct, mut depth) = (0, 0);
            for j in 0..n {
                let e = table.exit_of(j, &th);
                counts[e - 1] += 1;
                depth += e;
                if table.preds[j][e - 1] == table.labels[j] {
                    correct += 1;
                } else {
                    misc[e - 1] += 1;
                }
            }
            Outcome {
                correct,
                depth,
                counts,
                misc,
            }
        })
        .collect();

    // Grid is ascending, so keeping the first of equals prefers the smaller value.
    let best = (0..grid.len())
        .reduce(|b, k| {
            let (ob, ok) = (&outcomes[b], &outcomes[k]);
            if (ok.correct, std::cmp::Reverse(ok.depth)) > (ob.correct, std::cmp::Reverse(ob.depth)) {
                k
            } else {
                b
            }
        })
        .expect("grid is nonempty");
    let alpha = grid[best];
    let won = &outcomes[best];
    let per_exit = (1..layers)
        .map(|t| {
            let s = ExitStats::new(won.counts[t - 1] as usize, won.misc[t - 1]);
            ExitCalibration {
                exit: t,
                alpha,
                c_stop: s.c_stop,
                c_misc: s.c_misc,
                error_rate: s.error_rate,
                feasible: s.error_rate <= p,
            }
        })
        .collect();
    let candidates = grid
        .iter()
        .zip(&outcomes)
        .map(|(&a, o)| GridPoint {
            alpha: a,
            accuracy: o.correct as f64 / n as f64,
            speedup: speedup(&o.counts),
        })
        .collect();

    Ok(CalibrationReport {
        method: CalibrationMethod::Classical,
        weight_scheme: weights.clone(),
        weights: w,
        thresholds: vec![alpha; layers],
        per_exit,
        p,
        grid,
        candidates,
    })
}
