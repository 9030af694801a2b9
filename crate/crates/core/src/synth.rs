//! Seedable synthetic multi-exit traces with controlled per-exit error rates.
//!
//! Each sample draws a shared difficulty `u ~ U(0, 1)`; exit `i` is correct iff
//! `u < 1 - q_i`. This comonotone coupling hits every marginal error rate in
//! expectation while making correctness strongly correlated across depth.
//! A wrong exit repeats the previous exit's wrong label with probability
//! `persistence`, otherwise picks uniformly among the other classes.
//!
//! Sample `k` draws from its own ChaCha stream `(seed, k)`, so output does not
//! depend on how generation is scheduled.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Dataset, SampleTrace, Split};

/// Margin keeping the predicted class strictly above the others after
/// 9-decimal quantization.
const ARGMAX_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub layers: usize,
    pub classes: usize,
    pub samples: usize,
    /// Target standalone error rate of each exit.
    pub error_rates: Vec<f64>,
    /// Probability that a wrong exit repeats the previous exit's wrong label.
    #[serde(default)]
    pub persistence: f64,
    /// Beta shape parameters of the predicted-class confidence (rescaled to
    /// `[1/C, 1]`) when the exit is correct.
    #[serde(default = "default_conf_correct")]
    pub conf_correct: (f64, f64),
    /// Same, when the exit is wrong.
    #[serde(default = "default_conf_wrong")]
    pub conf_wrong: (f64, f64),
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: Option<Split>,
}

fn default_conf_correct() -> (f64, f64) {
    (5.0, 2.0)
}

fn default_conf_wrong() -> (f64, f64) {
    (2.0, 5.0)
}

impl SynthConfig {
    pub fn new(layers: usize, classes: usize, samples: usize, error_rates: Vec<f64>, seed: u64) -> Self {
        SynthConfig {
            layers,
            classes,
            samples,
            error_rates,
            persistence: 0.0,
            conf_correct: default_conf_correct(),
            conf_wrong: default_conf_wrong(),
            seed,
            split: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.error_rates.len() != self.layers {
            return bad(format!(
                "error_rates has {} entries for {} layers",
                self.error_rates.len(),
                self.layers
            ));
        }
        if let Some(q) = self.error_rates.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return bad(format!("error rate {q} outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return bad(format!("persistence {} outside [0, 1]", self.persistence));
        }
        for (name, (a, b)) in [("conf_correct", self.conf_correct), ("conf_wrong", self.conf_wrong)] {
            if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
                return bad(format!("{name} shape parameters must be positive, got ({a}, {b})"));
            }
        }
        Ok(())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let beta = |(a, b): (f64, f64)| Beta::new(a, b).map_err(|e| Error::Config(e.to_string()));
    let correct_conf = beta(cfg.conf_correct)?;
    let wrong_conf = beta(cfg.conf_wrong)?;
    let traces = (0..cfg.samples)
        .into_par_iter()
        .map(|k| sample(cfg, k, &correct_conf, &wrong_conf))
        .collect::<Result<Vec<_>>>()?;
    Dataset::classification(cfg.layers, cfg.classes, cfg.split, traces)
}

fn sample(cfg: &SynthConfig, k: usize, correct_conf: &Beta<f64>, wrong_conf: &Beta<f64>) -> Result<SampleTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64);

    let c = cfg.classes;
    let label = rng.gen_range(0..c);
    let difficulty: f64 = rng.gen();
    let lo = 1.0 / c as f64 + ARGMAX_MARGIN;

    let mut prev_wrong: Option<usize> = None;
    let mut rows = Vec::with_capacity(cfg.layers);
    for &q in &cfg.error_rates {
        let correct = difficulty < 1.0 - q;
        let pred = if correct {
            prev_wrong = None;
            label
        } else {
            let repeat = prev_wrong.filter(|_| rng.gen::<f64>() < cfg.persistence);
            let wrong = repeat.unwrap_or_else(|| {
                // Uniform over the C - 1 classes other than the true label.
                let r = rng.gen_range(0..c - 1);
                if r >= label {
                    r + 1
                } else {
                    r
                }
            });
            prev_wrong = Some(wrong);
            wrong
        };
        let draw = if correct {
            correct_conf.sample(&mut rng)
        } else {
            wrong_conf.sample(&mut rng)
        };
        let conf = quantize(lo + (1.0 - lo) * draw);
        let rest = quantize((1.0 - conf) / (c - 1) as f64);
        rows.push((0..c).map(|j| if j == pred { conf } else { rest }).collect());
    }
    SampleTrace::new(format!("s{k}"), Some(label), rows)
}

/// Round to 9 decimals, the precision of the trace file format, so generated
/// values survive a save/load cycle unchanged.
pub(crate) fn quantize(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}
