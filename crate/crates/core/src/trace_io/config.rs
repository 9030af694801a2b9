use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{load_report, write_atomic};
use crate::calibration::{error_rate_grid, CalibrationReport, CLASSICAL_GRID};
use crate::error::{Error, Result};
use crate::policy::{Policy, ThresholdVector, WeightScheme};
use crate::synth::SynthConfig;

/// Per-exit cost; `w_i = 0.1 * i` gives weights 0.1, 0.2, ..., 1.2 over twelve exits.
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_PATIENCE: usize = 2;
pub const DEFAULT_QUORUM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[default]
    Beem,
    Confidence,
    Patience,
    Majority,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    #[default]
    Cost,
    Accuracy,
    Explicit,
}

/// Flat run configuration. Unknown keys are rejected.
///
/// An ensemble policy takes its thresholds from `thresholds` (per exit),
/// `alpha` (uniform) or a `calibration` report (which also fixes the
/// weights). Relative `calibration` paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub policy: PolicyKind,
    pub weights: WeightKind,
    pub lambda: f64,
    /// Per-exit values for `accuracy` or `explicit` weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    pub tau: f64,
    pub patience: usize,
    pub quorum: usize,
    pub classical_grid: Vec<f64>,
    /// Defaults to `{0.5, 1, ..., 5, L}` for the data at hand.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_rate_grid: Option<Vec<f64>>,
    /// Override for the final-exit error rate used by error-rate calibration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: None,
            policy: PolicyKind::default(),
            weights: WeightKind::default(),
            lambda: DEFAULT_LAMBDA,
            weight_values: None,
            alpha: None,
            thresholds: None,
            calibration: None,
            tau: DEFAULT_TAU,
            patience: DEFAULT_PATIENCE,
            quorum: DEFAULT_QUORUM,
            classical_grid: CLASSICAL_GRID.to_vec(),
            error_rate_grid: None,
            p: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn weight_scheme(&self) -> Result<WeightScheme> {
        let values = || {
            self.weight_values
                .clone()
                .ok_or_else(|| Error::Config(format!("`{:?}` weights need `weight_values`", self.weights).to_lowercase()))
        };
        Ok(match self.weights {
            WeightKind::Cost => WeightScheme::Cost { lambda: self.lambda },
            WeightKind::Accuracy => WeightScheme::Accuracy { acc: values()? },
            WeightKind::Explicit => WeightScheme::Explicit { weights: values()? },
        })
    }

    pub fn error_rate_grid(&self, layers: usize) -> Vec<f64> {
        self.error_rate_grid.clone().unwrap_or_else(|| error_rate_grid(layers))
    }

    /// Build the configured policy for `layers` exits. `base_dir` anchors a
    /// relative `calibration` path.
    pub fn policy(&self, layers: usize, base_dir: Option<&Path>) -> Result<Policy> {
        let policy = match self.policy {
            PolicyKind::Beem => self.beem_policy(layers, base_dir)?,
            PolicyKind::Confidence => Policy::ConfidenceThreshold { tau: self.tau },
            PolicyKind::Patience => Policy::Patience {
                patience: self.patience,
            },
            PolicyKind::Majority => Policy::MajorityVote { quorum: self.quorum },
            PolicyKind::Final => Policy::FinalOnly,
        };
        policy.check(layers)?;
        Ok(policy)
    }

    fn beem_policy(&self, layers: usize, base_dir: Option<&Path>) -> Result<Policy> {
        let explicit = match (&self.thresholds, self.alpha) {
            (Some(_), Some(_)) => return Err(Error::Config("set either `thresholds` or `alpha`, not both".into())),
            (Some(t), None) => Some(ThresholdVector::new(t.clone())?),
            (None, Some(a)) => Some(ThresholdVector::uniform(a, layers)?),
            (None, None) => None,
        };
        match (&self.calibration, explicit) {
            (Some(_), Some(_)) => Err(Error::Config(
                "`calibration` already fixes thresholds; drop `thresholds`/`alpha`".into(),
            )),
            (Some(path), None) => {
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                load_report::<CalibrationReport>(&path)?.policy()
            }
            (None, Some(thresholds)) => Ok(Policy::Beem {
                weights: self.weight_scheme()?,
                thresholds,
            }),
            (None, None) => Err(Error::Config(
                "beem policy needs `alpha`, `thresholds` or `calibration`".into(),
            )),
        }
    }

    /// Label for reports: `name` if set, else the policy's description.
    pub fn label(&self, policy: &Policy) -> String {
        self.name.clone().unwrap_or_else(|| policy.to_string())
    }
}

/// Several run configs, one `[[policies]]` table each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoliciesConfig {
    pub policies: Vec<RunConfig>,
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    load_toml(path.as_ref())
}

pub fn load_policies_config(path: impl AsRef<Path>) -> Result<PoliciesConfig> {
    let cfg: PoliciesConfig = load_toml(path.as_ref())?;
    if cfg.policies.is_empty() {
        return Err(Error::Config("no [[policies]] entries".into()));
    }
    Ok(cfg)
}

pub fn load_synth_config(path: impl AsRef<Path>) -> Result<SynthConfig> {
    let cfg: SynthConfig = load_toml(path.as_ref())?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config<T: Serialize>(cfg: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path.as_ref(), |w| std::io::Write::write_all(w, text.as_bytes()))
}
