//! One-axis ablation sweeps: clone the base config, vary one knob, run
//! each value into its own subdirectory, and collect headline numbers.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentSpec;
use crate::experiment::run_experiment;
use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// `federation.round_public_count`
    RoundPublicCount,
    /// `attacks.distill.reference_models`
    References,
    /// `federation.local_epochs`
    LocalEpochs,
    /// `federation.dp_sigma`
    DpSigma,
}

impl SweepAxis {
    pub fn key(&self) -> &'static str {
        match self {
            SweepAxis::RoundPublicCount => "round_public_count",
            SweepAxis::References => "references",
            SweepAxis::LocalEpochs => "local_epochs",
            SweepAxis::DpSigma => "dp_sigma",
        }
    }

    /// The base config with this axis set to `raw`.
    pub fn apply(&self, base: &ExperimentSpec, raw: &str) -> Result<ExperimentSpec, HarnessError> {
        let mut spec = base.clone();
        let bad = |what: &str| {
            HarnessError::Config(format!("sweep value {raw:?} is not a valid {what}"))
        };
        match self {
            SweepAxis::RoundPublicCount => {
                spec.federation.round_public_count =
                    raw.parse::<usize>().map_err(|_| bad("count"))?;
            }
            SweepAxis::References => {
                if !spec.attacks.distill.enabled {
                    return Err(HarnessError::Config(
                        "sweeping references needs attacks.distill.enabled".into(),
                    ));
                }
                spec.attacks.distill.reference_models =
                    raw.parse::<usize>().map_err(|_| bad("count"))?;
            }
            SweepAxis::LocalEpochs => {
                spec.federation.local_epochs = raw.parse::<usize>().map_err(|_| bad("count"))?;
            }
            SweepAxis::DpSigma => {
                spec.federation.dp_sigma = raw.parse::<f64>().map_err(|_| bad("number"))?;
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round_public_count" => Ok(SweepAxis::RoundPublicCount),
            "references" => Ok(SweepAxis::References),
            "local_epochs" => Ok(SweepAxis::LocalEpochs),
            "dp_sigma" => Ok(SweepAxis::DpSigma),
            other => Err(HarnessError::Config(format!(
                "unknown sweep axis {other:?}; known axes: round_public_count, references, \
                 local_epochs, dp_sigma"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepAttackLine {
    pub attack: String,
    pub auc: f64,
    pub tpr_at_1pct_fpr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub axis: String,
    pub value: String,
    pub out_dir: String,
    pub final_accuracy: Option<f64>,
    pub ldia_mean_kl: Option<f64>,
    pub attacks: Vec<SweepAttackLine>,
}

/// Runs every value and writes `sweep_summary.json` next to the per-value
/// directories.
pub fn run_sweep(
    base: &ExperimentSpec,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
) -> Result<Vec<SweepEntry>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let mut entries = Vec::with_capacity(values.len());
    for raw in values {
        let spec = axis.apply(base, raw)?;
        let dir = out.join(format!("{}={}", axis.key(), raw));
        let report = run_experiment(&spec, &dir)?;
        entries.push(SweepEntry {
            axis: axis.key().into(),
            value: raw.clone(),
            out_dir: dir.display().to_string(),
            final_accuracy: report.federation.final_accuracy,
            ldia_mean_kl: report.ldia.as_ref().map(|l| l.mean_kl),
            attacks: report
                .membership
                .iter()
                .map(|m| SweepAttackLine {
                    attack: m.attack.clone(),
                    auc: m.auc,
                    tpr_at_1pct_fpr: m.tpr_at_1pct_fpr,
                })
                .collect(),
        });
    }
    let json = serde_json::to_string_pretty(&entries)
        .map_err(|e| HarnessError::Runtime(format!("serialize sweep summary: {e}")))?;
    std::fs::create_dir_all(out)
        .map_err(|e| HarnessError::Runtime(format!("create sweep dir: {e}")))?;
    std::fs::write(out.join("sweep_summary.json"), json.as_bytes())
        .map_err(|e| HarnessError::Runtime(format!("write sweep summary: {e}")))?;
    Ok(entries)
}
