//! Serializable results. Everything is a Vec or scalar so JSON output is
//! byte-stable for a given run.

use serde::{Deserialize, Serialize};

use fdlab::fdsim::PretrainOutcome;

use crate::config::ExperimentSpec;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: ExperimentSpec,
    pub federation: FederationReport,
    pub ldia: Option<LdiaReport>,
    pub membership: Vec<MembershipReport>,
    pub evasion: Vec<EvasionReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FederationReport {
    pub pretrain: PretrainOutcome,
    pub rounds: usize,
    /// Mean client test accuracy after round 0's local updates, before
    /// any collaboration. Absent when no rounds ran.
    pub round0_local_accuracy: Option<f64>,
    /// Mean client test accuracy after the final distillation.
    pub final_accuracy: Option<f64>,
    /// Mean client test accuracy after each round's distillation.
    pub per_round_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LdiaReport {
    pub per_client: Vec<LdiaClientReport>,
    pub mean_kl: f64,
    pub mean_chebyshev: f64,
    /// Fraction of clients whose inferred modal class is the true one.
    pub argmax_accuracy: f64,
    /// Same divergences for a uniform-Dirichlet random guess, one draw
    /// per client.
    pub baseline_mean_kl: f64,
    pub baseline_mean_chebyshev: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LdiaClientReport {
    pub client: usize,
    pub estimate: Vec<f64>,
    pub true_distribution: Vec<f64>,
    pub kl: f64,
    pub chebyshev: f64,
    pub argmax_match: bool,
    pub baseline_kl: f64,
    pub baseline_chebyshev: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MembershipReport {
    /// "coop" or "distill"; evasion variants suffix the scorer mode.
    pub attack: String,
    /// Pooled over all scored targets.
    pub auc: f64,
    pub tpr_at_1pct_fpr: f64,
    pub tpr_at_10pct_fpr: f64,
    pub best_balanced_accuracy: f64,
    pub verdicts: usize,
    pub per_client: Vec<MembershipClientReport>,
    /// Mean of per-client AUCs, counting clients the attack could not
    /// score (no usable references) at chance level 0.5.
    pub mean_client_auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MembershipClientReport {
    pub client: usize,
    /// Absent when the attack had no usable references for this client.
    pub auc: Option<f64>,
    pub references: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvasionReport {
    /// "shadow" or "neighbors".
    pub mode: String,
    pub client: usize,
    pub withheld_rows: usize,
    /// Absent when the co-op filter admitted too few references to fit.
    pub auc: Option<f64>,
    pub tpr_at_1pct_fpr: Option<f64>,
    pub references: Option<usize>,
}

/// Raw per-probe outcomes for one membership attack, persisted in
/// attack_records.json so verdicts can be re-scored offline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackRecordSet {
    /// "coop", "distill", or an evasion variant like "coop_shadow".
    pub attack: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_models: Option<usize>,
    pub records: Vec<AttackRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackRecord {
    pub client: usize,
    /// Pool row of the planted probe.
    pub index: usize,
    pub lambda: f64,
    pub scaled_score: f64,
    /// Whether the probe really sits in the client's private shard.
    pub truth: bool,
}
