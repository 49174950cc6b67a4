//! Scoring for the attacks: distribution distances, ROC analysis, and the
//! chance baselines everything is judged against.
//!
//! The ROC sweep treats tied scores as a single step and integrates with the
//! trapezoid rule, which makes the area exactly the probability that a
//! random member outscores a random non-member (ties counting half). Low-FPR
//! operating points are read off conservatively: the largest TPR whose FPR
//! does not exceed the target, no interpolation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{streams, StreamRng};

/// Floor applied inside logarithms of probability ratios.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("distribution lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("distributions must be finite and nonnegative")]
    BadDistribution,
    #[error("verdict list is empty")]
    EmptyVerdicts,
    #[error("ROC needs at least one member and one non-member, got {members} members of {total}")]
    SingleClassVerdicts { members: usize, total: usize },
    #[error("verdict scores must not be NaN")]
    NanScore,
}

/// One membership decision: the likelihood-ratio score for a probe, the
/// ground truth, and where the probe came from.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MembershipVerdict {
    /// Attack score; higher means "more likely a member".
    pub lambda: f64,
    /// The log-odds score the target produced for the probe.
    pub scaled_score: f64,
    pub is_member: bool,
    /// Client under attack.
    pub client: usize,
    /// Public-pool row of the probe.
    pub sample: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RocPoint {
    /// Probes with `lambda >= threshold` are called members.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// KL divergence `sum p_hat ln(p_hat / p)` with a 1e-12 floor inside the
/// logs and the 0 ln 0 = 0 convention.
pub fn kl_divergence(p_hat: &[f64], p: &[f64]) -> Result<f64, MetricsError> {
    check_pair(p_hat, p)?;
    Ok(p_hat
        .iter()
        .zip(p)
        .map(|(&a, &b)| if a > 0.0 { a * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()) } else { 0.0 })
        .sum())
}

/// Chebyshev distance: the largest per-class absolute gap.
pub fn chebyshev(p_hat: &[f64], p: &[f64]) -> Result<f64, MetricsError> {
    check_pair(p_hat, p)?;
    Ok(p_hat.iter().zip(p).map(|(&a, &b)| (a - b).abs()).fold(0.0, f64::max))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.iter().chain(b).any(|&v| !v.is_finite() || v < 0.0) {
        return Err(MetricsError::BadDistribution);
    }
    Ok(())
}

/// Full ROC sweep over the unique scores, descending. The first point is the
/// empty rejection set (0, 0); the last threshold is the minimum score,
/// where everything is called a member.
pub fn roc_curve(verdicts: &[MembershipVerdict]) -> Result<RocCurve, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::EmptyVerdicts);
    }
    if verdicts.iter().any(|v| v.lambda.is_nan()) {
        return Err(MetricsError::NanScore);
    }
    let members = verdicts.iter().filter(|v| v.is_member).count();
    let non_members = verdicts.len() - members;
    if members == 0 || non_members == 0 {
        return Err(MetricsError::SingleClassVerdicts { members, total: verdicts.len() });
    }

    let mut sorted: Vec<&MembershipVerdict> = verdicts.iter().collect();
    sorted.sort_by(|a, b| b.lambda.partial_cmp(&a.lambda).expect("NaN rejected above"));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].lambda;
        // Consume the whole tie group as one step.
        while i < sorted.len() && sorted[i].lambda == score {
            if sorted[i].is_member {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / non_members as f64,
            tpr: tp as f64 / members as f64,
        });
    }

    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Largest TPR among operating points with FPR at or below `target`.
/// The leading (0, 0) point guarantees a defined answer.
pub fn tpr_at_fpr(roc: &RocCurve, target: f64) -> f64 {
    roc.points
        .iter()
        .filter(|p| p.fpr <= target + 1e-12)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// (TPR + TNR) / 2 at a fixed threshold, calling `lambda >= threshold` a
/// member.
pub fn balanced_accuracy(verdicts: &[MembershipVerdict], threshold: f64) -> Result<f64, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::EmptyVerdicts);
    }
    let members = verdicts.iter().filter(|v| v.is_member).count();
    let non_members = verdicts.len() - members;
    if members == 0 || non_members == 0 {
        return Err(MetricsError::SingleClassVerdicts { members, total: verdicts.len() });
    }
    let tp = verdicts.iter().filter(|v| v.is_member && v.lambda >= threshold).count();
    let tn = verdicts.iter().filter(|v| !v.is_member && v.lambda < threshold).count();
    Ok((tp as f64 / members as f64 + tn as f64 / non_members as f64) / 2.0)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BestBalancedAccuracy {
    pub accuracy: f64,
    pub threshold: f64,
}

/// Maximizes balanced accuracy over the score sweep. Candidates are every
/// distinct score plus one cutoff above the maximum (the reject-all rule);
/// among ties the highest threshold is kept.
pub fn best_balanced_accuracy(
    verdicts: &[MembershipVerdict],
) -> Result<BestBalancedAccuracy, MetricsError> {
    let roc = roc_curve(verdicts)?;
    let mut best = BestBalancedAccuracy { accuracy: f64::NEG_INFINITY, threshold: f64::INFINITY };
    for p in &roc.points {
        let acc = (p.tpr + (1.0 - p.fpr)) / 2.0;
        if acc > best.accuracy {
            best = BestBalancedAccuracy { accuracy: acc, threshold: p.threshold };
        }
    }
    Ok(best)
}

/// A chance-level guess at a label distribution: one draw from the flat
/// Dirichlet over `classes` categories.
pub fn random_label_baseline(classes: usize, seed: u64) -> Vec<f64> {
    StreamRng::new(seed, streams::BASELINE).dirichlet(1.0, classes)
}
