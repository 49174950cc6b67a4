//! Server-side inference attacks against shared predictions.
//!
//! Everything here works from what an honest-but-curious server actually
//! holds: the per-round prediction matrices, the public pool, and rows the
//! server itself planted. No function takes a private shard.
//!
//! Two families:
//!
//! * label distribution inference reads the average prediction of one
//!   client over a class-balanced slice of the shared subset and treats it
//!   as an estimate of that client's private label mix;
//! * membership inference scales a class-confidence into a log-odds score
//!   and asks how surprising it is under a Gaussian fit of reference
//!   scores. References are either other clients with a similar label
//!   distribution, or an ensemble of models distilled from the target's
//!   own outputs on disjoint public subsets.

use std::collections::{HashMap, HashSet};

use ndarray::ArrayView1;
use thiserror::Error;

use crate::data::{gather, PlantKind, PlantedRow, PublicPool};
use crate::fdsim::{LogitRecord, ModelArch, ShareKind};
use crate::metrics::{kl_divergence, MembershipVerdict, MetricsError};
use crate::nn::{softmax, BatchTargets, Loss, ModelParams, NnError, TrainConfig, TrainError, Trainer};
use crate::rng::{derive_seed, streams, StreamRng};

/// Log-odds inputs are clamped into this range before taking the ratio.
pub const PHI_CLAMP: f64 = 1e-9;
/// Variance floor for the Gaussian reference fit.
pub const VAR_FLOOR: f64 = 1e-12;
/// Additive noise on indirect queries is clipped to this box.
pub const NEIGHBOR_CLIP: f64 = 0.7;

#[derive(Error, Debug)]
pub enum AttackError {
    #[error("label weights rejected: {reason}")]
    BadWeights { reason: &'static str },
    #[error("no rounds to attack")]
    EmptyRounds,
    #[error("inference subset is empty")]
    EmptyInferenceSet,
    #[error("round estimates disagree on class count: {expected} vs {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("client {target} out of range for {clients} clients")]
    TargetOutOfRange { target: usize, clients: usize },
    #[error("similarity threshold must be finite and nonnegative, got {0}")]
    BadBeta(f64),
    #[error("need at least 2 reference scores, got {have}")]
    TooFewScores { have: usize },
    #[error("no usable reference clients ({candidates} candidates passed the filter)")]
    NoUsableReferences { candidates: usize },
    #[error("pool row {pool_row} was not part of the round subset")]
    TargetNotInRound { pool_row: usize },
    #[error("pool row {pool_row} was withheld by the target; direct scoring is impossible")]
    WithheldSample { pool_row: usize },
    #[error("no neighbor rows registered for probe at pool row {pool_row}")]
    NeighborsMissing { pool_row: usize },
    #[error("subset fraction must be in (0, 1], got {0}")]
    BadSubsetFraction(f64),
    #[error("need at least 2 reference models, got {0}")]
    TooFewReferenceModels(usize),
    #[error("reference distillation needs at least 1 epoch")]
    ZeroEpochs,
    #[error("no unplanted rows left in the round subset to distill from")]
    NoAvailableRows,
    #[error("client {client} has no planted probes")]
    NoProbes { client: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// A distribution over class labels. Construction normalizes, so the
/// stored values always sum to one.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    /// Accepts any finite nonnegative weight vector with positive mass.
    /// Tiny negative entries (float dust from aggregation) are clamped.
    pub fn new(weights: Vec<f64>) -> Result<Self, AttackError> {
        if weights.is_empty() {
            return Err(AttackError::BadWeights { reason: "empty" });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(AttackError::BadWeights { reason: "non-finite entry" });
        }
        if weights.iter().any(|&w| w < -1e-9) {
            return Err(AttackError::BadWeights { reason: "negative entry" });
        }
        let mut probs: Vec<f64> = weights.into_iter().map(|w| w.max(0.0)).collect();
        let sum: f64 = probs.iter().sum();
        if sum <= 0.0 {
            return Err(AttackError::BadWeights { reason: "zero total mass" });
        }
        for p in &mut probs {
            *p /= sum;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Modal class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn position_in_round(record: &LogitRecord, pool_row: usize) -> Result<usize, AttackError> {
    record
        .selection
        .binary_search(&pool_row)
        .map_err(|_| AttackError::TargetNotInRound { pool_row })
}

fn class_prob(row: ArrayView1<f64>, label: usize, share: ShareKind) -> f64 {
    match share {
        ShareKind::Logits => softmax(row)[label],
        ShareKind::Probabilities => row[label],
    }
}

/// Positions (indices into the round selection) the server uses for label
/// distribution estimates: planted rows are excluded, and when the pool is
/// labeled the remainder is balanced down to the smallest per-class count.
/// An unlabeled pool falls back to every unplanted position.
pub fn inference_positions(record: &LogitRecord, pool: &PublicPool) -> Vec<usize> {
    let planted = pool.planted_rows();
    let unplanted: Vec<usize> = record
        .selection
        .iter()
        .enumerate()
        .filter(|(_, row)| !planted.contains(row))
        .map(|(pos, _)| pos)
        .collect();
    let Some(labels) = pool.labels() else {
        return unplanted;
    };
    let classes = pool.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &pos in &unplanted {
        by_class[labels[record.selection[pos]]].push(pos);
    }
    let floor = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if floor == 0 {
        return unplanted;
    }
    let mut positions: Vec<usize> = by_class.iter().flat_map(|c| c[..floor].iter().copied()).collect();
    positions.sort_unstable();
    positions
}

/// One client's label distribution estimate from one round: the mean
/// probability vector over the inference positions.
pub fn estimate_round_distribution(
    record: &LogitRecord,
    positions: &[usize],
    client: usize,
    share: ShareKind,
) -> Result<LabelDistribution, AttackError> {
    if positions.is_empty() {
        return Err(AttackError::EmptyInferenceSet);
    }
    if client >= record.per_client.len() {
        return Err(AttackError::TargetOutOfRange { target: client, clients: record.per_client.len() });
    }
    let outputs = &record.per_client[client];
    let classes = outputs.ncols();
    let mut acc = vec![0.0; classes];
    for &pos in positions {
        let row = outputs.row(pos);
        match share {
            ShareKind::Logits => {
                let p = softmax(row);
                for (a, &v) in acc.iter_mut().zip(p.iter()) {
                    *a += v;
                }
            }
            ShareKind::Probabilities => {
                for (a, &v) in acc.iter_mut().zip(row.iter()) {
                    *a += v;
                }
            }
        }
    }
    LabelDistribution::new(acc)
}

/// Mean of per-round estimates, renormalized.
pub fn combine_round_estimates(rounds: &[LabelDistribution]) -> Result<LabelDistribution, AttackError> {
    let first = rounds.first().ok_or(AttackError::EmptyRounds)?;
    let classes = first.len();
    let mut acc = vec![0.0; classes];
    for r in rounds {
        if r.len() != classes {
            return Err(AttackError::ClassCountMismatch { expected: classes, got: r.len() });
        }
        for (a, &p) in acc.iter_mut().zip(r.probs()) {
            *a += p;
        }
    }
    LabelDistribution::new(acc)
}

/// Label distribution inference for one client over a whole run.
#[derive(Clone, Debug)]
pub struct LdiaResult {
    pub per_round: Vec<LabelDistribution>,
    pub final_estimate: LabelDistribution,
}

pub fn run_ldia(
    records: &[LogitRecord],
    pool: &PublicPool,
    share: ShareKind,
    client: usize,
) -> Result<LdiaResult, AttackError> {
    if records.is_empty() {
        return Err(AttackError::EmptyRounds);
    }
    let mut per_round = Vec::with_capacity(records.len());
    for record in records {
        let positions = inference_positions(record, pool);
        per_round.push(estimate_round_distribution(record, &positions, client, share)?);
    }
    let final_estimate = combine_round_estimates(&per_round)?;
    Ok(LdiaResult { per_round, final_estimate })
}

/// Log-odds rescaling of a class confidence. Inputs are clamped away from
/// 0 and 1 so the output is always finite.
pub fn phi_scale(p: f64) -> f64 {
    let p = p.clamp(PHI_CLAMP, 1.0 - PHI_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Gaussian fitted to reference scores: sample mean, unbiased variance.
#[derive(Clone, Copy, Debug)]
pub struct GaussianFit {
    pub mu: f64,
    pub var: f64,
    pub n: usize,
}

impl GaussianFit {
    pub fn fit(scores: &[f64]) -> Result<Self, AttackError> {
        let n = scores.len();
        if n < 2 {
            return Err(AttackError::TooFewScores { have: n });
        }
        let mu = scores.iter().sum::<f64>() / n as f64;
        let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / (n - 1) as f64;
        Ok(Self { mu, var, n })
    }
}

/// Membership score: probability that a draw from the reference Gaussian
/// falls below the observed log-odds. High means "more confident than the
/// references can explain", i.e. likely a training member.
pub fn lira_test(phi: f64, fit: &GaussianFit) -> f64 {
    let sigma = fit.var.max(VAR_FLOOR).sqrt();
    normal_cdf((phi - fit.mu) / sigma)
}

/// How the attacker obtains the target's score for a probe.
pub enum TargetScorer {
    /// Read the target's shared output directly.
    Direct,
    /// Query a model distilled from the target's non-withheld outputs.
    Shadow(ModelParams),
    /// Average the target's shared outputs on planted noisy copies; keys
    /// are probe pool rows, values the neighbor pool rows.
    Neighbors(HashMap<usize, Vec<usize>>),
}

fn target_phi(
    record: &LogitRecord,
    pool: &PublicPool,
    share: ShareKind,
    target: usize,
    probe: &PlantedRow,
    scorer: &TargetScorer,
    withheld: &HashSet<usize>,
) -> Result<f64, AttackError> {
    match scorer {
        TargetScorer::Direct => {
            if withheld.contains(&probe.pool_row) {
                return Err(AttackError::WithheldSample { pool_row: probe.pool_row });
            }
            let pos = position_in_round(record, probe.pool_row)?;
            Ok(phi_scale(class_prob(record.per_client[target].row(pos), probe.label, share)))
        }
        TargetScorer::Shadow(model) => {
            let logits = model.forward(pool.features().row(probe.pool_row))?;
            Ok(phi_scale(softmax(logits.view())[probe.label]))
        }
        TargetScorer::Neighbors(map) => {
            let rows = map
                .get(&probe.pool_row)
                .filter(|rows| !rows.is_empty())
                .ok_or(AttackError::NeighborsMissing { pool_row: probe.pool_row })?;
            let mut acc = 0.0;
            for &row in rows {
                let pos = position_in_round(record, row)?;
                acc += phi_scale(class_prob(record.per_client[target].row(pos), probe.label, share));
            }
            Ok(acc / rows.len() as f64)
        }
    }
}

/// Planted probes belonging to one client.
pub fn probes_for(pool: &PublicPool, client: usize) -> Vec<PlantedRow> {
    pool.planted()
        .iter()
        .filter(|p| p.client == client && p.kind == PlantKind::Probe)
        .cloned()
        .collect()
}

/// Rows an evasive client refuses to answer: its own exact training rows.
/// Noisy neighbor copies are not recognizable, so they are answered.
pub fn withheld_rows(pool: &PublicPool, client: usize) -> HashSet<usize> {
    pool.planted()
        .iter()
        .filter(|p| p.client == client && p.kind == PlantKind::Probe)
        .map(|p| p.pool_row)
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct CoopConfig {
    /// Strict KL threshold for admitting a reference client.
    pub beta: f64,
    /// Use the symmetrized divergence instead of KL(target || other).
    pub symmetric: bool,
}

impl Default for CoopConfig {
    fn default() -> Self {
        Self { beta: 0.1, symmetric: false }
    }
}

/// Label distribution estimates for every client from one round.
pub fn client_label_estimates(
    record: &LogitRecord,
    pool: &PublicPool,
    share: ShareKind,
) -> Result<Vec<LabelDistribution>, AttackError> {
    let positions = inference_positions(record, pool);
    (0..record.per_client.len())
        .map(|c| estimate_round_distribution(record, &positions, c, share))
        .collect()
}

/// Clients whose estimated label distribution sits within `beta` of the
/// target's. The target itself is never a reference.
pub fn coop_select_references(
    estimates: &[LabelDistribution],
    target: usize,
    cfg: &CoopConfig,
) -> Result<Vec<usize>, AttackError> {
    if target >= estimates.len() {
        return Err(AttackError::TargetOutOfRange { target, clients: estimates.len() });
    }
    if !cfg.beta.is_finite() || cfg.beta < 0.0 {
        return Err(AttackError::BadBeta(cfg.beta));
    }
    let t = &estimates[target];
    let mut refs = Vec::new();
    for (n, e) in estimates.iter().enumerate() {
        if n == target {
            continue;
        }
        let forward = kl_divergence(t.probs(), e.probs())?;
        let d = if cfg.symmetric {
            0.5 * (forward + kl_divergence(e.probs(), t.probs())?)
        } else {
            forward
        };
        if d < cfg.beta {
            refs.push(n);
        }
    }
    Ok(refs)
}

#[derive(Clone, Debug)]
pub struct CoopMiaOutput {
    pub references: Vec<usize>,
    pub verdicts: Vec<MembershipVerdict>,
}

/// Membership inference using similar clients as the reference
/// distribution. Every planted probe of the target is scored; the target's
/// own score comes from `scorer`, reference scores are read directly from
/// the other clients' shared outputs.
pub fn run_coop_mia(
    record: &LogitRecord,
    pool: &PublicPool,
    share: ShareKind,
    target: usize,
    cfg: &CoopConfig,
    scorer: &TargetScorer,
    withheld: &HashSet<usize>,
) -> Result<CoopMiaOutput, AttackError> {
    let estimates = client_label_estimates(record, pool, share)?;
    let references = coop_select_references(&estimates, target, cfg)?;
    if references.len() < 2 {
        return Err(AttackError::NoUsableReferences { candidates: references.len() });
    }
    let probes = probes_for(pool, target);
    if probes.is_empty() {
        return Err(AttackError::NoProbes { client: target });
    }
    let mut verdicts = Vec::with_capacity(probes.len());
    for probe in &probes {
        let pos = position_in_round(record, probe.pool_row)?;
        let ref_scores: Vec<f64> = references
            .iter()
            .map(|&n| phi_scale(class_prob(record.per_client[n].row(pos), probe.label, share)))
            .collect();
        let fit = GaussianFit::fit(&ref_scores)?;
        let phi = target_phi(record, pool, share, target, probe, scorer, withheld)?;
        verdicts.push(MembershipVerdict {
            lambda: lira_test(phi, &fit),
            scaled_score: phi,
            is_member: probe.is_member,
            client: target,
            sample: probe.pool_row,
        });
    }
    Ok(CoopMiaOutput { references, verdicts })
}

#[derive(Clone, Debug)]
pub struct DistillLiraConfig {
    /// Ensemble size.
    pub reference_models: usize,
    /// Fraction of the available (unplanted) subset each student sees.
    pub subset_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub arch: ModelArch,
    pub seed: u64,
}

/// Students distilled from the target's shared outputs, with the pool rows
/// each one saw (kept for auditing; probes never appear in them).
pub struct ReferenceEnsemble {
    pub models: Vec<ModelParams>,
    pub subsets: Vec<Vec<usize>>,
}

fn distill_student(
    record: &LogitRecord,
    pool: &PublicPool,
    share: ShareKind,
    target: usize,
    positions: &[usize],
    arch: &ModelArch,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    init_seed: u64,
    train_seed: u64,
) -> Result<ModelParams, AttackError> {
    let rows: Vec<usize> = positions.iter().map(|&p| record.selection[p]).collect();
    let x = gather(pool.features(), &rows);
    let mut targets = ndarray::Array2::zeros((positions.len(), record.per_client[target].ncols()));
    for (i, &pos) in positions.iter().enumerate() {
        let row = record.per_client[target].row(pos);
        match share {
            ShareKind::Logits => targets.row_mut(i).assign(&softmax(row)),
            ShareKind::Probabilities => targets.row_mut(i).assign(&row),
        }
    }
    let mut dims = vec![pool.features().ncols()];
    dims.extend_from_slice(&arch.hidden);
    dims.push(record.per_client[target].ncols());
    let mut model = ModelParams::init(&dims, arch.activation, init_seed)?;
    let mut trainer = Trainer::new(TrainConfig {
        lr,
        batch_size,
        loss: Loss::DistillKl,
        seed: train_seed,
        dp: None,
    })?;
    for _ in 0..epochs {
        trainer.epoch(&mut model, x.view(), BatchTargets::Soft(targets.view()))?;
    }
    Ok(model)
}

/// Trains the reference ensemble: each student mimics the target on a
/// random subset of the unplanted round rows, so none of them has seen any
/// probe. Memorized confidence on a probe then stands out against them.
pub fn distill_reference_models(
    record: &LogitRecord,
    pool: &PublicPool,
    share: ShareKind,
    target: usize,
    cfg: &DistillLiraConfig,
) -> Result<ReferenceEnsemble, AttackError> {
    if cfg.reference_models < 2 {
        return Err(AttackError::TooFewReferenceModels(cfg.reference_models));
    }
    if !(cfg.subset_fraction > 0.0 && cfg.subset_fraction <= 1.0) {
        return Err(AttackError::BadSubsetFraction(cfg.subset_fraction));
    }
    if cfg.epochs == 0 {
        return Err(AttackError::ZeroEpochs);
    }
    if target >= record.per_client.len() {
        return Err(AttackError::TargetOutOfRange { target, clients: record.per_client.len() });
    }
    let planted = pool.planted_rows();
    let available: Vec<usize> = (0..record.selection.len())
        .filter(|&pos| !planted.contains(&record.selection[pos]))
        .collect();
    if available.is_empty() {
        return Err(AttackError::NoAvailableRows);
    }
    let take = ((cfg.subset_fraction * available.len() as f64).round() as usize)
        .clamp(1, available.len());

    let mut models = Vec::with_capacity(cfg.reference_models);
    let mut subsets = Vec::with_capacity(cfg.reference_models);
    for k in 0..cfg.reference_models {
        let mut rng = StreamRng::new(derive_seed(cfg.seed, k as u64), streams::REFERENCE_SUBSET);
        let positions: Vec<usize> =
            rng.sample_indices(available.len(), take).into_iter().map(|i| available[i]).collect();
        let model = distill_student(
            record,
            pool,
            share,
            target,
            &positions,
            &cfg.arch,
            cfg.lr,
            cfg.batch_size,
            cfg.epochs,
            derive_seed(cfg.seed, 0x1000_0000 + k as u64),
            derive_seed(cfg.seed, 0x2000_0000 + k as u64),
        )?;
        subsets.push(positions.iter().map(|&p| record.selection[p]).collect());
        models.push(model);
    }
    Ok(ReferenceEnsemble { models, subsets })
}

/// Membership inference against distilled reference models. `models` may
/// be a prefix of a larger ensemble, which gives the ensemble-size sweep
/// without retraining.
pub fn run_distill_mia(
    record: &LogitRecord,
    pool: &PublicPool,
    share: ShareKind,
    target: usize,
    models: &[ModelParams],
    scorer: &TargetScorer,
    withheld: &HashSet<usize>,
) -> Result<Vec<MembershipVerdict>, AttackError> {
    if models.len() < 2 {
        return Err(AttackError::TooFewReferenceModels(models.len()));
    }
    let probes = probes_for(pool, target);
    if probes.is_empty() {
        return Err(AttackError::NoProbes { client: target });
    }
    let mut verdicts = Vec::with_capacity(probes.len());
    let features = pool.features();
    for probe in &probes {
        let x = features.row(probe.pool_row);
        let ref_scores: Vec<f64> = models
            .iter()
            .map(|m| {
                let logits = m.forward(x)?;
                Ok(phi_scale(softmax(logits.view())[probe.label]))
            })
            .collect::<Result<_, AttackError>>()?;
        let fit = GaussianFit::fit(&ref_scores)?;
        let phi = target_phi(record, pool, share, target, probe, scorer, withheld)?;
        verdicts.push(MembershipVerdict {
            lambda: lira_test(phi, &fit),
            scaled_score: phi,
            is_member: probe.is_member,
            client: target,
            sample: probe.pool_row,
        });
    }
    Ok(verdicts)
}

#[derive(Clone, Debug)]
pub struct ShadowConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub arch: ModelArch,
    pub seed: u64,
}

/// Distills a single stand-in for an evasive target from every row the
/// target did answer, i.e. everything outside `withheld`. Queried offline,
/// it scores probes the target refuses to answer directly.
pub fn distill_shadow_model(
    record: &LogitRecord,
    pool: &PublicPool,
    share: ShareKind,
    target: usize,
    cfg: &ShadowConfig,
    withheld: &HashSet<usize>,
) -> Result<ModelParams, AttackError> {
    if cfg.epochs == 0 {
        return Err(AttackError::ZeroEpochs);
    }
    if target >= record.per_client.len() {
        return Err(AttackError::TargetOutOfRange { target, clients: record.per_client.len() });
    }
    let available: Vec<usize> = (0..record.selection.len())
        .filter(|&pos| !withheld.contains(&record.selection[pos]))
        .collect();
    if available.is_empty() {
        return Err(AttackError::NoAvailableRows);
    }
    distill_student(
        record,
        pool,
        share,
        target,
        &available,
        &cfg.arch,
        cfg.lr,
        cfg.batch_size,
        cfg.epochs,
        derive_seed(cfg.seed, 0x3000_0000),
        derive_seed(cfg.seed, 0x4000_0000),
    )
}

/// Noisy copies of a probe row for indirect querying. Noise is Gaussian
/// with the given scale, clipped coordinate-wise to `[-clip, clip]`. A
/// zero scale returns exact copies.
pub fn make_neighbors(
    x: ArrayView1<f64>,
    count: usize,
    noise_scale: f64,
    clip: f64,
    rng: &mut StreamRng,
) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            x.iter()
                .map(|&v| v + (noise_scale * rng.normal()).clamp(-clip, clip))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn label_distribution_normalizes() {
        let d = LabelDistribution::new(vec![2.0, 6.0]).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
        assert_eq!(d.argmax(), 1);
        // tiny negative dust is clamped, not rejected
        let d = LabelDistribution::new(vec![1.0, -1e-12]).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn label_distribution_rejects_garbage() {
        assert!(LabelDistribution::new(vec![]).is_err());
        assert!(LabelDistribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(LabelDistribution::new(vec![-0.5, 1.0]).is_err());
        assert!(LabelDistribution::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_ties_resolve_low() {
        let d = LabelDistribution::new(vec![1.0, 1.0, 0.5]).unwrap();
        assert_eq!(d.argmax(), 0);
    }

    #[test]
    fn combine_round_estimates_means_and_renormalizes() {
        let a = LabelDistribution::new(vec![0.8, 0.2]).unwrap();
        let b = LabelDistribution::new(vec![0.6, 0.4]).unwrap();
        let c = combine_round_estimates(&[a, b]).unwrap();
        assert_abs_diff_eq!(c.probs()[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(c.probs()[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn phi_scale_hand_values() {
        assert_abs_diff_eq!(phi_scale(0.5), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi_scale(0.9), 9.0_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(phi_scale(0.3), -phi_scale(0.7), epsilon = 1e-12);
        assert!(phi_scale(1.0).is_finite());
        assert!(phi_scale(0.0).is_finite());
        assert!(phi_scale(1.0) > 20.0 && phi_scale(0.0) < -20.0);
    }

    /// Simpson quadrature of the standard normal density over [-12, x].
    fn cdf_quadrature(x: f64) -> f64 {
        let lo = -12.0;
        let n = 40_000; // even
        let h = (x - lo) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(lo) + pdf(x);
        for i in 1..n {
            let t = lo + i as f64 * h;
            s += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn normal_cdf_matches_quadrature() {
        for &x in &[-3.0, -1.0, 0.0, 0.7, 2.5] {
            assert_abs_diff_eq!(normal_cdf(x), cdf_quadrature(x), epsilon = 1e-9);
        }
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_fit_hand_values() {
        let fit = GaussianFit::fit(&[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(fit.mu, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fit.var, 1.0, epsilon = 1e-15);
        assert!(matches!(GaussianFit::fit(&[1.0]), Err(AttackError::TooFewScores { have: 1 })));
    }

    #[test]
    fn lira_test_behaviour() {
        let fit = GaussianFit::fit(&[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(lira_test(2.0, &fit), 0.5, epsilon = 1e-12);
        assert!(lira_test(3.0, &fit) > lira_test(2.0, &fit));
        // identical reference scores: variance floors, test saturates
        let flat = GaussianFit::fit(&[2.0, 2.0, 2.0]).unwrap();
        assert_abs_diff_eq!(lira_test(2.1, &flat), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lira_test(1.9, &flat), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lira_test(2.0, &flat), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn coop_selection_thresholds_on_kl() {
        let target = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        let near = LabelDistribution::new(vec![0.52, 0.48]).unwrap();
        let far = LabelDistribution::new(vec![0.95, 0.05]).unwrap();
        let estimates = vec![target, near, far];
        let refs = coop_select_references(&estimates, 0, &CoopConfig::default()).unwrap();
        assert_eq!(refs, vec![1]);
        // beta 0 admits nobody (strict inequality)
        let refs =
            coop_select_references(&estimates, 0, &CoopConfig { beta: 0.0, symmetric: false })
                .unwrap();
        assert!(refs.is_empty());
        // the target never references itself even at huge beta
        let refs =
            coop_select_references(&estimates, 0, &CoopConfig { beta: 1e9, symmetric: false })
                .unwrap();
        assert_eq!(refs, vec![1, 2]);
    }

    #[test]
    fn coop_selection_symmetric_mode() {
        let a = LabelDistribution::new(vec![0.9, 0.1]).unwrap();
        let b = LabelDistribution::new(vec![0.6, 0.4]).unwrap();
        let forward = kl_divergence(a.probs(), b.probs()).unwrap();
        let backward = kl_divergence(b.probs(), a.probs()).unwrap();
        let sym = 0.5 * (forward + backward);
        let beta = (forward + sym) / 2.0;
        // beta sits between the two divergences, so the verdict flips with
        // the mode exactly when forward < beta < sym or vice versa.
        let estimates = vec![a, b];
        let asym = coop_select_references(&estimates, 0, &CoopConfig { beta, symmetric: false })
            .unwrap();
        let symm = coop_select_references(&estimates, 0, &CoopConfig { beta, symmetric: true })
            .unwrap();
        assert_ne!(asym.is_empty(), symm.is_empty());
    }

    #[test]
    fn neighbors_are_clipped_and_deterministic() {
        let x = ndarray::arr1(&[0.0, 1.0, -2.0]);
        let mut rng = StreamRng::new(7, streams::NEIGHBOR_NOISE);
        let a = make_neighbors(x.view(), 5, 10.0, 0.7, &mut rng);
        assert_eq!(a.len(), 5);
        for n in &a {
            for (v, &orig) in n.iter().zip(x.iter()) {
                assert!((v - orig).abs() <= 0.7 + 1e-12);
            }
        }
        let mut rng = StreamRng::new(7, streams::NEIGHBOR_NOISE);
        let b = make_neighbors(x.view(), 5, 10.0, 0.7, &mut rng);
        assert_eq!(a, b);

        let mut rng = StreamRng::new(7, streams::NEIGHBOR_NOISE);
        let copies = make_neighbors(x.view(), 3, 0.0, 0.7, &mut rng);
        for n in &copies {
            assert_eq!(n.as_slice(), x.as_slice().unwrap());
        }
    }

    proptest! {
        #[test]
        fn lira_test_is_bounded_and_monotone(
            mu in -5.0..5.0f64,
            var in 0.0..4.0f64,
            a in -10.0..10.0f64,
            b in -10.0..10.0f64,
        ) {
            let fit = GaussianFit { mu, var, n: 8 };
            let la = lira_test(a, &fit);
            let lb = lira_test(b, &fit);
            prop_assert!((0.0..=1.0).contains(&la));
            if a < b {
                prop_assert!(la <= lb);
            }
        }

        #[test]
        fn phi_scale_is_monotone(a in 0.0..1.0f64, b in 0.0..1.0f64) {
            if a < b {
                prop_assert!(phi_scale(a) <= phi_scale(b));
            }
        }

        #[test]
        fn label_distribution_always_simplex(ws in proptest::collection::vec(0.0..10.0f64, 1..8)) {
            prop_assume!(ws.iter().sum::<f64>() > 1e-9);
            let d = LabelDistribution::new(ws).unwrap();
            let sum: f64 = d.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
        }
    }
}
