//! The collaborative protocol: per-round local updates, prediction exchange
//! on a server-chosen public subset, aggregation, and distillation.
//!
//! Three framework presets differ in what clients share and how the server
//! fuses it. `fedmd` shares raw logits and averages them (after pretraining
//! every client on the labeled public set until its loss plateaus). `dsfl`
//! shares probability vectors and sharpens their mean with entropy-reducing
//! aggregation. `cronus` shares probability vectors and takes a
//! coordinate-wise trimmed mean, which tolerates a bounded number of
//! adversarial uploads.
//!
//! The server side only ever sees what clients publish: aggregation
//! functions take the shared prediction matrices and nothing else, so
//! private shards cannot leak through this interface.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{gather, Dataset, PublicPool};
use crate::nn::{
    mean_loss, softmax_rows, Activation, BatchTargets, DpConfig, Loss, ModelParams, NnError,
    TrainConfig, TrainError, Trainer,
};
use crate::rng::{client_seed, derive_seed, streams, StreamRng};

#[derive(Error, Debug)]
pub enum FdError {
    #[error("no client outputs to aggregate")]
    NoUpdates,
    #[error("client {client} shared a {got_rows}x{got_cols} matrix, expected {rows}x{cols}")]
    ShapeMismatch { client: usize, rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error("client {client} row {row} is not a probability vector (sum {sum})")]
    NotProbabilities { client: usize, row: usize, sum: f64 },
    #[error("era temperature must be in (0, 1], got {0}")]
    BadTemperature(f64),
    #[error("trim fraction must be in [0, 0.5), got {0}")]
    BadTrimFraction(f64),
    #[error("trimming {trim} from each side leaves nothing of {clients} clients")]
    TrimsEverything { trim: usize, clients: usize },
    #[error("aggregated row {row} sums to {sum}; cannot renormalize")]
    DegenerateRow { row: usize, sum: f64 },
    #[error("framework {framework:?} shares probability vectors; share_kind must be probabilities")]
    ShareKindMismatch { framework: Framework },
    #[error("distill_loss must be a distillation loss, got {0:?}")]
    NotADistillLoss(Loss),
    #[error("need at least 2 clients, got {0}")]
    TooFewClients(usize),
    #[error("need {clients} shards for {clients} clients, got {shards}")]
    ShardCountMismatch { clients: usize, shards: usize },
    #[error("shard for client {client} is empty")]
    EmptyShard { client: usize },
    #[error("shard index {index} out of range for {rows} private rows")]
    ShardIndexOutOfRange { index: usize, rows: usize },
    #[error("round subset of {count} exceeds public pool of {pool}")]
    SubsetTooLarge { count: usize, pool: usize },
    #[error("{which} dataset carries no labels")]
    UnlabeledDataset { which: &'static str },
    #[error("round subset of {count} cannot hold {forced} planted rows")]
    ForcedExceedsSubset { count: usize, forced: usize },
    #[error("round_public_count must be at least 1")]
    EmptySubset,
    #[error("private pool and public pool widths differ: {private} vs {public}")]
    WidthMismatch { private: usize, public: usize },
    #[error("client {client}: {source}")]
    ClientTrain { client: usize, source: TrainError },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    FedMd,
    DsFl,
    Cronus,
}

/// What clients publish on the shared subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareKind {
    Logits,
    Probabilities,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdConfig {
    pub framework: Framework,
    pub clients: usize,
    pub rounds: usize,
    /// Size of the per-round public subset every client predicts on.
    pub round_public_count: usize,
    pub share_kind: ShareKind,
    /// Sharpening temperature for entropy-reducing aggregation.
    pub era_temperature: f64,
    /// Fraction trimmed from each side of every coordinate.
    pub trim_fraction: f64,
    pub distill_loss: Loss,
    /// Local epochs in round 0; later rounds use `local_epochs`.
    pub first_round_epochs: usize,
    pub local_epochs: usize,
    pub distill_epochs: usize,
    pub pretrain_patience: usize,
    pub pretrain_max_epochs: usize,
}

impl FdConfig {
    /// Framework defaults: what is shared, how it is fused, which loss
    /// distills it back.
    pub fn for_framework(framework: Framework, clients: usize) -> Self {
        let (share_kind, distill_loss) = match framework {
            Framework::FedMd => (ShareKind::Logits, Loss::DistillMae),
            Framework::DsFl => (ShareKind::Probabilities, Loss::DistillKl),
            Framework::Cronus => (ShareKind::Probabilities, Loss::DistillMae),
        };
        Self {
            framework,
            clients,
            rounds: 5,
            round_public_count: 1024,
            share_kind,
            era_temperature: 0.1,
            trim_fraction: 0.1,
            distill_loss,
            first_round_epochs: 20,
            local_epochs: 5,
            distill_epochs: 10,
            pretrain_patience: 3,
            pretrain_max_epochs: 50,
        }
    }

    pub fn validate(&self) -> Result<(), FdError> {
        if self.clients < 2 {
            return Err(FdError::TooFewClients(self.clients));
        }
        if self.round_public_count == 0 {
            return Err(FdError::EmptySubset);
        }
        if !(self.era_temperature > 0.0 && self.era_temperature <= 1.0) {
            return Err(FdError::BadTemperature(self.era_temperature));
        }
        if !(self.trim_fraction >= 0.0 && self.trim_fraction < 0.5) {
            return Err(FdError::BadTrimFraction(self.trim_fraction));
        }
        if matches!(self.framework, Framework::DsFl | Framework::Cronus)
            && self.share_kind != ShareKind::Probabilities
        {
            return Err(FdError::ShareKindMismatch { framework: self.framework });
        }
        if self.distill_loss == Loss::CrossEntropy {
            return Err(FdError::NotADistillLoss(self.distill_loss));
        }
        Ok(())
    }
}

fn check_same_shape(per_client: &[Array2<f64>]) -> Result<(usize, usize), FdError> {
    let first = per_client.first().ok_or(FdError::NoUpdates)?;
    let (rows, cols) = first.dim();
    for (client, m) in per_client.iter().enumerate() {
        if m.dim() != (rows, cols) {
            return Err(FdError::ShapeMismatch {
                client,
                rows,
                cols,
                got_rows: m.nrows(),
                got_cols: m.ncols(),
            });
        }
    }
    Ok((rows, cols))
}

fn check_probability_rows(per_client: &[Array2<f64>]) -> Result<(), FdError> {
    for (client, m) in per_client.iter().enumerate() {
        for (row, r) in m.rows().into_iter().enumerate() {
            let sum = r.sum();
            let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
            if !((sum - 1.0).abs() <= 1e-6 && min >= -1e-9) {
                return Err(FdError::NotProbabilities { client, row, sum });
            }
        }
    }
    Ok(())
}

/// Element-wise mean of the shared matrices.
pub fn aggregate_mean(per_client: &[Array2<f64>]) -> Result<Array2<f64>, FdError> {
    let (rows, cols) = check_same_shape(per_client)?;
    let mut out = Array2::zeros((rows, cols));
    for m in per_client {
        out += m;
    }
    out /= per_client.len() as f64;
    Ok(out)
}

/// Entropy-reducing aggregation: the mean probability row is sharpened by
/// `softmax(ln(mean) / temperature)`. Temperatures below 1 push the row
/// toward its argmax, never away from it.
pub fn aggregate_era(per_client: &[Array2<f64>], temperature: f64) -> Result<Array2<f64>, FdError> {
    if !(temperature > 0.0 && temperature <= 1.0) {
        return Err(FdError::BadTemperature(temperature));
    }
    check_same_shape(per_client)?;
    check_probability_rows(per_client)?;
    let mean = aggregate_mean(per_client)?;
    let scaled = mean.mapv(|p| p.max(1e-12).ln() / temperature);
    Ok(softmax_rows(scaled.view()))
}

/// Coordinate-wise trimmed mean: `ceil(trim_fraction * clients)` lowest and
/// highest values are dropped per coordinate before averaging. With
/// `renormalize`, rows are scaled back onto the simplex (probability
/// shares stay probabilities).
pub fn aggregate_trimmed(
    per_client: &[Array2<f64>],
    trim_fraction: f64,
    renormalize: bool,
) -> Result<Array2<f64>, FdError> {
    if !(trim_fraction >= 0.0 && trim_fraction < 0.5) {
        return Err(FdError::BadTrimFraction(trim_fraction));
    }
    let (rows, cols) = check_same_shape(per_client)?;
    let n = per_client.len();
    let trim = (trim_fraction * n as f64).ceil() as usize;
    if 2 * trim >= n {
        return Err(FdError::TrimsEverything { trim, clients: n });
    }
    let mut out = Array2::zeros((rows, cols));
    let mut column: Vec<f64> = Vec::with_capacity(n);
    for i in 0..rows {
        for j in 0..cols {
            column.clear();
            column.extend(per_client.iter().map(|m| m[[i, j]]));
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite shared outputs"));
            let kept = &column[trim..n - trim];
            out[[i, j]] = kept.iter().sum::<f64>() / kept.len() as f64;
        }
    }
    if renormalize {
        for (row, mut r) in out.rows_mut().into_iter().enumerate() {
            let sum = r.sum();
            if sum <= 0.0 {
                return Err(FdError::DegenerateRow { row, sum });
            }
            r.mapv_inplace(|v| v / sum);
        }
    }
    Ok(out)
}

/// Stops a training loop once the observed loss has gone `patience`
/// consecutive observations without improving on its best value.
pub struct PlateauDetector {
    best: f64,
    since_best: usize,
    patience: usize,
}

impl PlateauDetector {
    pub fn new(patience: usize) -> Self {
        Self { best: f64::INFINITY, since_best: 0, patience }
    }

    /// Feed one loss observation; true means stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

/// One round's shared predictions, as the server saw them.
#[derive(Clone, Debug)]
pub struct LogitRecord {
    pub round: usize,
    /// Sorted pool rows of the round subset.
    pub selection: Vec<usize>,
    /// Per client, one row per selection entry.
    pub per_client: Vec<Array2<f64>>,
    pub aggregated: Array2<f64>,
}

/// One round of the persisted trace. Every vector is indexed by client.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundTraceEntry {
    pub round: usize,
    pub selection: Vec<usize>,
    pub loss_before_local: Vec<f64>,
    pub loss_after_local: Vec<f64>,
    pub accuracy_after_local: Vec<f64>,
    pub mean_distill_loss: Vec<f64>,
    pub accuracy_after_distill: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

/// Client-side optimizer settings; the loss is picked per phase.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClientTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dp: Option<DpConfig>,
}

pub struct ClientState {
    pub id: usize,
    pub params: ModelParams,
    pub shard: Vec<usize>,
    local: Trainer,
    distiller: Trainer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainOutcome {
    /// Only the logit-sharing framework pretrains on public data.
    NotApplicable,
    /// The public pool carries no labels; pretraining is skipped.
    SkippedUnlabeled,
    /// Epochs each client ran before its public loss plateaued.
    Trained { epochs_per_client: Vec<usize> },
}

pub struct Federation {
    cfg: FdConfig,
    clients: Vec<ClientState>,
    private: Dataset,
    pool: PublicPool,
    test: Dataset,
    select_rng: StreamRng,
    records: Vec<LogitRecord>,
    trace: Vec<RoundTraceEntry>,
}

impl Federation {
    pub fn new(
        cfg: FdConfig,
        private: Dataset,
        pool: PublicPool,
        test: Dataset,
        shards: Vec<Vec<usize>>,
        arch: &ModelArch,
        train: ClientTrainConfig,
        seed: u64,
    ) -> Result<Self, FdError> {
        cfg.validate()?;
        if shards.len() != cfg.clients {
            return Err(FdError::ShardCountMismatch { clients: cfg.clients, shards: shards.len() });
        }
        if cfg.round_public_count > pool.len() {
            return Err(FdError::SubsetTooLarge { count: cfg.round_public_count, pool: pool.len() });
        }
        if pool.planted().len() > cfg.round_public_count {
            return Err(FdError::ForcedExceedsSubset {
                count: cfg.round_public_count,
                forced: pool.planted().len(),
            });
        }
        if private.dim() != pool.features().ncols() {
            return Err(FdError::WidthMismatch { private: private.dim(), public: pool.features().ncols() });
        }
        for (client, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(FdError::EmptyShard { client });
            }
            for &i in shard {
                if i >= private.len() {
                    return Err(FdError::ShardIndexOutOfRange { index: i, rows: private.len() });
                }
            }
        }

        let mut dims = vec![private.dim()];
        dims.extend_from_slice(&arch.hidden);
        dims.push(private.num_classes());

        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                let seed_c = client_seed(seed, id);
                let params = ModelParams::init(&dims, arch.activation, seed_c)?;
                let local = Trainer::new(TrainConfig {
                    lr: train.lr,
                    batch_size: train.batch_size,
                    loss: Loss::CrossEntropy,
                    seed: seed_c,
                    dp: train.dp,
                })?;
                // Distillation gets its own derived seed so its shuffle
                // stream cannot collide with local training.
                let distiller = Trainer::new(TrainConfig {
                    lr: train.lr,
                    batch_size: train.batch_size,
                    loss: cfg.distill_loss,
                    seed: derive_seed(seed_c, 0xD157),
                    dp: train.dp,
                })?;
                Ok(ClientState { id, params, shard, local, distiller })
            })
            .collect::<Result<Vec<_>, FdError>>()?;

        Ok(Self {
            cfg,
            clients,
            private,
            pool,
            test,
            select_rng: StreamRng::new(seed, streams::ROUND_SELECT),
            records: Vec::new(),
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &FdConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn pool(&self) -> &PublicPool {
        &self.pool
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    pub fn records(&self) -> &[LogitRecord] {
        &self.records
    }

    pub fn trace(&self) -> &[RoundTraceEntry] {
        &self.trace
    }

    /// Pretraining on the labeled public rows (planted probes excluded),
    /// one client at a time, each until its own plateau.
    pub fn pretrain_public(&mut self) -> Result<PretrainOutcome, FdError> {
        if self.cfg.framework != Framework::FedMd {
            return Ok(PretrainOutcome::NotApplicable);
        }
        let Some(labels) = self.pool.labels() else {
            return Ok(PretrainOutcome::SkippedUnlabeled);
        };
        let rows: Vec<usize> = (0..self.pool.base_rows()).collect();
        let x = gather(self.pool.features(), &rows);
        let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();

        let mut epochs_per_client = Vec::with_capacity(self.clients.len());
        for client in &mut self.clients {
            let mut detector = PlateauDetector::new(self.cfg.pretrain_patience);
            let mut epochs = 0;
            for _ in 0..self.cfg.pretrain_max_epochs {
                client
                    .local
                    .epoch(&mut client.params, x.view(), BatchTargets::Classes(&y))
                    .map_err(|source| FdError::ClientTrain { client: client.id, source })?;
                epochs += 1;
                let val = mean_loss(&client.params, x.view(), BatchTargets::Classes(&y), Loss::CrossEntropy)?;
                if detector.observe(val) {
                    break;
                }
            }
            epochs_per_client.push(epochs);
        }
        Ok(PretrainOutcome::Trained { epochs_per_client })
    }

    /// Selects the round subset: every planted row, then a uniform sample of
    /// the remaining pool.
    fn select_subset(&mut self) -> Vec<usize> {
        let planted = self.pool.planted_rows();
        let free: Vec<usize> = (0..self.pool.len()).filter(|r| !planted.contains(r)).collect();
        let need = self.cfg.round_public_count - planted.len();
        let mut selection: Vec<usize> = self
            .select_rng
            .sample_indices(free.len(), need)
            .into_iter()
            .map(|p| free[p])
            .collect();
        selection.extend(planted.iter().copied());
        selection.sort_unstable();
        selection
    }

    /// One full round: local updates, prediction exchange, aggregation,
    /// distillation. Appends to both the record list and the trace.
    pub fn run_round(&mut self) -> Result<&RoundTraceEntry, FdError> {
        let round = self.records.len();
        let selection = self.select_subset();
        let subset = gather(self.pool.features(), &selection);
        let test_labels = self
            .test
            .labels()
            .ok_or(FdError::UnlabeledDataset { which: "test" })?
            .to_vec();
        let private_labels = self
            .private
            .labels()
            .ok_or(FdError::UnlabeledDataset { which: "private" })?
            .to_vec();
        let epochs = if round == 0 { self.cfg.first_round_epochs } else { self.cfg.local_epochs };

        let mut loss_before_local = Vec::new();
        let mut loss_after_local = Vec::new();
        let mut accuracy_after_local = Vec::new();
        for client in &mut self.clients {
            let x = gather(self.private.features(), &client.shard);
            let y: Vec<usize> = client.shard.iter().map(|&i| private_labels[i]).collect();
            loss_before_local.push(mean_loss(
                &client.params,
                x.view(),
                BatchTargets::Classes(&y),
                Loss::CrossEntropy,
            )?);
            for _ in 0..epochs {
                client
                    .local
                    .epoch(&mut client.params, x.view(), BatchTargets::Classes(&y))
                    .map_err(|source| FdError::ClientTrain { client: client.id, source })?;
            }
            loss_after_local.push(mean_loss(
                &client.params,
                x.view(),
                BatchTargets::Classes(&y),
                Loss::CrossEntropy,
            )?);
            accuracy_after_local.push(client.params.accuracy(self.test.features(), &test_labels)?);
        }

        // Communication phase: every client publishes predictions on the
        // same subset.
        let per_client: Vec<Array2<f64>> = self
            .clients
            .iter()
            .map(|client| {
                let logits = client.params.forward_batch(subset.view())?;
                Ok(match self.cfg.share_kind {
                    ShareKind::Logits => logits,
                    ShareKind::Probabilities => softmax_rows(logits.view()),
                })
            })
            .collect::<Result<Vec<_>, FdError>>()?;

        let aggregated = match self.cfg.framework {
            Framework::FedMd => aggregate_mean(&per_client)?,
            Framework::DsFl => aggregate_era(&per_client, self.cfg.era_temperature)?,
            Framework::Cronus => aggregate_trimmed(
                &per_client,
                self.cfg.trim_fraction,
                self.cfg.share_kind == ShareKind::Probabilities,
            )?,
        };

        // Distillation targets must live on the simplex; logit aggregates
        // are mapped there once, server-side.
        let targets = match self.cfg.share_kind {
            ShareKind::Logits => softmax_rows(aggregated.view()),
            ShareKind::Probabilities => aggregated.clone(),
        };

        let mut mean_distill_loss = Vec::new();
        let mut accuracy_after_distill = Vec::new();
        for client in &mut self.clients {
            let mut last = 0.0;
            for _ in 0..self.cfg.distill_epochs {
                last = client
                    .distiller
                    .epoch(&mut client.params, subset.view(), BatchTargets::Soft(targets.view()))
                    .map_err(|source| FdError::ClientTrain { client: client.id, source })?;
            }
            mean_distill_loss.push(last);
            accuracy_after_distill.push(client.params.accuracy(self.test.features(), &test_labels)?);
        }

        self.records.push(LogitRecord { round, selection: selection.clone(), per_client, aggregated });
        self.trace.push(RoundTraceEntry {
            round,
            selection,
            loss_before_local,
            loss_after_local,
            accuracy_after_local,
            mean_distill_loss,
            accuracy_after_distill,
        });
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Runs the configured number of rounds.
    pub fn run(&mut self) -> Result<(), FdError> {
        for _ in 0..self.cfg.rounds {
            self.run_round()?;
        }
        Ok(())
    }

    /// Mean over clients of the final post-distillation test accuracy.
    pub fn final_mean_accuracy(&self) -> Option<f64> {
        self.trace.last().map(|t| mean(&t.accuracy_after_distill))
    }

    /// Mean over clients of test accuracy right after round 0's local
    /// updates, before any collaboration has happened.
    pub fn round0_local_accuracy(&self) -> Option<f64> {
        self.trace.first().map(|t| mean(&t.accuracy_after_local))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Converts a shared prediction row into a probability row.
pub fn row_to_probabilities(row: ndarray::ArrayView1<f64>, share: ShareKind) -> ndarray::Array1<f64> {
    match share {
        ShareKind::Logits => crate::nn::softmax(row),
        ShareKind::Probabilities => row.to_owned(),
    }
}

/// Converts a whole shared matrix into probability rows.
pub fn matrix_to_probabilities(m: ArrayView2<f64>, share: ShareKind) -> Array2<f64> {
    match share {
        ShareKind::Logits => softmax_rows(m),
        ShareKind::Probabilities => m.to_owned(),
    }
}
