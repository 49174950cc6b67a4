//! Datasets and the splits the protocol runs on.
//!
//! The pipeline is: synthesize (or load) a labeled set, carve off a held-out
//! test set, split the rest into a private pool and a public pool, and
//! scatter the private pool across clients with a Dirichlet partition whose
//! concentration alpha controls how non-IID the shards are. Membership
//! evaluation then plants probe rows (known members from one client's shard,
//! known non-members from the test set) into the public pool, where the
//! protocol will ask every client to predict on them.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read, Write as IoWrite};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

use crate::attacks::LabelDistribution;
use crate::rng::{streams, StreamRng};

#[derive(Error, Debug)]
pub enum DataError {
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("feature at row {row}, column {col} is not finite")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("{rows} feature rows but {labels} labels")]
    LabelCountMismatch { rows: usize, labels: usize },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("need at least one class")]
    NoClasses,
    #[error("class separation must be nonnegative and finite, got {0}")]
    BadClassSep(f64),
    #[error("feature dimension must be at least 1")]
    ZeroDim,
    #[error("split ratio must be strictly between 0 and 1, got {0}")]
    BadRatio(f64),
    #[error("cannot split {rows} rows into two nonempty parts")]
    SplitTooSmall { rows: usize },
    #[error("{0} requires labels")]
    NeedsLabels(&'static str),
    #[error("dirichlet alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("need at least one client")]
    NoClients,
    #[error("could not give every one of {clients} clients an example after {attempts} draws at alpha {alpha}; use more data or a larger alpha")]
    PartitionFailed { alpha: f64, clients: usize, attempts: usize },
    #[error("shard index {index} out of range for {rows} rows")]
    ShardIndexOutOfRange { index: usize, rows: usize },
    #[error("eval split of {k} exceeds shard size {shard} or test size {test}")]
    EvalTooLarge { k: usize, shard: usize, test: usize },
    #[error("test set has {have} examples of class {class}, need {need} for a stratified split")]
    InsufficientClassExamples { class: usize, need: usize, have: usize },
    #[error("planted row width {got} does not match pool width {expected}")]
    PlantWidthMismatch { expected: usize, got: usize },
    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("idx file {path}: {message}")]
    Idx { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A labeled (or feature-only) dataset. Rows are examples.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self, DataError> {
        if features.nrows() == 0 {
            return Err(DataError::EmptyDataset);
        }
        if num_classes == 0 {
            return Err(DataError::NoClasses);
        }
        for ((row, col), &v) in features.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFiniteFeature { row, col });
            }
        }
        if let Some(ys) = &labels {
            if ys.len() != features.nrows() {
                return Err(DataError::LabelCountMismatch {
                    rows: features.nrows(),
                    labels: ys.len(),
                });
            }
            for (row, &label) in ys.iter().enumerate() {
                if label >= num_classes {
                    return Err(DataError::LabelOutOfRange { row, label, classes: num_classes });
                }
            }
        }
        Ok(Self { features, labels, num_classes, name: name.into() })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Labels or an error naming the operation that needed them.
    pub fn require_labels(&self, op: &'static str) -> Result<&[usize], DataError> {
        self.labels().ok_or(DataError::NeedsLabels(op))
    }
}

/// Copies the given rows into a dense matrix, in the order given.
pub fn gather(features: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), features.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&features.row(i));
    }
    out
}

/// Mixture of `classes` unit-variance Gaussian blobs in `dim` dimensions.
/// Class means sit `class_sep` from the origin in seeded random directions,
/// so `class_sep = 0` collapses every class onto the same cloud. Class
/// counts are balanced to within one example and row order is shuffled.
pub fn synth_gaussian_mixture(
    classes: usize,
    dim: usize,
    examples: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes == 0 {
        return Err(DataError::NoClasses);
    }
    if dim == 0 {
        return Err(DataError::ZeroDim);
    }
    if examples == 0 {
        return Err(DataError::EmptyDataset);
    }
    if !(class_sep.is_finite() && class_sep >= 0.0) {
        return Err(DataError::BadClassSep(class_sep));
    }
    let mut rng = StreamRng::new(seed, streams::SYNTH);

    let means: Vec<Array1<f64>> = (0..classes)
        .map(|_| {
            let v = Array1::from_iter((0..dim).map(|_| rng.normal()));
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                v.mapv(|x| x / norm * class_sep)
            } else {
                v
            }
        })
        .collect();

    let base = examples / classes;
    let rem = examples % classes;
    let mut features = Array2::zeros((examples, dim));
    let mut labels = Vec::with_capacity(examples);
    let mut row = 0;
    for (c, mean) in means.iter().enumerate() {
        let count = base + usize::from(c < rem);
        for _ in 0..count {
            for j in 0..dim {
                features[[row, j]] = mean[j] + rng.normal();
            }
            labels.push(c);
            row += 1;
        }
    }

    let mut order: Vec<usize> = (0..examples).collect();
    rng.shuffle(&mut order);
    let features = gather(features.view(), &order);
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(features, Some(labels), classes, "synthetic")
}

/// Shuffles and splits into a private training part and a public part;
/// `ratio` is the training fraction. Both sides are guaranteed nonempty.
/// The public side keeps its labels unless `strip_public_labels` is set
/// (some protocols assume an unlabeled public pool).
pub fn split_train_public(
    ds: &Dataset,
    ratio: f64,
    strip_public_labels: bool,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio.is_finite() && ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    let n = ds.len();
    if n < 2 {
        return Err(DataError::SplitTooSmall { rows: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    StreamRng::new(seed, streams::SPLIT).shuffle(&mut order);
    let train_count = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    let (train_rows, public_rows) = order.split_at(train_count);

    let pick = |rows: &[usize], strip: bool, suffix: &str| {
        let features = gather(ds.features(), rows);
        let labels = if strip {
            None
        } else {
            ds.labels().map(|ys| rows.iter().map(|&i| ys[i]).collect())
        };
        Dataset::new(features, labels, ds.num_classes(), format!("{}/{suffix}", ds.name()))
    };
    Ok((pick(train_rows, false, "train")?, pick(public_rows, strip_public_labels, "public")?))
}

/// Splits `counts` slots among weights by largest remainder, deterministic
/// tie-break on index. Sums exactly to `total`.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut fractions: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w * total as f64 - counts[i] as f64))
        .collect();
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in fractions.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Non-IID shards: for every class, client proportions are drawn from a
/// symmetric Dirichlet(alpha) and the class's examples are dealt out
/// accordingly. Small alpha concentrates classes on few clients; large
/// alpha approaches a uniform split. Redraws (up to 100 whole partitions)
/// until every client owns at least one example.
pub fn dirichlet_partition(
    ds: &Dataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if clients == 0 {
        return Err(DataError::NoClients);
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(DataError::BadAlpha(alpha));
    }
    let labels = ds.require_labels("dirichlet_partition")?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }

    let mut rng = StreamRng::new(seed, streams::PARTITION);
    const ATTEMPTS: usize = 100;
    for _ in 0..ATTEMPTS {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for class_rows in &by_class {
            if class_rows.is_empty() {
                continue;
            }
            let mut rows = class_rows.clone();
            rng.shuffle(&mut rows);
            let weights = rng.dirichlet(alpha, clients);
            let counts = apportion(&weights, rows.len());
            let mut offset = 0;
            for (client, &count) in counts.iter().enumerate() {
                shards[client].extend_from_slice(&rows[offset..offset + count]);
                offset += count;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for shard in &mut shards {
                shard.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(DataError::PartitionFailed { alpha, clients, attempts: ATTEMPTS })
}

/// Membership-evaluation probes for one client: `members` index the private
/// training set, `non_members` index the held-out test set, `k` of each.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub members: Vec<usize>,
    pub non_members: Vec<usize>,
}

/// Samples `k` members from the client's shard and `k` non-members from the
/// test set. With `stratified` set, the non-member class histogram matches
/// the members' to within availability (erroring when the test set cannot
/// supply a class at all).
pub fn make_eval_split(
    shard: &[usize],
    train: &Dataset,
    test: &Dataset,
    k: usize,
    stratified: bool,
    seed: u64,
) -> Result<EvalSplit, DataError> {
    if k == 0 || k > shard.len() || k > test.len() {
        return Err(DataError::EvalTooLarge { k, shard: shard.len(), test: test.len() });
    }
    for &i in shard {
        if i >= train.len() {
            return Err(DataError::ShardIndexOutOfRange { index: i, rows: train.len() });
        }
    }
    let mut rng = StreamRng::new(seed, streams::EVAL_SPLIT);
    let mut members: Vec<usize> =
        rng.sample_indices(shard.len(), k).into_iter().map(|p| shard[p]).collect();
    members.sort_unstable();

    let mut non_members: Vec<usize> = if stratified {
        let train_labels = train.require_labels("stratified eval split")?;
        let test_labels = test.require_labels("stratified eval split")?;
        let mut need = vec![0usize; train.num_classes().max(test.num_classes())];
        for &m in &members {
            need[train_labels[m]] += 1;
        }
        let mut test_by_class: Vec<Vec<usize>> = vec![Vec::new(); need.len()];
        for (i, &y) in test_labels.iter().enumerate() {
            test_by_class[y].push(i);
        }
        let mut picked = Vec::with_capacity(k);
        for (class, &n_need) in need.iter().enumerate() {
            if n_need == 0 {
                continue;
            }
            let pool = &test_by_class[class];
            if pool.len() < n_need {
                return Err(DataError::InsufficientClassExamples {
                    class,
                    need: n_need,
                    have: pool.len(),
                });
            }
            picked.extend(rng.sample_indices(pool.len(), n_need).into_iter().map(|p| pool[p]));
        }
        picked
    } else {
        rng.sample_indices(test.len(), k)
    };
    non_members.sort_unstable();
    Ok(EvalSplit { members, non_members })
}

/// Ground-truth class distribution of a set of rows.
pub fn label_distribution(ds: &Dataset, rows: &[usize]) -> Result<LabelDistribution, DataError> {
    let labels = ds.require_labels("label_distribution")?;
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut counts = vec![0.0; ds.num_classes()];
    for &i in rows {
        if i >= labels.len() {
            return Err(DataError::ShardIndexOutOfRange { index: i, rows: labels.len() });
        }
        counts[labels[i]] += 1.0;
    }
    Ok(LabelDistribution::new(counts).expect("counts are nonnegative with a positive sum"))
}

/// Why a row sits in the public pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// A membership probe with known ground truth.
    Probe,
    /// A noisy copy of a probe, used for indirect queries.
    Neighbor { of_pool_row: usize },
}

/// One row appended to the public pool by the evaluation harness.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PlantedRow {
    pub pool_row: usize,
    /// Client whose membership is being tested.
    pub client: usize,
    pub label: usize,
    pub is_member: bool,
    /// Row in the origin dataset (train set for members, test set for
    /// non-members, the probe's pool row for neighbors).
    pub origin_row: usize,
    pub kind: PlantKind,
}

/// The public pool the protocol runs on: the real public rows first, then
/// any planted probe rows. Planted rows never count as public data for
/// label inference or reference distillation; they exist so clients will
/// publish predictions on them.
#[derive(Clone, Debug)]
pub struct PublicPool {
    features: Array2<f64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    base_rows: usize,
    planted: Vec<PlantedRow>,
}

impl PublicPool {
    pub fn from_dataset(public: &Dataset) -> Self {
        Self {
            features: public.features().to_owned(),
            labels: public.labels().map(|ys| ys.to_vec()),
            num_classes: public.num_classes(),
            base_rows: public.len(),
            planted: Vec::new(),
        }
    }

    /// Appends one row; returns its pool row index.
    pub fn plant(
        &mut self,
        features: &[f64],
        client: usize,
        label: usize,
        is_member: bool,
        origin_row: usize,
        kind: PlantKind,
    ) -> Result<usize, DataError> {
        if features.len() != self.features.ncols() {
            return Err(DataError::PlantWidthMismatch {
                expected: self.features.ncols(),
                got: features.len(),
            });
        }
        if label >= self.num_classes {
            return Err(DataError::LabelOutOfRange {
                row: self.features.nrows(),
                label,
                classes: self.num_classes,
            });
        }
        let pool_row = self.features.nrows();
        self.features.push_row(ndarray::ArrayView1::from(features)).expect("width checked");
        if let Some(ys) = &mut self.labels {
            ys.push(label);
        }
        self.planted.push(PlantedRow { pool_row, client, label, is_member, origin_row, kind });
        Ok(pool_row)
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of the original public set, before any planting.
    pub fn base_rows(&self) -> usize {
        self.base_rows
    }

    pub fn planted(&self) -> &[PlantedRow] {
        &self.planted
    }

    /// Pool rows of every planted row (probes and neighbors).
    pub fn planted_rows(&self) -> HashSet<usize> {
        self.planted.iter().map(|p| p.pool_row).collect()
    }
}

/// A loaded CSV dataset plus the dense re-indexing applied to its labels:
/// `label_map[new_index] = original_value`.
#[derive(Clone, Debug)]
pub struct CsvDataset {
    pub dataset: Dataset,
    pub label_map: Vec<i64>,
}

/// Loads a comma-separated file with a header row. Every column except the
/// optional label column must be numeric. Original label values are
/// remapped to dense 0..M in ascending order; the mapping is returned.
/// Errors carry 1-based line numbers (the header is line 1).
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<CsvDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(&e))?;
    let headers = reader.headers().map_err(|e| csv_error(&e))?.clone();
    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))?,
        ),
        None => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(DataError::Csv {
                line,
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(headers.len().saturating_sub(1));
        for (col, field) in record.iter().enumerate() {
            if Some(col) == label_idx {
                let value: f64 = field.trim().parse().map_err(|_| DataError::Csv {
                    line,
                    message: format!("label {field:?} is not numeric"),
                })?;
                if value.fract() != 0.0 || !value.is_finite() {
                    return Err(DataError::Csv {
                        line,
                        message: format!("label {field:?} is not an integer"),
                    });
                }
                raw_labels.push(value as i64);
            } else {
                let value: f64 = field.trim().parse().map_err(|_| DataError::Csv {
                    line,
                    message: format!("field {field:?} in column {:?} is not numeric", &headers[col]),
                })?;
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let width = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((flat.len() / width, width), flat)
        .expect("row widths validated against the header");

    let (labels, label_map) = if label_idx.is_some() {
        let mut distinct: Vec<i64> = raw_labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let dense: Vec<usize> = raw_labels
            .iter()
            .map(|v| distinct.binary_search(v).expect("value came from the same list"))
            .collect();
        (Some(dense), distinct)
    } else {
        (None, Vec::new())
    };
    let num_classes = label_map.len().max(1);
    let name = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(CsvDataset { dataset: Dataset::new(features, labels, num_classes, name)?, label_map })
}

fn csv_error(e: &csv::Error) -> DataError {
    let line = match e.kind() {
        csv::ErrorKind::Utf8 { pos, .. } => pos.as_ref().map_or(0, |p| p.line()),
        csv::ErrorKind::UnequalLengths { pos, .. } => pos.as_ref().map_or(0, |p| p.line()),
        csv::ErrorKind::Deserialize { pos, .. } => pos.as_ref().map_or(0, |p| p.line()),
        _ => 0,
    };
    DataError::Csv { line, message: e.to_string() }
}

/// Writes `f0..f{d-1}` feature columns plus a `label` column when labels are
/// present. Floats are printed in shortest round-trip form, so a load of the
/// written file reproduces the matrix exactly.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = File::create(path)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    if ds.labels().is_some() {
        header.push("label".to_string());
    }
    writeln!(out, "{}", header.join(","))?;
    for (i, row) in ds.features().rows().into_iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        if let Some(ys) = ds.labels() {
            fields.push(ys[i].to_string());
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// IDX binary format, as used for image/label archives:
///
/// ```text
/// [0x00, 0x00, dtype, ndim] [dim_0: u32 BE] ... [dim_{ndim-1}: u32 BE] data
/// ```
///
/// `dtype` is 0x08 (u8), 0x0C (i32 BE), 0x0D (f32 BE) or 0x0E (f64 BE); data
/// is row-major. Feature files need ndim >= 2 and are flattened to
/// `(dim_0, prod(rest))`; u8 features are scaled to [0, 1]. Label files are
/// 1-dimensional u8 or i32 and the class count is `max + 1`.
pub fn load_idx(features_path: &Path, labels_path: Option<&Path>) -> Result<Dataset, DataError> {
    let (dims, values) = read_idx(features_path)?;
    if dims.len() < 2 {
        return Err(idx_err(features_path, "feature file must have at least 2 dimensions"));
    }
    let rows = dims[0];
    let width: usize = dims[1..].iter().product();
    let features = Array2::from_shape_vec((rows, width), values)
        .expect("length validated against the header");

    let (labels, num_classes) = match labels_path {
        Some(lp) => {
            let (ldims, lvalues) = read_idx(lp)?;
            if ldims.len() != 1 {
                return Err(idx_err(lp, "label file must be 1-dimensional"));
            }
            if ldims[0] != rows {
                return Err(idx_err(
                    lp,
                    &format!("{} labels for {rows} feature rows", ldims[0]),
                ));
            }
            let mut labels = Vec::with_capacity(rows);
            for v in lvalues {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(idx_err(lp, &format!("label {v} is not a class index")));
                }
                labels.push(v as usize);
            }
            let classes = labels.iter().max().copied().unwrap_or(0) + 1;
            (Some(labels), classes)
        }
        None => (None, 1),
    };
    let name =
        features_path.file_stem().map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(features, labels, num_classes, name)
}

fn idx_err(path: &Path, message: &str) -> DataError {
    DataError::Idx { path: path.display().to_string(), message: message.to_string() }
}

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<f64>), DataError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    if buf.len() < 4 || buf[0] != 0 || buf[1] != 0 {
        return Err(idx_err(path, "bad magic: first two bytes must be zero"));
    }
    let dtype = buf[2];
    let ndim = buf[3] as usize;
    let header = 4 + 4 * ndim;
    if buf.len() < header {
        return Err(idx_err(path, "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &buf[header..];
    let elem = match dtype {
        0x08 => 1,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(idx_err(path, &format!("unsupported dtype 0x{other:02X}"))),
    };
    if body.len() != count * elem {
        return Err(idx_err(
            path,
            &format!("expected {} data bytes, found {}", count * elem, body.len()),
        ));
    }
    let values: Vec<f64> = match dtype {
        // u8 features are normalized so raw image archives land in [0, 1].
        0x08 => body.iter().map(|&b| f64::from(b) / 255.0).collect(),
        0x0C => body
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_be_bytes(c.try_into().unwrap())))
            .collect(),
        0x0D => body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_be_bytes(c.try_into().unwrap())))
            .collect(),
        0x0E => body.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect(),
        _ => unreachable!(),
    };
    // u8 labels must not be normalized; reload them raw.
    if dtype == 0x08 && dims.len() == 1 {
        return Ok((dims, body.iter().map(|&b| f64::from(b)).collect()));
    }
    Ok((dims, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, Activation, BatchTargets, Loss, ModelParams, TrainConfig, Trainer};

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_gaussian_mixture(3, 4, 10, 2.0, 7).unwrap();
        let b = synth_gaussian_mixture(3, 4, 10, 2.0, 7).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.labels(), b.labels());
        let mut counts = [0usize; 3];
        for &y in a.labels().unwrap() {
            counts[y] += 1;
        }
        // 10 over 3 classes: 4/3/3.
        let mut sorted = counts;
        sorted.sort_unstable();
        assert_eq!(sorted, [3, 3, 4]);
    }

    #[test]
    fn separated_blobs_are_learnable() {
        let ds = synth_gaussian_mixture(4, 16, 400, 10.0, 1).unwrap();
        let mut model = ModelParams::init(&[16, 32, 4], Activation::Relu, 2).unwrap();
        let cfg = TrainConfig { lr: 0.05, batch_size: 32, loss: Loss::CrossEntropy, seed: 3, dp: None };
        let mut trainer = Trainer::new(cfg).unwrap();
        let labels = ds.labels().unwrap().to_vec();
        for _ in 0..30 {
            trainer.epoch(&mut model, ds.features(), BatchTargets::Classes(&labels)).unwrap();
        }
        let acc = model.accuracy(ds.features(), &labels).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn zero_separation_is_unlearnable() {
        let ds = synth_gaussian_mixture(4, 16, 400, 0.0, 1).unwrap();
        let mut model = ModelParams::init(&[16, 32, 4], Activation::Relu, 2).unwrap();
        let cfg = TrainConfig { lr: 0.05, batch_size: 32, loss: Loss::CrossEntropy, seed: 3, dp: None };
        let mut trainer = Trainer::new(cfg).unwrap();
        let labels = ds.labels().unwrap().to_vec();
        for _ in 0..5 {
            trainer.epoch(&mut model, ds.features(), BatchTargets::Classes(&labels)).unwrap();
        }
        // Evaluate on a fresh draw from the same (label-free) cloud.
        let fresh = synth_gaussian_mixture(4, 16, 400, 0.0, 99).unwrap();
        let acc = model.accuracy(fresh.features(), fresh.labels().unwrap()).unwrap();
        assert!(acc < 0.45, "accuracy {acc} on unlearnable data");
    }

    #[test]
    fn split_keeps_both_sides_nonempty() {
        let ds = synth_gaussian_mixture(2, 2, 2, 1.0, 0).unwrap();
        let (train, public) = split_train_public(&ds, 0.5, false, 0).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(public.len(), 1);
    }

    #[test]
    fn split_ratio_is_honored_and_labels_strippable() {
        let ds = synth_gaussian_mixture(5, 3, 100, 1.0, 3).unwrap();
        let (train, public) = split_train_public(&ds, 0.8, true, 1).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(public.len(), 20);
        assert!(train.labels().is_some());
        assert!(public.labels().is_none());
        assert!(split_train_public(&ds, 1.0, false, 1).is_err());
        assert!(split_train_public(&ds, 0.0, false, 1).is_err());
    }

    #[test]
    fn partition_covers_everything_exactly_once() {
        let ds = synth_gaussian_mixture(10, 4, 1000, 1.0, 5).unwrap();
        let shards = dirichlet_partition(&ds, 10, 1.0, 11).unwrap();
        assert_eq!(shards.len(), 10);
        let mut seen = vec![false; ds.len()];
        for shard in &shards {
            assert!(!shard.is_empty());
            for &i in shard {
                assert!(!seen[i], "row {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let ds = synth_gaussian_mixture(10, 4, 10_000, 1.0, 5).unwrap();
        let shards = dirichlet_partition(&ds, 10, 10_000.0, 13).unwrap();
        for shard in &shards {
            let size = shard.len() as f64;
            assert!((size - 1000.0).abs() <= 50.0, "shard size {size}");
        }
    }

    #[test]
    fn tiny_alpha_concentrates_classes() {
        let ds = synth_gaussian_mixture(10, 4, 5_000, 1.0, 5).unwrap();
        let shards = dirichlet_partition(&ds, 10, 0.1, 17).unwrap();
        let labels = ds.labels().unwrap();
        let top_share = shards
            .iter()
            .map(|shard| {
                let mut counts = vec![0usize; 10];
                for &i in shard {
                    counts[labels[i]] += 1;
                }
                *counts.iter().max().unwrap() as f64 / shard.len() as f64
            })
            .fold(0.0, f64::max);
        assert!(top_share > 0.5, "most-skewed client top class share {top_share}");
    }

    #[test]
    fn partition_needs_labels_and_sane_alpha() {
        let ds = synth_gaussian_mixture(3, 2, 30, 1.0, 0).unwrap();
        let unlabeled = Dataset::new(ds.features().to_owned(), None, 3, "x").unwrap();
        assert!(dirichlet_partition(&unlabeled, 3, 1.0, 0).is_err());
        assert!(dirichlet_partition(&ds, 3, 0.0, 0).is_err());
        assert!(dirichlet_partition(&ds, 0, 1.0, 0).is_err());
    }

    #[test]
    fn eval_split_sizes_and_disjointness() {
        let train = synth_gaussian_mixture(4, 3, 200, 1.0, 1).unwrap();
        let test = synth_gaussian_mixture(4, 3, 100, 1.0, 2).unwrap();
        let shard: Vec<usize> = (0..50).collect();
        let split = make_eval_split(&shard, &train, &test, 20, false, 3).unwrap();
        assert_eq!(split.members.len(), 20);
        assert_eq!(split.non_members.len(), 20);
        let unique: HashSet<_> = split.members.iter().collect();
        assert_eq!(unique.len(), 20);
        assert!(split.members.iter().all(|m| shard.contains(m)));
    }

    #[test]
    fn stratified_eval_split_matches_histograms() {
        let train = synth_gaussian_mixture(4, 3, 400, 1.0, 1).unwrap();
        let test = synth_gaussian_mixture(4, 3, 400, 1.0, 2).unwrap();
        let shard: Vec<usize> = (0..200).collect();
        let split = make_eval_split(&shard, &train, &test, 40, true, 3).unwrap();
        let hist = |rows: &[usize], ds: &Dataset| {
            let mut h = vec![0usize; 4];
            for &i in rows {
                h[ds.labels().unwrap()[i]] += 1;
            }
            h
        };
        let hm = hist(&split.members, &train);
        let hn = hist(&split.non_members, &test);
        for (a, b) in hm.iter().zip(&hn) {
            assert!(a.abs_diff(*b) <= 1, "member hist {hm:?} vs non-member {hn:?}");
        }
    }

    #[test]
    fn eval_split_rejects_oversized_k() {
        let train = synth_gaussian_mixture(2, 2, 50, 1.0, 1).unwrap();
        let test = synth_gaussian_mixture(2, 2, 10, 1.0, 2).unwrap();
        let shard: Vec<usize> = (0..30).collect();
        assert!(make_eval_split(&shard, &train, &test, 11, false, 0).is_err());
    }

    #[test]
    fn ground_truth_distribution_counts() {
        let ds = synth_gaussian_mixture(3, 2, 30, 1.0, 4).unwrap();
        let labels = ds.labels().unwrap();
        let rows: Vec<usize> = (0..10).collect();
        let dist = label_distribution(&ds, &rows).unwrap();
        let mut expect = vec![0.0; 3];
        for &i in &rows {
            expect[labels[i]] += 0.1;
        }
        for (a, b) in dist.probs().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn planting_appends_and_tracks_rows() {
        let public = synth_gaussian_mixture(3, 2, 20, 1.0, 6).unwrap();
        let mut pool = PublicPool::from_dataset(&public);
        let row = pool.plant(&[0.5, -0.5], 2, 1, true, 7, PlantKind::Probe).unwrap();
        assert_eq!(row, 20);
        assert_eq!(pool.len(), 21);
        assert_eq!(pool.base_rows(), 20);
        assert_eq!(pool.labels().unwrap()[20], 1);
        assert!(pool.planted_rows().contains(&20));
        assert!(pool.plant(&[0.1], 0, 0, false, 0, PlantKind::Probe).is_err());
        assert!(pool.plant(&[0.1, 0.2], 0, 9, false, 0, PlantKind::Probe).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = synth_gaussian_mixture(3, 5, 40, 1.7, 9).unwrap();
        write_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path, Some("label")).unwrap();
        assert_eq!(ds.features(), loaded.dataset.features());
        assert_eq!(ds.labels(), loaded.dataset.labels());
        assert_eq!(loaded.label_map, vec![0, 1, 2]);
    }

    #[test]
    fn csv_labels_are_densely_remapped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sparse.csv");
        std::fs::write(&path, "f0,label\n1.0,7\n2.0,0\n3.0,5\n4.0,7\n").unwrap();
        let loaded = load_csv(&path, Some("label")).unwrap();
        assert_eq!(loaded.label_map, vec![0, 5, 7]);
        assert_eq!(loaded.dataset.labels().unwrap(), &[2, 0, 1, 2]);
        assert_eq!(loaded.dataset.num_classes(), 3);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1,label\n1.0,2.0,0\n1.0,oops,1\n").unwrap();
        let err = load_csv(&path, Some("label")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");

        std::fs::write(&path, "f0,label\n1.0,0\n").unwrap();
        let err = load_csv(&path, Some("target")).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(_)));
    }

    #[test]
    fn csv_without_label_column_is_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.csv");
        std::fs::write(&path, "a,b\n1,2\n3,4\n").unwrap();
        let loaded = load_csv(&path, None).unwrap();
        assert!(loaded.dataset.labels().is_none());
        assert_eq!(loaded.dataset.dim(), 2);
    }

    fn idx_bytes(dtype: u8, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut buf = vec![0, 0, dtype, dims.len() as u8];
        for &d in dims {
            buf.extend_from_slice(&d.to_be_bytes());
        }
        buf.extend_from_slice(body);
        buf
    }

    #[test]
    fn idx_round_trip_u8_features_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("x.idx");
        let lpath = dir.path().join("y.idx");
        // 3 examples of 2x2 "images".
        let body: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        std::fs::write(&fpath, idx_bytes(0x08, &[3, 2, 2], &body)).unwrap();
        std::fs::write(&lpath, idx_bytes(0x08, &[3], &[0, 2, 1])).unwrap();
        let ds = load_idx(&fpath, Some(&lpath)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels().unwrap(), &[0, 2, 1]);
        assert_eq!(ds.num_classes(), 3);
        assert!((ds.features()[[1, 0]] - 80.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_f64_features_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("x64.idx");
        let mut body = Vec::new();
        for v in [1.5f64, -2.25, 0.0, 42.0] {
            body.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(&fpath, idx_bytes(0x0E, &[2, 2], &body)).unwrap();
        let ds = load_idx(&fpath, None).unwrap();
        assert_eq!(ds.features()[[0, 1]], -2.25);
        assert_eq!(ds.features()[[1, 1]], 42.0);
    }

    #[test]
    fn idx_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        std::fs::write(&path, [1, 2, 3]).unwrap();
        assert!(load_idx(&path, None).is_err());
        // Wrong body length.
        std::fs::write(&path, idx_bytes(0x08, &[2, 2], &[1, 2, 3])).unwrap();
        let err = load_idx(&path, None).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
    }

    #[test]
    fn dataset_validation_catches_bad_inputs() {
        let feats = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, f64::NAN, 2.0]).unwrap();
        let err = Dataset::new(feats, None, 2, "bad").unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");

        let feats = Array2::zeros((2, 2));
        assert!(Dataset::new(feats.clone(), Some(vec![0]), 2, "bad").is_err());
        assert!(Dataset::new(feats, Some(vec![0, 5]), 2, "bad").is_err());
    }

    #[test]
    fn apportion_is_exact_and_deterministic() {
        let counts = apportion(&[0.5, 0.3, 0.2], 7);
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert_eq!(counts, vec![4, 2, 1]);
        let counts = apportion(&[1.0 / 3.0; 3], 10);
        assert_eq!(counts.iter().sum::<usize>(), 10);
    }

    #[test]
    fn mean_loss_helper_lines_up_with_nn() {
        // Guard the cross-module seam: a dataset's feature view feeds nn
        // without copies or transposition.
        let ds = synth_gaussian_mixture(3, 4, 30, 2.0, 8).unwrap();
        let model = ModelParams::init(&[4, 6, 3], Activation::Tanh, 1).unwrap();
        let labels = ds.labels().unwrap();
        let val = nn::mean_loss(&model, ds.features(), BatchTargets::Classes(labels), Loss::CrossEntropy)
            .unwrap();
        assert!(val.is_finite() && val > 0.0);
    }
}
