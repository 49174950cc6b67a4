//! Small dense networks and the losses the protocol trains them with.
//!
//! Models are plain MLPs over f64: affine layers with ReLU or tanh between
//! them, raw logits out. Three losses cover every phase: cross-entropy for
//! local updates, and two distillation losses (mean absolute error and KL)
//! that compare the student's softmax output against an aggregated soft
//! label. Both distillation losses map the student's logits onto the
//! probability simplex first; the soft label must already live there.
//!
//! The trainer is mini-batch SGD. With differential privacy enabled each
//! per-example gradient is L2-clipped to `clip`, Gaussian noise with
//! standard deviation `sigma * clip` is added to the batch sum, and only
//! then is the sum averaged. No epsilon accounting is done here; the knob
//! of interest is sigma itself.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{streams, StreamRng};

/// Probabilities are floored at this value inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Soft labels may deviate from the simplex by at most this much.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("layer {layer} output width {out} does not match next input width {next_in}")]
    LayerShapeMismatch { layer: usize, out: usize, next_in: usize },
    #[error("a network needs at least an input and an output width, got {0} dims")]
    TooFewDims(usize),
    #[error("layer widths must be nonzero")]
    ZeroWidth,
    #[error("input width {got} does not match first layer input width {expected}")]
    InputWidthMismatch { expected: usize, got: usize },
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("target width {got} does not match output width {expected}")]
    TargetWidthMismatch { expected: usize, got: usize },
    #[error("soft label is not a probability vector (sum {sum}, min entry {min})")]
    NotASoftLabel { sum: f64, min: f64 },
    #[error("loss {loss:?} requires a {required} target")]
    TargetKindMismatch { loss: Loss, required: &'static str },
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("dp clip must be positive, got {0}")]
    BadClip(f64),
    #[error("dp sigma must be nonnegative and finite, got {0}")]
    BadSigma(f64),
    #[error("dp sigma > 0 requires a finite clip (noise std is sigma * clip)")]
    NoiseNeedsFiniteClip,
    #[error("batch has {targets} targets for {examples} examples")]
    TargetCountMismatch { examples: usize, targets: usize },
    #[error("cannot train on an empty dataset")]
    EmptyTrainingSet,
}

/// Training aborts, as opposed to configuration mistakes.
#[derive(Error, Debug)]
pub enum TrainError {
    #[error("non-finite loss in batch {batch}; aborting before the model corrupts further")]
    NonFiniteLoss { batch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    DistillMae,
    DistillKl,
}

/// One affine layer; `w` is input-width x output-width so a batch multiplies
/// as `x.dot(w)`.
#[derive(Clone, Debug)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl ModelParams {
    /// Glorot-uniform init, biases zero. Draw order (layer, row, column) is
    /// fixed so a seed pins the whole model.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::TooFewDims(dims.len()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(NnError::ZeroWidth);
        }
        let mut rng = StreamRng::new(seed, streams::MODEL_INIT);
        let layers = dims
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    (2.0 * rng.uniform() - 1.0) * limit
                });
                Layer { w, b: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    /// Builds a model from explicit layers, checking that shapes compose.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::TooFewDims(1));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            let out = pair[0].w.ncols();
            let next_in = pair[1].w.nrows();
            if out != next_in {
                return Err(NnError::LayerShapeMismatch { layer: i, out, next_in });
            }
        }
        for layer in &layers {
            if layer.w.nrows() == 0 || layer.w.ncols() == 0 {
                return Err(NnError::ZeroWidth);
            }
            debug_assert_eq!(layer.w.ncols(), layer.b.len());
        }
        Ok(Self { layers, activation })
    }

    /// Layer widths, input first, class count last.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].w.nrows()];
        dims.extend(self.layers.iter().map(|l| l.w.ncols()));
        dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for optimizers and finite-difference probes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("validated nonempty").w.ncols()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, NnError> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.forward_batch(batch)?.remove_axis(Axis(0)))
    }

    /// Logits for a batch, rows aligned with input rows.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        Ok(self.forward_cached(x)?.1)
    }

    /// Forward pass keeping each layer's post-activation output; index 0 is
    /// the input itself, the final entry is the logits.
    fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, Array2<f64>), NnError> {
        if x.ncols() != self.input_width() {
            return Err(NnError::InputWidthMismatch {
                expected: self.input_width(),
                got: x.ncols(),
            });
        }
        let mut acts: Vec<Array2<f64>> = vec![x.to_owned()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.w);
            z += &layer.b;
            if i < last {
                match self.activation {
                    Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
                    Activation::Tanh => z.mapv_inplace(f64::tanh),
                }
            }
            acts.push(z);
        }
        let logits = acts.last().expect("at least input and logits").clone();
        Ok((acts, logits))
    }

    /// Fraction of rows whose argmax logit matches the label. Ties resolve
    /// to the lowest class index.
    pub fn accuracy(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, NnError> {
        if x.nrows() != labels.len() {
            return Err(NnError::TargetCountMismatch { examples: x.nrows(), targets: labels.len() });
        }
        if labels.is_empty() {
            return Err(NnError::EmptyTrainingSet);
        }
        let logits = self.forward_batch(x)?;
        let hits = logits
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(row.as_slice().expect("contiguous row")) == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax: the row max is subtracted before
/// exponentiation, so even logits around +-1e3 stay finite.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Loss target: a hard class index or a soft label on the simplex.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Class(usize),
    Soft(ArrayView1<'a, f64>),
}

fn validate_soft(target: ArrayView1<f64>, width: usize) -> Result<(), NnError> {
    if target.len() != width {
        return Err(NnError::TargetWidthMismatch { expected: width, got: target.len() });
    }
    let sum = target.sum();
    let min = target.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(sum.is_finite() && (sum - 1.0).abs() <= SIMPLEX_TOL && min >= -SIMPLEX_TOL) {
        return Err(NnError::NotASoftLabel { sum, min });
    }
    Ok(())
}

/// Loss value for one example. See [`loss_with_grad`] for the math.
pub fn loss(kind: Loss, logits: ArrayView1<f64>, target: Target) -> Result<f64, NnError> {
    loss_with_grad(kind, logits, target).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
///
/// * cross-entropy: `-ln p_y`, gradient `p - onehot(y)`.
/// * distill MAE: mean over classes of `|t - p|`, pushed through the
///   softmax Jacobian.
/// * distill KL: `sum_j t_j (ln t_j - ln p_j)` with the 0 ln 0 = 0
///   convention, gradient `p * sum(t) - t`.
pub fn loss_with_grad(
    kind: Loss,
    logits: ArrayView1<f64>,
    target: Target,
) -> Result<(f64, Array1<f64>), NnError> {
    let p = softmax(logits);
    let m = p.len();
    match (kind, target) {
        (Loss::CrossEntropy, Target::Class(y)) => {
            if y >= m {
                return Err(NnError::ClassOutOfRange { class: y, classes: m });
            }
            let l = -p[y].max(PROB_FLOOR).ln();
            let mut g = p;
            g[y] -= 1.0;
            Ok((l, g))
        }
        (Loss::DistillMae, Target::Soft(t)) => {
            validate_soft(t, m)?;
            let l = t
                .iter()
                .zip(p.iter())
                .map(|(&ti, &pi)| (ti - pi).abs())
                .sum::<f64>()
                / m as f64;
            // dL/dp_j, then the softmax Jacobian:
            // dL/dz_i = p_i (g_i - sum_j p_j g_j).
            let g_p: Array1<f64> = t
                .iter()
                .zip(p.iter())
                .map(|(&ti, &pi)| -sign(ti - pi) / m as f64)
                .collect();
            let dot = p.iter().zip(g_p.iter()).map(|(&pi, &gi)| pi * gi).sum::<f64>();
            let g = Array1::from_iter(p.iter().zip(g_p.iter()).map(|(&pi, &gi)| pi * (gi - dot)));
            Ok((l, g))
        }
        (Loss::DistillKl, Target::Soft(t)) => {
            validate_soft(t, m)?;
            let l = t
                .iter()
                .zip(p.iter())
                .map(|(&ti, &pi)| {
                    if ti > 0.0 {
                        ti * (ti.max(PROB_FLOOR).ln() - pi.max(PROB_FLOOR).ln())
                    } else {
                        0.0
                    }
                })
                .sum::<f64>();
            let t_sum = t.sum();
            let g = Array1::from_iter(p.iter().zip(t.iter()).map(|(&pi, &ti)| pi * t_sum - ti));
            Ok((l, g))
        }
        (Loss::CrossEntropy, Target::Soft(_)) => {
            Err(NnError::TargetKindMismatch { loss: kind, required: "class-index" })
        }
        (_, Target::Class(_)) => {
            Err(NnError::TargetKindMismatch { loss: kind, required: "soft-label" })
        }
    }
}

/// Gradients in the same shape as the model they came from.
#[derive(Clone, Debug)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(params: &ModelParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| Layer { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.raw_dim()) })
            .collect();
        Self { layers }
    }

    /// L2 norm over every coordinate of every layer, the quantity DP-SGD
    /// clips.
    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.iter().map(|v| v * v).sum::<f64>() + l.b.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.scaled_add(s, &b.w);
            a.b.scaled_add(s, &b.b);
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

/// Backpropagation through the cached forward pass. `d_logits` rows are
/// per-example gradients; the result is their sum over the batch.
fn backward_batch(params: &ModelParams, acts: &[Array2<f64>], d_logits: Array2<f64>) -> Gradients {
    let mut grads = Gradients::zeros_like(params);
    let mut delta = d_logits;
    for l in (0..params.layers.len()).rev() {
        let a_prev = &acts[l];
        grads.layers[l].w = a_prev.t().dot(&delta);
        grads.layers[l].b = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut da = delta.dot(&params.layers[l].w.t());
            // Derivative from the post-activation value: relu' is 1 where
            // the output is positive, tanh' is 1 - a^2.
            match params.activation {
                Activation::Relu => da.zip_mut_with(a_prev, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }),
                Activation::Tanh => da.zip_mut_with(a_prev, |d, &a| *d *= 1.0 - a * a),
            }
            delta = da;
        }
    }
    grads
}

/// Loss and full parameter gradient for a single example. Exposed so the
/// gradient can be checked against finite differences from outside.
pub fn loss_gradients(
    params: &ModelParams,
    x: ArrayView1<f64>,
    target: Target,
    kind: Loss,
) -> Result<(f64, Gradients), NnError> {
    let batch = x.insert_axis(Axis(0));
    let (acts, logits) = params.forward_cached(batch)?;
    let (l, g) = loss_with_grad(kind, logits.row(0), target)?;
    let d_logits = g.insert_axis(Axis(0)).to_owned();
    Ok((l, backward_batch(params, &acts, d_logits)))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Targets for a whole batch, parallel to the feature rows.
#[derive(Clone, Copy, Debug)]
pub enum BatchTargets<'a> {
    Classes(&'a [usize]),
    Soft(ArrayView2<'a, f64>),
}

impl BatchTargets<'_> {
    fn len(&self) -> usize {
        match self {
            BatchTargets::Classes(ys) => ys.len(),
            BatchTargets::Soft(t) => t.nrows(),
        }
    }

    fn one(&self, i: usize) -> Target<'_> {
        match self {
            BatchTargets::Classes(ys) => Target::Class(ys[i]),
            BatchTargets::Soft(t) => Target::Soft(t.row(i)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Noise multiplier; the Gaussian added to the clipped batch sum has
    /// standard deviation `sigma * clip` per coordinate.
    pub sigma: f64,
    /// Per-example gradient L2 bound. May be infinite only when sigma is 0.
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub loss: Loss,
    pub seed: u64,
    pub dp: Option<DpConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(NnError::BadLearningRate(self.lr));
        }
        if self.batch_size == 0 {
            return Err(NnError::ZeroBatch);
        }
        if let Some(dp) = self.dp {
            if !(dp.clip > 0.0) {
                return Err(NnError::BadClip(dp.clip));
            }
            if !(dp.sigma >= 0.0 && dp.sigma.is_finite()) {
                return Err(NnError::BadSigma(dp.sigma));
            }
            if dp.sigma > 0.0 && dp.clip.is_infinite() {
                return Err(NnError::NoiseNeedsFiniteClip);
            }
        }
        Ok(())
    }

    /// `sigma = 0` with an infinite clip neither clips nor adds noise, so it
    /// is plain SGD and is treated as such.
    fn effective_dp(&self) -> Option<DpConfig> {
        match self.dp {
            Some(dp) if dp.sigma == 0.0 && dp.clip.is_infinite() => None,
            other => other,
        }
    }
}

/// Mini-batch SGD with persistent shuffle and noise streams, so consecutive
/// epochs see fresh batch orders while staying replayable from the config
/// seed.
pub struct Trainer {
    cfg: TrainConfig,
    shuffle: StreamRng,
    noise: StreamRng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            shuffle: StreamRng::new(cfg.seed, streams::TRAIN_SHUFFLE),
            noise: StreamRng::new(cfg.seed, streams::DP_NOISE),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One pass over the data in shuffled mini-batches; returns the mean
    /// per-example loss. Aborts on non-finite outputs, before the update
    /// that would have corrupted the model.
    pub fn epoch(
        &mut self,
        params: &mut ModelParams,
        x: ArrayView2<f64>,
        targets: BatchTargets,
    ) -> Result<f64, TrainError> {
        let n = x.nrows();
        if n == 0 {
            return Err(NnError::EmptyTrainingSet.into());
        }
        if targets.len() != n {
            return Err(NnError::TargetCountMismatch { examples: n, targets: targets.len() }.into());
        }
        let mut order: Vec<usize> = (0..n).collect();
        self.shuffle.shuffle(&mut order);

        let dp = self.cfg.effective_dp();
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let xb = gather_rows(&x, chunk);
            let batch_loss = match dp {
                None => self.plain_step(params, &xb, &targets, chunk)?,
                Some(dp) => self.dp_step(params, &xb, &targets, chunk, dp)?,
            };
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { batch: batch_idx });
            }
            loss_sum += batch_loss;
        }
        Ok(loss_sum / n as f64)
    }

    /// Batched path: one forward/backward over the whole mini-batch.
    /// Returns the summed loss.
    fn plain_step(
        &mut self,
        params: &mut ModelParams,
        xb: &Array2<f64>,
        targets: &BatchTargets,
        chunk: &[usize],
    ) -> Result<f64, TrainError> {
        let b = chunk.len();
        let (acts, logits) = params.forward_cached(xb.view())?;
        if logits.iter().any(|v| !v.is_finite()) {
            // Reported as a non-finite loss by the caller.
            return Ok(f64::NAN);
        }
        let mut d_logits = Array2::zeros(logits.raw_dim());
        let mut loss_sum = 0.0;
        for (row, &i) in chunk.iter().enumerate() {
            let (l, g) = loss_with_grad(self.cfg.loss, logits.row(row), targets.one(i))?;
            loss_sum += l;
            d_logits.row_mut(row).assign(&g);
        }
        let mut grads = backward_batch(params, &acts, d_logits);
        grads.scale(1.0 / b as f64);
        apply_step(params, &grads, self.cfg.lr);
        Ok(loss_sum)
    }

    /// Per-example path: clip each example's gradient to `clip`, noise the
    /// sum with std `sigma * clip`, then average. Returns the summed raw
    /// (pre-clip) loss.
    fn dp_step(
        &mut self,
        params: &mut ModelParams,
        xb: &Array2<f64>,
        targets: &BatchTargets,
        chunk: &[usize],
        dp: DpConfig,
    ) -> Result<f64, TrainError> {
        let b = chunk.len();
        let mut acc = Gradients::zeros_like(params);
        let mut loss_sum = 0.0;
        for (row, &i) in chunk.iter().enumerate() {
            let (l, g) = loss_gradients(params, xb.row(row), targets.one(i), self.cfg.loss)?;
            loss_sum += l;
            let norm = g.l2_norm();
            let scale = if norm > dp.clip { dp.clip / norm } else { 1.0 };
            acc.add_scaled(&g, scale);
        }
        if dp.sigma > 0.0 {
            let std = dp.sigma * dp.clip;
            for layer in &mut acc.layers {
                layer.w.mapv_inplace(|v| v + std * self.noise.normal());
                layer.b.mapv_inplace(|v| v + std * self.noise.normal());
            }
        }
        acc.scale(1.0 / b as f64);
        apply_step(params, &acc, self.cfg.lr);
        Ok(loss_sum)
    }
}

fn apply_step(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    for (p, g) in params.layers.iter_mut().zip(grads.layers.iter()) {
        p.w.scaled_add(-lr, &g.w);
        p.b.scaled_add(-lr, &g.b);
    }
}

fn gather_rows(x: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Mean loss of a model over a labeled or soft-labeled set, no updates.
pub fn mean_loss(
    params: &ModelParams,
    x: ArrayView2<f64>,
    targets: BatchTargets,
    kind: Loss,
) -> Result<f64, NnError> {
    let n = x.nrows();
    if n == 0 {
        return Err(NnError::EmptyTrainingSet);
    }
    if targets.len() != n {
        return Err(NnError::TargetCountMismatch { examples: n, targets: targets.len() });
    }
    let logits = params.forward_batch(x)?;
    let mut sum = 0.0;
    for i in 0..n {
        sum += loss(kind, logits.row(i), targets.one(i))?;
    }
    Ok(sum / n as f64)
}
