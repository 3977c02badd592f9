//! Huber-loss training with Adam, and displacement-error evaluation.

use crate::dataset::{stack_future, Sample};
use crate::model::{Model, ModelConfig, ModelError, ModelInput, ModelKind};
use crate::nn::Parameterized;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Prediction step of the 4 s horizon at 0.4 s ticks.
pub const FDE_4S_STEP: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("step {k} is outside 1..={n}")]
    IndexOutOfRange { k: usize, n: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: {what}")]
    DivergenceDetected { epoch: usize, batch: usize, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub huber_r: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-ADE improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Stop as soon as validation ADE drops below this many meters.
    #[serde(default)]
    pub target_val_ade: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.003, huber_r: 3.0, batch_size: 64, max_epochs: 100, patience: 10, seed: 0, target_val_ade: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.huber_r > 0.0 && self.huber_r.is_finite()) {
            return bad("huber_r must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be at least 1");
        }
        Ok(())
    }
}

fn check_shapes<T>(pred: &ArrayView2<T>, gt: &ArrayView2<T>) -> Result<(), TrainError> {
    if pred.shape() != gt.shape() || pred.ncols() != 2 {
        return Err(TrainError::ShapeMismatch { pred: pred.shape().to_vec(), gt: gt.shape().to_vec() });
    }
    Ok(())
}

fn huber_term<T: Scalar>(e: T, r: T) -> T {
    if e < r {
        e * e / (r + r)
    } else {
        e - r
    }
}

/// Sum over steps of the piecewise loss on per-step Euclidean errors.
pub fn huber_loss<T: Scalar>(pred: &ArrayView2<T>, gt: &ArrayView2<T>, r: T) -> Result<T, TrainError> {
    check_shapes(pred, gt)?;
    if !(r > T::zero()) {
        return Err(TrainError::InvalidConfig("huber r must be positive".into()));
    }
    Ok(pred.outer_iter().zip(gt.outer_iter()).map(|(p, g)| huber_term((p[0] - g[0]).hypot(p[1] - g[1]), r)).sum())
}

/// Gradient of [`huber_loss`] with respect to `pred`.
pub fn huber_grad<T: Scalar>(pred: &ArrayView2<T>, gt: &ArrayView2<T>, r: T) -> Result<Array2<T>, TrainError> {
    check_shapes(pred, gt)?;
    let mut g = Array2::zeros(pred.raw_dim());
    for ((p, t), mut o) in pred.outer_iter().zip(gt.outer_iter()).zip(g.outer_iter_mut()) {
        let (dx, dy) = (p[0] - t[0], p[1] - t[1]);
        let e = dx.hypot(dy);
        let scale = if e < r {
            T::one() / r
        } else if e > T::zero() {
            T::one() / e
        } else {
            T::zero()
        };
        o[0] = dx * scale;
        o[1] = dy * scale;
    }
    Ok(g)
}

/// Mean per-sample loss of a batch and its gradient with respect to the predictions.
pub fn batch_loss<T: Scalar>(pred: &ArrayView3<T>, gt: &ArrayView3<T>, r: T) -> Result<(T, Array3<T>), TrainError> {
    if pred.shape() != gt.shape() {
        return Err(TrainError::ShapeMismatch { pred: pred.shape().to_vec(), gt: gt.shape().to_vec() });
    }
    let b = T::of(pred.dim().0.max(1) as f64);
    let mut grad = Array3::zeros(pred.raw_dim());
    let mut loss = T::zero();
    for i in 0..pred.dim().0 {
        let (p, g) = (pred.index_axis(Axis(0), i), gt.index_axis(Axis(0), i));
        loss += huber_loss(&p, &g, r)?;
        grad.index_axis_mut(Axis(0), i).assign(&(huber_grad(&p, &g, r)? / b));
    }
    Ok((loss / b, grad))
}

/// Euclidean error at 1-based step `k`.
pub fn displacement_error<T: Scalar>(pred: &ArrayView2<T>, gt: &ArrayView2<T>, k: usize) -> Result<f64, TrainError> {
    check_shapes(pred, gt)?;
    let n = pred.nrows();
    if k == 0 || k > n {
        return Err(TrainError::IndexOutOfRange { k, n });
    }
    let (p, g) = (pred.row(k - 1), gt.row(k - 1));
    Ok((p[0] - g[0]).to_f64_lossy().hypot((p[1] - g[1]).to_f64_lossy()))
}

/// Adam without weight decay or schedule.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<P: Parameterized<T>>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.params();
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| ArrayD::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (((_, mut p), (_, g)), (m, v)) in params.params_mut().into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ade: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights from the epoch with the lowest validation ADE.
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_ade: f64,
}


fn to_scalar<T: Scalar>(a: &Array3<f32>) -> Array3<T> {
    a.mapv(|v| T::of(v as f64))
}

/// Mean loss and ADE of `model` over `samples`.
fn validate_model<T: Scalar>(model: &Model<T>, samples: &[&Sample], r: T, batch: usize) -> Result<(f64, f64), TrainError> {
    let (mut loss, mut err) = (0.0, 0.0);
    for chunk in samples.chunks(batch) {
        let pred = model.forward(&ModelInput::from_samples(chunk))?;
        let gt = to_scalar::<T>(&stack_future(chunk));
        loss += batch_loss(&pred.view(), &gt.view(), r)?.0.to_f64_lossy() * chunk.len() as f64;
        err += errors_matrix(&pred.view(), &gt.view())?.sum();
    }
    let n = samples.len() as f64;
    let steps = samples.first().map_or(1, |s| s.n()) as f64;
    Ok((loss / n, err / (n * steps)))
}

/// Mini-batch training of a freshly initialised model.
pub fn train<T: Scalar>(
    train_set: &[&Sample],
    val_set: &[&Sample],
    kind: ModelKind,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    let model = Model::init(kind, model_cfg, cfg.seed)?;
    train_from(model, train_set, val_set, cfg)
}

/// Like [`train`] but starting from the given weights.
pub fn train_from<T: Scalar>(
    mut model: Model<T>,
    train_set: &[&Sample],
    val_set: &[&Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let r = T::of(cfg.huber_r);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut grads = model.zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let (pred, cache) = model.forward_train(&ModelInput::from_samples(&batch))?;
            let gt = to_scalar::<T>(&stack_future(&batch));
            let (loss, dpred) = batch_loss(&pred.view(), &gt.view(), r)?;
            let diverged = |what: &str| TrainError::DivergenceDetected { epoch, batch: b, what: what.into() };
            if !loss.is_finite() {
                return Err(diverged("non-finite loss"));
            }
            grads.zero_();
            model.backward(&cache, &dpred, &mut grads);
            opt.step(&mut model, &grads);
            if model.params().iter().any(|(_, p)| p.iter().any(|v| !v.is_finite())) {
                return Err(diverged("non-finite weights"));
            }
            total += loss.to_f64_lossy() * batch.len() as f64;
        }
        let (val_loss, val_ade) = validate_model(&model, val_set, r, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainError::DivergenceDetected { epoch, batch: 0, what: "non-finite validation loss".into() });
        }
        log.push(EpochLog { epoch, train_loss: total / train_set.len() as f64, val_loss, val_ade });
        if val_ade < best.0 {
            best = (val_ade, epoch, model.clone());
        }
        if cfg.target_val_ade.is_some_and(|t| val_ade < t) || epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome { model: best.2, log, best_epoch: best.1, best_val_ade: best.0 })
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Anything that maps samples to `N x n x 2` ego-frame predictions in meters.
pub trait Predictor {
    fn predict(&self, samples: &[&Sample]) -> Result<Array3<f64>, TrainError>;
}

impl<T: Scalar> Predictor for Model<T> {
    fn predict(&self, samples: &[&Sample]) -> Result<Array3<f64>, TrainError> {
        let n = self.config().n;
        let mut out = Array3::zeros((samples.len(), n, 2));
        for (b, chunk) in samples.chunks(64).enumerate() {
            let pred = self.forward(&ModelInput::from_samples(chunk))?;
            out.slice_mut(ndarray::s![b * 64..b * 64 + chunk.len(), .., ..]).assign(&pred.mapv(T::to_f64_lossy));
        }
        Ok(out)
    }
}

/// Returns the ground truth; useful as a perfect-oracle stub.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruth;

impl Predictor for GroundTruth {
    fn predict(&self, samples: &[&Sample]) -> Result<Array3<f64>, TrainError> {
        Ok(stack_future(samples).mapv(f64::from))
    }
}

/// Extrapolates the last history displacement at constant velocity.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantVelocity;

pub fn constant_velocity(history: &ArrayView2<f32>, n: usize) -> Array2<f64> {
    let m = history.nrows();
    let last = [history[[m - 1, 0]] as f64, history[[m - 1, 1]] as f64];
    let v = if m >= 2 { [last[0] - history[[m - 2, 0]] as f64, last[1] - history[[m - 2, 1]] as f64] } else { [0.0, 0.0] };
    Array2::from_shape_fn((n, 2), |(k, c)| last[c] + v[c] * (k + 1) as f64)
}

impl Predictor for ConstantVelocity {
    fn predict(&self, samples: &[&Sample]) -> Result<Array3<f64>, TrainError> {
        let n = samples.first().map_or(0, |s| s.n());
        let mut out = Array3::zeros((samples.len(), n, 2));
        for (i, s) in samples.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&constant_velocity(&s.history_positions.view(), n));
        }
        Ok(out)
    }
}

/// Per-sample, per-step Euclidean errors (`N x n`).
pub fn errors_matrix<T: Scalar>(pred: &ArrayView3<T>, gt: &ArrayView3<T>) -> Result<Array2<f64>, TrainError> {
    if pred.shape() != gt.shape() || pred.dim().2 != 2 {
        return Err(TrainError::ShapeMismatch { pred: pred.shape().to_vec(), gt: gt.shape().to_vec() });
    }
    let (n, steps, _) = pred.dim();
    Ok(Array2::from_shape_fn((n, steps), |(i, k)| {
        (pred[[i, k, 0]] - gt[[i, k, 0]]).to_f64_lossy().hypot((pred[[i, k, 1]] - gt[[i, k, 1]]).to_f64_lossy())
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub ade_6s: f64,
    pub fde_4s: f64,
    pub fde_4s_std: f64,
    pub fde_6s: f64,
    pub fde_6s_std: f64,
    pub per_step_errors: Vec<f64>,
}

fn mean_std(col: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = col.clone().count().max(1) as f64;
    let mean = col.clone().sum::<f64>() / n;
    let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    /// Summarises an `N x n` error matrix. The 4 s horizon is step 10, or the last step when `n < 10`.
    pub fn from_errors(errors: &Array2<f64>) -> EvalReport {
        let (samples, n) = errors.dim();
        let per_step_errors: Vec<f64> = (0..n).map(|k| mean_std(errors.column(k).iter().copied()).0).collect();
        let ade_6s = if samples * n == 0 { 0.0 } else { errors.sum() / (samples * n) as f64 };
        let k4 = FDE_4S_STEP.min(n).max(1) - 1;
        let (fde_4s, fde_4s_std) = if n == 0 { (0.0, 0.0) } else { mean_std(errors.column(k4).iter().copied()) };
        let (fde_6s, fde_6s_std) = if n == 0 { (0.0, 0.0) } else { mean_std(errors.column(n - 1).iter().copied()) };
        EvalReport { ade_6s, fde_4s, fde_4s_std, fde_6s, fde_6s_std, per_step_errors }
    }

    pub fn to_json(&self) -> Result<String, TrainError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate(predictor: &dyn Predictor, samples: &[&Sample]) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let pred = predictor.predict(samples)?;
    let gt = stack_future(samples).mapv(f64::from);
    Ok(EvalReport::from_errors(&errors_matrix(&pred.view(), &gt.view())?))
}
