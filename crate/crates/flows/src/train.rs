use crate::standardize::Standardizer;
use crate::{bnaf::BnafModel, spline_flow::Context, spline_flow::SplineFlowModel};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rnpe_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Maximum-likelihood fitting schedule. Defaults are the reference
/// configuration; the learning rate differs per flow family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn spline_default(seed: u64) -> Self {
        Self {
            batch_size: 256,
            max_epochs: 50,
            patience: 5,
            validation_fraction: 0.10,
            learning_rate: 5e-4,
            grad_clip: 5.0,
            seed,
        }
    }

    pub fn bnaf_default(seed: u64) -> Self {
        Self {
            learning_rate: 1e-2,
            ..Self::spline_default(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::BadConfig {
                reason: "validation_fraction must lie in (0, 1)".into(),
            });
        }
        if self.patience > self.max_epochs {
            return Err(Error::BadConfig {
                reason: "patience must not exceed max_epochs".into(),
            });
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::BadConfig {
                reason: "batch_size and max_epochs must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

/// Per-epoch negative log-likelihoods (raw data space).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_nll,val_nll\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_nll, e.val_nll));
        }
        out
    }
}

/// A density model that can be fitted by the shared trainer.
pub trait Trainable {
    fn point_dim(&self) -> usize;
    fn context_dim(&self) -> Option<usize>;
    fn param_values(&self) -> Vec<f64>;
    fn set_param_values(&mut self, values: &[f64]);
    fn install_standardizers(&mut self, input: Standardizer, context: Option<Standardizer>);
    /// Mean NLL of a standardized batch as a tape scalar.
    fn batch_nll_tape(
        &self,
        tape: &mut Tape,
        params_var: Var,
        points_std: &Tensor,
        context_std: Option<&Tensor>,
    ) -> Result<Var>;
    /// Mean NLL of standardized rows, forward only.
    fn batch_nll(&self, points_std: &[f64], context_std: Option<&[f64]>) -> Result<f64>;
    /// Raw-space correction so curves report NLL of the actual data.
    fn standardizer_correction(&self) -> f64;
}

impl Trainable for SplineFlowModel {
    fn point_dim(&self) -> usize {
        self.spec.dim
    }

    fn context_dim(&self) -> Option<usize> {
        Some(self.spec.context_dim)
    }

    fn param_values(&self) -> Vec<f64> {
        self.params.data().to_vec()
    }

    fn set_param_values(&mut self, values: &[f64]) {
        self.params.set_from(values);
    }

    fn install_standardizers(&mut self, input: Standardizer, context: Option<Standardizer>) {
        self.input_standardizer = input;
        self.context_standardizer = context.expect("conditional flow requires a context");
    }

    fn batch_nll_tape(
        &self,
        tape: &mut Tape,
        params_var: Var,
        points_std: &Tensor,
        context_std: Option<&Tensor>,
    ) -> Result<Var> {
        let ctx = context_std.ok_or(Error::ContextRequired)?;
        self.tape_nll(tape, params_var, points_std, ctx)
    }

    fn batch_nll(&self, points_std: &[f64], context_std: Option<&[f64]>) -> Result<f64> {
        let ctx = context_std.ok_or(Error::ContextRequired)?;
        // Temporarily treat inputs as already standardized.
        let bare = SplineFlowModel {
            spec: self.spec.clone(),
            params: self.params.clone(),
            input_standardizer: Standardizer::identity(self.spec.dim),
            context_standardizer: Standardizer::identity(self.spec.context_dim),
        };
        let lp = bare.log_prob_batch(points_std, Context::PerRow(ctx))?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    fn standardizer_correction(&self) -> f64 {
        self.input_standardizer.log_det_correction()
    }
}

impl Trainable for BnafModel {
    fn point_dim(&self) -> usize {
        self.spec.dim
    }

    fn context_dim(&self) -> Option<usize> {
        None
    }

    fn param_values(&self) -> Vec<f64> {
        self.params.data().to_vec()
    }

    fn set_param_values(&mut self, values: &[f64]) {
        self.params.set_from(values);
    }

    fn install_standardizers(&mut self, input: Standardizer, _context: Option<Standardizer>) {
        self.standardizer = input;
    }

    fn batch_nll_tape(
        &self,
        tape: &mut Tape,
        params_var: Var,
        points_std: &Tensor,
        _context_std: Option<&Tensor>,
    ) -> Result<Var> {
        self.tape_nll(tape, params_var, points_std)
    }

    fn batch_nll(&self, points_std: &[f64], _context_std: Option<&[f64]>) -> Result<f64> {
        let ev = {
            let mut m = self.clone();
            m.standardizer = Standardizer::identity(self.spec.dim);
            m.evaluator()
        };
        let lp = ev.log_prob_batch(points_std)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    fn standardizer_correction(&self) -> f64 {
        self.standardizer.log_det_correction()
    }
}

/// Compare the training-loss gradient against central finite differences
/// at the model's current parameters. Inputs are taken as standardized.
pub fn finite_diff_nll_check<M: Trainable>(
    model: &M,
    points_std: &[f64],
    context_std: Option<&[f64]>,
    step: f64,
) -> Result<f64> {
    let dim = model.point_dim();
    let n = points_std.len() / dim;
    let points = Tensor::matrix(n, dim, points_std.to_vec()).map_err(Error::Autodiff)?;
    let ctx_tensor = match (model.context_dim(), context_std) {
        (Some(cd), Some(c)) => Some(Tensor::matrix(n, cd, c.to_vec()).map_err(Error::Autodiff)?),
        _ => None,
    };
    let at = Tensor::vector(model.param_values());
    let err = rnpe_autodiff::finite_difference_check(
        |tape, pvar| {
            model
                .batch_nll_tape(tape, pvar, &points, ctx_tensor.as_ref())
                .map_err(|e| match e {
                    Error::Autodiff(a) => a,
                    other => panic!("non-numeric failure in gradient check: {other}"),
                })
        },
        &at,
        step,
    )
    .map_err(Error::Autodiff)?;
    Ok(err)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

fn gather_rows(data: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
    }
    out
}

/// Fit a flow by stochastic gradient descent on the negative log-likelihood.
///
/// Standardizers are fitted on the training split and installed into the
/// model; the validation split follows the same transform. The parameters
/// returned are those of the epoch with the best validation NLL (the
/// initial parameters count as epoch zero). Training stops once `patience`
/// consecutive epochs bring no strict improvement.
pub fn fit_density_estimator<M: Trainable>(
    model: &mut M,
    data: &[f64],
    context: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<TrainingCurve> {
    cfg.validate()?;
    let dim = model.point_dim();
    if data.is_empty() || data.len() % dim != 0 {
        return Err(Error::EmptyData);
    }
    let n = data.len() / dim;
    let ctx_dim = model.context_dim();
    if let (Some(cd), Some(ctx)) = (ctx_dim, context) {
        if ctx.len() != n * cd {
            return Err(Error::DimensionMismatch {
                what: "context rows",
                expected: n * cd,
                got: ctx.len(),
            });
        }
    }
    if ctx_dim.is_some() && context.is_none() {
        return Err(Error::ContextRequired);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * cfg.validation_fraction).floor().max(1.0) as usize;
    if n_val >= n {
        return Err(Error::EmptyData);
    }
    let (train_idx, val_idx) = order.split_at(n - n_val);

    let train_points_raw = gather_rows(data, dim, train_idx);
    let input_std = Standardizer::fit(&train_points_raw, dim)?;
    let mut train_points = train_points_raw;
    input_std.apply_rows(&mut train_points);
    let mut val_points = gather_rows(data, dim, val_idx);
    input_std.apply_rows(&mut val_points);

    let (train_ctx, val_ctx, ctx_std) = if let (Some(cd), Some(ctx)) = (ctx_dim, context) {
        let train_ctx_raw = gather_rows(ctx, cd, train_idx);
        let cstd = Standardizer::fit(&train_ctx_raw, cd)?;
        let mut tc = train_ctx_raw;
        cstd.apply_rows(&mut tc);
        let mut vc = gather_rows(ctx, cd, val_idx);
        cstd.apply_rows(&mut vc);
        (Some(tc), Some(vc), Some(cstd))
    } else {
        (None, None, None)
    };
    model.install_standardizers(input_std, ctx_std);

    let correction = model.standardizer_correction();
    let n_train = train_idx.len();
    let mut params = model.param_values();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);

    let val_nll = |m: &M| -> Result<f64> {
        Ok(m.batch_nll(&val_points, val_ctx.as_deref())? - correction)
    };

    let mut best_val = val_nll(model)?;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut bad_streak = 0usize;
    let mut curve = TrainingCurve::default();

    let mut batch_order: Vec<usize> = (0..n_train).collect();
    'epochs: for epoch in 1..=cfg.max_epochs {
        batch_order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in batch_order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let points = Tensor::matrix(b, dim, gather_rows(&train_points, dim, chunk))?;
            let ctx_tensor = match (&train_ctx, ctx_dim) {
                (Some(tc), Some(cd)) => Some(Tensor::matrix(b, cd, gather_rows(tc, cd, chunk))?),
                _ => None,
            };
            let mut tape = Tape::new();
            let pvar = tape.input(Tensor::vector(params.clone()))?;
            let loss = match model.batch_nll_tape(&mut tape, pvar, &points, ctx_tensor.as_ref()) {
                Ok(v) => v,
                Err(Error::Autodiff(rnpe_autodiff::Error::NonFinite { .. })) => {
                    return Err(Error::NanLoss {
                        epoch,
                        batch: batch_no,
                    });
                }
                Err(e) => return Err(e),
            };
            let loss_value = tape.value(loss).scalar_value().map_err(Error::Autodiff)?;
            if !loss_value.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            let mut grads = tape.backward(loss).map_err(Error::Autodiff)?;
            let shape_like = Tensor::vector(params.clone());
            let mut grad = grads.take(pvar, &shape_like).into_data();
            clip_grad_norm(&mut grad, cfg.grad_clip);
            adam.step(&mut params, &grad);
            model.set_param_values(&params);
            train_loss_sum += loss_value * b as f64;
            seen += b;
        }
        let train_nll = train_loss_sum / seen as f64 - correction;
        let val = val_nll(model)?;
        curve.epochs.push(EpochStats {
            epoch,
            train_nll,
            val_nll: val,
        });
        if val < best_val {
            best_val = val;
            best_params.copy_from_slice(&params);
            best_epoch = epoch;
            bad_streak = 0;
        } else {
            bad_streak += 1;
            if bad_streak >= cfg.patience {
                curve.stopped_early = true;
                break 'epochs;
            }
        }
    }

    model.set_param_values(&best_params);
    curve.best_epoch = best_epoch;
    Ok(curve)
}
