//! MSE training with Adam, best-on-validation selection, and the
//! denormalized evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::autodiff::{Tape, Var};
use crate::data::{MinMaxScaler, WindowSample};
use crate::error::{shape_err, Error, Result};
use crate::model::ApsLstm;
use crate::parallel::{map_ordered, Execution};
use crate::params::{Gradients, ParamStore};

/// Samples whose gradients are held in memory at once during a batch.
const GRAD_CHUNK: usize = 32;

pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return shape_err(format!(
            "prediction {:?} and target {:?} differ",
            tape.shape(pred),
            tape.shape(target)
        ));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = Gradients::zeros_like(params).values;
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.values.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradient buffers for {} parameters",
                grads.values.len(),
                params.len()
            )));
        }
        for (id, g) in grads.values.iter().enumerate() {
            if g.len() != params.get(id).numel() || self.m[id].len() != g.len() {
                return Err(Error::Contract(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    params.name(id),
                    g.len(),
                    params.get(id).numel()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, p) in params.values_mut().enumerate() {
            let (m, v, g) = (&mut self.m[id], &mut self.v[id], &grads.values[id]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 200,
            lr: 0.01,
            seed: 2,
            execution: Execution::available(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss seen during the epoch's updates.
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ApsLstm,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Mean loss and summed gradients of `samples`, each weighted `1 / len`.
/// The reduction runs in sample order, so both execution modes agree bitwise.
pub fn batch_loss_and_grads(model: &ApsLstm, samples: &[&WindowSample], exec: Execution) -> Result<(f64, Gradients)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let w = 1.0 / samples.len() as f64;
    let mut total = Gradients::zeros_like(model.params());
    let mut loss = 0.0;
    for chunk in samples.chunks(GRAD_CHUNK) {
        let parts = map_ordered(chunk, exec, |s| model.loss_and_grads(&s.input, &s.target, w));
        for part in parts {
            let (l, g) = part?;
            loss += l;
            total.add_assign(&g);
        }
    }
    Ok((loss, total))
}

/// Normalized forecasts, one per sample, in input order.
pub fn predict_all(model: &ApsLstm, samples: &[WindowSample], exec: Execution) -> Result<Vec<Vec<f64>>> {
    map_ordered(samples, exec, |s| model.predict(&s.input))
        .into_iter()
        .collect()
}

/// Mean per-sample MSE on normalized values.
pub fn dataset_mse(model: &ApsLstm, samples: &[WindowSample], exec: Execution) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("mse of an empty sample set".into()));
    }
    let preds = predict_all(model, samples, exec)?;
    let total: f64 = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            p.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Seeded-shuffle mini-batch Adam; returns the snapshot with the lowest
/// validation MSE.
pub fn train(model: ApsLstm, train: &[WindowSample], val: &[WindowSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs nonempty train and val sets, got {} / {}",
            train.len(),
            val.len()
        )));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model.params(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut current = model.clone();
    let mut best = model;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut seen = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&WindowSample> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_loss_and_grads(&current, &samples, cfg.execution)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss in epoch {epoch}")));
            }
            seen += loss * batch.len() as f64;
            opt.adam_step(current.params_mut(), &grads)?;
        }
        let val_mse = dataset_mse(&current, val, cfg.execution)?;
        if !val_mse.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss in epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_mse: seen / train.len() as f64,
            val_mse,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best = current.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Ratio, not percent. `None` when every target was masked.
    pub mape: Option<f64>,
    /// Targets below 1 excluded from MAPE.
    pub masked_count: usize,
}

impl HorizonMetrics {
    fn to_json(self) -> Value {
        json!({
            "rmse": self.rmse,
            "mae": self.mae,
            "mape": self.mape,
            "masked_count": self.masked_count,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    /// Unweighted mean over horizons; MAPE over the horizons where it is defined.
    pub average: HorizonMetrics,
}

impl MetricsReport {
    pub fn to_json(&self, config: Option<Value>) -> Value {
        let mut m = Map::new();
        for (h, hm) in self.horizons.iter().enumerate() {
            m.insert(format!("horizon_{}", h + 1), hm.to_json());
        }
        m.insert("average".into(), self.average.to_json());
        if let Some(c) = config {
            m.insert("config".into(), c);
        }
        Value::Object(m)
    }

    /// Rows `T+h  RMSE  MAE  MAPE%` rounded to two decimals.
    pub fn table(&self) -> String {
        let fmt_mape = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{:.2}", v * 100.0));
        let mut out = format!("{:<8}{:>10}{:>10}{:>10}\n", "horizon", "RMSE", "MAE", "MAPE%");
        for (h, hm) in self.horizons.iter().enumerate() {
            out += &format!(
                "{:<8}{:>10.2}{:>10.2}{:>10}\n",
                format!("T+{}", h + 1),
                hm.rmse,
                hm.mae,
                fmt_mape(hm.mape)
            );
        }
        out += &format!(
            "{:<8}{:>10.2}{:>10.2}{:>10}\n",
            "average",
            self.average.rmse,
            self.average.mae,
            fmt_mape(self.average.mape)
        );
        out
    }
}

/// Metrics in original flow units. `pred[i]` and `truth[i]` are the `H`
/// values of sample `i`.
pub fn compute_metrics(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<MetricsReport> {
    if pred.is_empty() || pred.len() != truth.len() {
        return shape_err(format!("{} predictions for {} targets", pred.len(), truth.len()));
    }
    let h_len = truth[0].len();
    if h_len == 0 || pred.iter().chain(truth).any(|v| v.len() != h_len) {
        return shape_err("ragged horizon vectors");
    }
    let n = pred.len() as f64;
    let horizons: Vec<HorizonMetrics> = (0..h_len)
        .map(|h| {
            let mut sq = 0.0;
            let mut abs = 0.0;
            let mut pct = 0.0;
            let mut kept = 0usize;
            for (p, y) in pred.iter().zip(truth) {
                let e = p[h] - y[h];
                sq += e * e;
                abs += e.abs();
                if y[h] >= 1.0 {
                    pct += e.abs() / y[h];
                    kept += 1;
                }
            }
            HorizonMetrics {
                rmse: (sq / n).sqrt(),
                mae: abs / n,
                mape: (kept > 0).then(|| pct / kept as f64),
                masked_count: pred.len() - kept,
            }
        })
        .collect();
    let hn = h_len as f64;
    let defined: Vec<f64> = horizons.iter().filter_map(|m| m.mape).collect();
    let average = HorizonMetrics {
        rmse: horizons.iter().map(|m| m.rmse).sum::<f64>() / hn,
        mae: horizons.iter().map(|m| m.mae).sum::<f64>() / hn,
        mape: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        masked_count: horizons.iter().map(|m| m.masked_count).sum(),
    };
    if horizons.iter().any(|m| !m.rmse.is_finite()) {
        return Err(Error::Numerical("non-finite metric".into()));
    }
    Ok(MetricsReport { horizons, average })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Denormalized forecasts per sample.
    pub predictions: Vec<Vec<f64>>,
    /// Denormalized targets per sample.
    pub truths: Vec<Vec<f64>>,
}

/// Forecasts every sample, maps forecasts and targets back to flow units
/// through column `flow_col` of `scaler`, and scores them.
pub fn evaluate(model: &ApsLstm, samples: &[WindowSample], scaler: &MinMaxScaler, flow_col: usize, exec: Execution) -> Result<Evaluation> {
    let raw = predict_all(model, samples, exec)?;
    let invert = |v: &[f64]| -> Result<Vec<f64>> { v.iter().map(|&x| scaler.invert(x, flow_col)).collect() };
    let predictions = raw.iter().map(|p| invert(p)).collect::<Result<Vec<_>>>()?;
    let truths = samples.iter().map(|s| invert(&s.target)).collect::<Result<Vec<_>>>()?;
    let report = compute_metrics(&predictions, &truths)?;
    Ok(Evaluation {
        report,
        predictions,
        truths,
    })
}
