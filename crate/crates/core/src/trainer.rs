//! Dataset splitting, AdamW training with a cosine schedule, and
//! forecast-quality evaluation.

use std::f64::consts::PI;
use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{best_of_modes, summarize, BestModeRule, ForecastSummary};
use crate::model::{AgentForecast, FusionMode, Model, PreparedScenario};
use crate::nn::Pass;
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenarios per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub cosine: bool,
    pub seed: u64,
    /// Fractions of all scenarios assigned to training and validation; the
    /// remainder is the calibration/test pool.
    pub train_ratio: f64,
    pub val_ratio: f64,
    /// Share of the pool that becomes calibration data (4:1 by default).
    pub cal_share: f64,
    pub epsilon: f64,
    /// Which inputs the model sees while training.
    pub mode: FusionMode,
    pub best_mode_rule: BestModeRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 64,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            dropout: 0.1,
            cosine: true,
            seed: 0,
            train_ratio: 0.6,
            val_ratio: 0.2,
            cal_share: 0.8,
            epsilon: 1.0,
            mode: FusionMode::Fused,
            best_mode_rule: BestModeRule::MinFde,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.train_ratio > 0.0 && self.val_ratio > 0.0) || self.train_ratio + self.val_ratio > 1.0 {
            return bad("train and validation ratios must be positive and sum to at most 1".into());
        }
        if !(self.cal_share > 0.0 && self.cal_share <= 1.0) {
            return bad("cal_share must lie in (0, 1]".into());
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be nonnegative".into());
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.cosine {
            return self.lr;
        }
        self.lr * (1.0 + (PI * epoch as f64 / self.epochs as f64).cos()) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub cal: Vec<T>,
    pub test: Vec<T>,
}

fn split_sizes(n: usize, cfg: &TrainConfig) -> [usize; 4] {
    let n_train = ((cfg.train_ratio * n as f64).round() as usize).min(n);
    let n_val = ((cfg.val_ratio * n as f64).round() as usize).min(n - n_train);
    let pool = n - n_train - n_val;
    let n_cal = (cfg.cal_share * pool as f64).round() as usize;
    [n_train, n_val, n_cal, pool - n_cal]
}

/// Smallest input size for which every split is nonempty.
pub fn min_split_size(cfg: &TrainConfig) -> Option<usize> {
    (1..10_000).find(|&n| split_sizes(n, cfg).iter().all(|&s| s > 0))
}

/// Seeded shuffle followed by train/val/cal/test slicing.
pub fn split<T: Clone>(items: &[T], cfg: &TrainConfig) -> Result<Splits<T>> {
    cfg.validate()?;
    let n = items.len();
    let sizes = split_sizes(n, cfg);
    if sizes.contains(&0) {
        let need = min_split_size(cfg).map_or("more".to_string(), |m| m.to_string());
        return Err(Error::Data(format!(
            "{n} scenarios cannot fill train/val/cal/test; at least {need} are required"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut parts = Vec::with_capacity(4);
    let mut start = 0;
    for s in sizes {
        parts.push(order[start..start + s].iter().map(|&i| items[i].clone()).collect::<Vec<T>>());
        start += s;
    }
    let test = parts.pop().unwrap();
    let cal = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(Splits { train, val, cal, test })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_loss_reg: f64,
    pub val_loss_cls: f64,
    pub val: ForecastSummary,
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,J,J_reg,J_cls,minADE,minFDE,MR,train_J,lr\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.val_loss,
            e.val_loss_reg,
            e.val_loss_cls,
            e.val.min_ade,
            e.val.min_fde,
            e.val.miss_rate,
            e.train_loss,
            e.lr
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation minFDE.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update from the gradients accumulated in the store.
    fn update(&mut self, model: &mut Model, lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (i, p) in model.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                *w -= lr * (update + weight_decay * *w);
            }
        }
    }
}

fn scenario_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Summed loss over `data` in eval mode, normalized by its scored agents.
pub fn dataset_loss(model: &Model, data: &[PreparedScenario], mode: FusionMode, epsilon: f64) -> Result<[f64; 3]> {
    let n: usize = data.iter().map(|p| p.target_rows.len()).sum();
    if n == 0 {
        return Ok([0.0; 3]);
    }
    let parts: Vec<[f64; 3]> = data
        .par_iter()
        .filter(|p| !p.target_rows.is_empty())
        .map(|p| {
            let mut tape = Tape::new(&model.params);
            let (_, l) = model.loss_on(&mut tape, p, mode, epsilon, n, &mut Pass::eval())?;
            Ok([
                tape.value(l.total).item(),
                tape.value(l.reg).item(),
                tape.value(l.cls).item(),
            ])
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().fold([0.0; 3], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]))
}

pub fn forecasts(model: &Model, data: &[PreparedScenario], mode: FusionMode) -> Result<Vec<AgentForecast>> {
    let per: Vec<Vec<AgentForecast>> = data.par_iter().map(|p| model.predict(p, mode)).collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn summarize_forecasts(forecasts: &[AgentForecast], rule: BestModeRule) -> ForecastSummary {
    let errors: Vec<_> = forecasts
        .iter()
        .map(|f| best_of_modes(&f.prediction.trajectories(), &f.future, rule))
        .collect();
    summarize(&errors)
}

/// minADE / minFDE / MR over every scored agent of `data`.
pub fn evaluate(model: &Model, data: &[PreparedScenario], mode: FusionMode, rule: BestModeRule) -> Result<ForecastSummary> {
    Ok(summarize_forecasts(&forecasts(model, data, mode)?, rule))
}

/// One optimizer step's worth of gradients, accumulated into the store.
/// Returns the batch loss.
fn accumulate_batch(
    model: &mut Model,
    batch: &[&PreparedScenario],
    cfg: &TrainConfig,
    epoch: usize,
    first_index: usize,
) -> Result<f64> {
    let n: usize = batch.iter().map(|p| p.target_rows.len()).sum();
    model.params.zero_grad();
    if n == 0 {
        return Ok(0.0);
    }
    let results: Vec<(f64, Vec<Option<Tensor>>)> = {
        let m: &Model = model;
        batch
            .par_iter()
            .enumerate()
            .filter(|(_, p)| !p.target_rows.is_empty())
            .map(|(k, p)| {
                let mut rng = scenario_rng(cfg.seed, epoch, first_index + k);
                let mut pass = Pass {
                    dropout: cfg.dropout,
                    rng: Some(&mut rng),
                };
                let mut tape = Tape::new(&m.params);
                let (_, l) = m.loss_on(&mut tape, p, cfg.mode, cfg.epsilon, n, &mut pass)?;
                let value = tape.value(l.total).item();
                let grads = tape.backward(l.total)?.into_param_grads();
                Ok((value, grads))
            })
            .collect::<Result<_>>()?
    };
    let mut total = 0.0;
    for (value, grads) in &results {
        total += value;
        model.params.accumulate(grads, 1.0);
    }
    Ok(total)
}

/// Trains `model` in place and returns the best-validation snapshot.
pub fn train(mut model: Model, train: &[PreparedScenario], val: &[PreparedScenario], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    for p in train.iter().chain(val) {
        model.check_horizons(p)?;
    }
    let mut opt = AdamW::new(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0d3e);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedScenario> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = accumulate_batch(&mut model, &batch, cfg, epoch, b * cfg.batch_size)?;
            let grads_finite = model.params.iter().all(|(_, p)| p.grad.is_finite());
            if !loss.is_finite() || !grads_finite {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss,
                });
            }
            opt.update(&mut model, lr, cfg.weight_decay);
            epoch_loss += loss;
            batches += 1;
        }
        let [vl, vr, vc] = dataset_loss(&model, val, cfg.mode, cfg.epsilon)?;
        let summary = evaluate(&model, val, cfg.mode, cfg.best_mode_rule)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss: vl,
            val_loss_reg: vr,
            val_loss_cls: vc,
            val: summary,
        };
        info!(
            "epoch {}/{}: lr {:.2e} train J {:.4} val J {:.4} minADE {:.3} minFDE {:.3} MR {:.3}",
            entry.epoch, cfg.epochs, lr, entry.train_loss, vl, summary.min_ade, summary.min_fde, summary.miss_rate
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(f, _, _)| summary.min_fde < *f) {
            best = Some((summary.min_fde, epoch + 1, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, best_epoch, log })
}
