//! Mini-batch training with early stopping on a validation log.

use rand::seq::SliceRandom;

use super::loss::{gradients, loss_value, Gradients, LossKind, Observations, Weighting, Workspace};
use super::optim::AdamW;
use super::TwoTowerModel;
use crate::clicks::{estimate_propensities, SessionLog};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Rows per mini-batch: impressions, or `(document, rank)` cells when
    /// `aggregate` is set.
    pub batch_size: usize,
    /// Train on per-cell click counts instead of single impressions. The
    /// objective is the same; batches just cover more of the log.
    pub aggregate: bool,
    pub loss: LossKind,
    /// Upper bound on inverse-propensity weights.
    pub ips_clip: f64,
    /// Monitor the unweighted NLL for early stopping even when training
    /// with the weighted loss.
    pub early_stop_unweighted: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.003,
            weight_decay: 0.01,
            max_epochs: 50,
            patience: 3,
            batch_size: 1024,
            aggregate: false,
            loss: LossKind::Nll,
            ips_clip: 100.0,
            early_stop_unweighted: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        if self.ips_clip <= 0.0 {
            return Err(Error::Config("ips clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; asks to stop after `patience` epochs
/// without strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopSignal {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopSignal::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

/// Fits `model` on `train_log` with AdamW over shuffled mini-batches and
/// returns the parameters of the epoch with the lowest validation loss. Both
/// logs must come from `ds`. For the weighted loss, propensities are counted
/// from each log separately.
pub fn train(
    mut model: TwoTowerModel,
    ds: &Dataset,
    train_log: &SessionLog,
    valid_log: &SessionLog,
    cfg: &TrainConfig,
) -> Result<(TwoTowerModel, TrainTrace)> {
    cfg.validate()?;
    if train_log.is_empty() || valid_log.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs non-empty logs".into(),
        ));
    }
    model.check_compatible(ds)?;
    if train_log.max_rank > model.max_rank() || valid_log.max_rank > model.max_rank() {
        return Err(Error::InvalidArgument(format!(
            "log ranks exceed the model's {} bias logits",
            model.max_rank()
        )));
    }
    let features = ds.feature_matrix();

    let train_props;
    let valid_props;
    let (train_w, valid_w) = match cfg.loss {
        LossKind::Nll => (Weighting::Uniform, Weighting::Uniform),
        LossKind::IpsNll => {
            train_props = estimate_propensities(train_log)?;
            valid_props = estimate_propensities(valid_log)?;
            let valid = if cfg.early_stop_unweighted {
                Weighting::Uniform
            } else {
                Weighting::Ips {
                    propensities: &valid_props,
                    clip: cfg.ips_clip,
                }
            };
            (
                Weighting::Ips {
                    propensities: &train_props,
                    clip: cfg.ips_clip,
                },
                valid,
            )
        }
    };
    let train_obs = if cfg.aggregate {
        Observations::cells(train_log, train_w)?
    } else {
        Observations::impressions(train_log, train_w)?
    };
    let valid_obs = Observations::cells(valid_log, valid_w)?;

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut grads = Gradients::zeros_like(&model);
    let mut ws = Workspace::new(ds.n_docs());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut trace = TrainTrace {
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train_obs.len()).collect();
    let shuffle = StreamKey::new(cfg.seed).with(domain::SHUFFLE);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle.with(epoch as u64).rng());
        let mut total = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let loss = gradients(&model, &train_obs, rows, &features, &mut ws, &mut grads);
            if !loss.is_finite() || grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            total += loss
                * rows
                    .iter()
                    .map(|&i| f64::from(train_obs.shown[i]))
                    .sum::<f64>();
            opt.step(model.tensors_mut(), &grads.tensors);
        }
        let train_loss = total / train_obs.n_impressions() as f64;
        let valid_loss = loss_value(&model, &valid_obs, &features);
        if !valid_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        });
        match stopper.observe(epoch, valid_loss) {
            StopSignal::Improved => best = model.clone(),
            StopSignal::Continue => {}
            StopSignal::Stop => {
                trace.stopped_early = true;
                break;
            }
        }
    }
    trace.best_epoch = stopper.best_epoch();
    trace.best_valid_loss = stopper.best_loss();
    Ok((best, trace))
}
