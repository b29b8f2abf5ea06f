//! Logging policies.
//!
//! A policy is a frozen score per query-document pair plus an exploration
//! probability `tau`. Scores come from a pointwise regressor trained on the
//! ground-truth labels, or straight from the labels (the expert policy), and
//! are blended with uniform noise according to the strength `alpha`. Each
//! session shows either the score-sorted ranking or, with probability `tau`,
//! a uniformly shuffled one.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, LabelTable, ScoreTable};
use crate::error::{Error, Result};
use crate::model::{AdamW, RelevanceTower, Tensor, TowerKind, TwoTowerModel};
use crate::rng::{domain, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Trained,
    Expert,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Trained => "trained",
            PolicyKind::Expert => "expert",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(PolicyKind::Trained),
            "expert" => Ok(PolicyKind::Expert),
            other => Err(Error::InvalidArgument(format!("unknown policy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTrainConfig {
    pub tower: TowerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            tower: TowerKind::Mlp,
            learning_rate: 0.003,
            weight_decay: 0.0,
            epochs: 400,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// A relevance tower regressed onto ground-truth labels.
#[derive(Clone, Debug)]
pub struct PointwisePolicy {
    pub tower: RelevanceTower,
    pub train_mse: f64,
}

impl PointwisePolicy {
    /// Predicted relevance for every document of `ds` (any split).
    pub fn scores(&self, ds: &Dataset) -> Result<ScoreTable> {
        let model = TwoTowerModel {
            bias: crate::model::BiasTower::zeros(1),
            relevance: self.tower.clone(),
        };
        model.relevance_scores(ds)
    }
}

fn mse_pass(
    tower: &RelevanceTower,
    feats: &Array2<f64>,
    targets: &[f64],
    batch: &[usize],
    grads: Option<&mut [Vec<f64>]>,
) -> f64 {
    let (pred, cache) = tower.forward(batch, feats);
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut d_out = Vec::with_capacity(batch.len());
    for (&i, p) in batch.iter().zip(&pred) {
        let e = p - targets[i];
        loss += e * e;
        d_out.push(2.0 * e / n);
    }
    if let Some(g) = grads {
        tower.backward(&cache, batch, feats, &d_out, g);
    }
    loss / n
}

/// Fits a linear or MLP tower to `labels` by squared error on the full
/// training split with AdamW over shuffled mini-batches of documents.
pub fn train_pointwise_policy(
    train: &Dataset,
    labels: &LabelTable,
    cfg: &PolicyTrainConfig,
) -> Result<PointwisePolicy> {
    labels.check_aligned(train)?;
    if cfg.batch_size == 0 || cfg.learning_rate < 0.0 {
        return Err(Error::InvalidArgument("bad policy training config".into()));
    }
    let mut tower = match cfg.tower {
        TowerKind::Embedding => {
            return Err(Error::InvalidArgument(
                "a logging policy needs a feature-based tower".into(),
            ))
        }
        kind => TwoTowerModel::new(kind, train, 1, cfg.seed).relevance,
    };
    let feats = train.feature_matrix();
    let targets: Vec<f64> = labels.iter().collect();
    let n = targets.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let shapes: Vec<usize> = tower.tensors().iter().map(|t| t.data.len()).collect();
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|&l| vec![0.0; l]).collect();
    let key = StreamKey::new(cfg.seed).with(domain::POLICY_TRAIN);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut key.with(epoch as u64).rng());
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let loss = mse_pass(&tower, &feats, &targets, batch, Some(&mut grads));
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
            let params: Vec<&mut Tensor> = tower.tensors_mut();
            opt.step(params, &grads);
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let train_mse = mse_pass(&tower, &feats, &targets, &all, None);
    if !train_mse.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            batch: 0,
        });
    }
    Ok(PointwisePolicy { tower, train_mse })
}

/// Scores equal to the labels themselves.
pub fn expert_policy(labels: &LabelTable) -> ScoreTable {
    labels.clone()
}

/// `s = sign(α)·(|α|·γ̂ + (1 − |α|)·u)` with `u ~ U(0, 4)` drawn once per
/// pair from `(seed, query_id, doc_id)`. At `α = 0` the score is `u`.
pub fn interpolate_scores(
    ds: &Dataset,
    gamma_hat: &ScoreTable,
    alpha: f64,
    seed: u64,
) -> Result<ScoreTable> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [-1, 1]"
        )));
    }
    gamma_hat.check_aligned(ds)?;
    let base = StreamKey::new(seed).with(domain::POLICY_NOISE);
    let a = alpha.abs();
    let sign = if alpha < 0.0 { -1.0 } else { 1.0 };
    Ok(ScoreTable::from_fn(ds, |q, i, doc| {
        let g = gamma_hat.get(q, i);
        if a == 1.0 {
            return sign * g;
        }
        let u: f64 = base
            .with_str(&doc.query_id)
            .with(u64::from(doc.doc_id))
            .rng()
            .random_range(0.0..4.0);
        if alpha == 0.0 {
            u
        } else {
            sign * (a * g + (1.0 - a) * u)
        }
    }))
}

/// Document positions (indices into the query's document list) in display
/// order; rank `k` is `docs[k - 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ranking {
    pub docs: Vec<usize>,
    pub explored: bool,
}

#[derive(Clone, Debug)]
pub struct LoggingPolicy {
    pub scores: ScoreTable,
    pub alpha: f64,
    pub tau: f64,
    pub seed: u64,
    query_ids: Vec<String>,
    exploit: Vec<Vec<usize>>,
}

impl LoggingPolicy {
    /// Wraps already-interpolated scores.
    pub fn new(ds: &Dataset, scores: ScoreTable, alpha: f64, tau: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
        }
        scores.check_aligned(ds)?;
        let exploit = ds
            .queries
            .iter()
            .zip(&scores.values)
            .map(|(q, s)| {
                let mut order: Vec<usize> = (0..q.docs.len()).collect();
                order.sort_by(|&a, &b| {
                    s[b].total_cmp(&s[a])
                        .then(q.docs[a].doc_id.cmp(&q.docs[b].doc_id))
                });
                order
            })
            .collect();
        Ok(LoggingPolicy {
            scores,
            alpha,
            tau,
            seed,
            query_ids: ds.queries.iter().map(|q| q.id.clone()).collect(),
            exploit,
        })
    }

    /// Interpolates `gamma_hat` with noise and wraps the result.
    pub fn interpolated(
        ds: &Dataset,
        gamma_hat: &ScoreTable,
        alpha: f64,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        let scores = interpolate_scores(ds, gamma_hat, alpha, seed)?;
        Self::new(ds, scores, alpha, tau, seed)
    }

    pub fn n_queries(&self) -> usize {
        self.exploit.len()
    }

    pub fn exploit_ranking(&self, query: usize) -> &[usize] {
        &self.exploit[query]
    }

    /// The ranking shown for `query` in the session identified by `session`.
    /// A pure function of `(seed, query_id, session)`.
    pub fn draw_ranking(&self, query: usize, session: u64) -> Ranking {
        let mut rng = StreamKey::new(self.seed)
            .with(domain::EXPLORATION)
            .with_str(&self.query_ids[query])
            .with(session)
            .rng();
        let explore = self.tau > 0.0 && rng.random::<f64>() < self.tau;
        let mut docs = self.exploit[query].clone();
        if explore {
            docs.sort_unstable();
            docs.shuffle(&mut rng);
        }
        Ranking {
            docs,
            explored: explore,
        }
    }
}

/// Keeps only the listed feature columns.
pub fn restrict_features(ds: &Dataset, keep: &[usize]) -> Result<Dataset> {
    ds.select_features(keep)
}

/// The first `n` feature columns.
pub fn first_features(ds: &Dataset, n: usize) -> Result<Dataset> {
    let keep: Vec<usize> = (0..n).collect();
    ds.select_features(&keep)
}
