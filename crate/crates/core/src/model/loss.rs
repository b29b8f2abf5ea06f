//! Plain and inverse-propensity-weighted negative log-likelihood.
//!
//! Losses are computed over [`Observations`]: rows of `(document, rank,
//! shown, clicks, weight)`. A row is either a single impression (`shown = 1`)
//! or all impressions of one `(document, rank)` cell of a log; both give the
//! same mean loss because the NLL of a cell is additive in its impressions.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use super::{sigmoid, TwoTowerModel};
use crate::clicks::{PropensityTable, SessionLog};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Predicted probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Nll,
    IpsNll,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Nll => "nll",
            LossKind::IpsNll => "ips",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(LossKind::Nll),
            "ips_nll" | "ips" => Ok(LossKind::IpsNll),
            other => Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Weighting<'a> {
    Uniform,
    /// `min(1 / π̂, clip)` per impression.
    Ips {
        propensities: &'a PropensityTable,
        clip: f64,
    },
}

impl Weighting<'_> {
    fn weight(&self, query: usize, doc: usize, global: usize, rank: usize) -> Result<f64> {
        match self {
            Weighting::Uniform => Ok(1.0),
            Weighting::Ips { propensities, clip } => {
                let p = if rank <= propensities.max_rank() {
                    propensities.get_global(global, rank)
                } else {
                    0.0
                };
                if p > 0.0 {
                    Ok((1.0 / p).min(*clip))
                } else {
                    Err(Error::MissingPropensity { query, doc, rank })
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Observations {
    /// Global document index (dataset layout order).
    pub docs: Vec<u32>,
    pub ranks: Vec<u8>,
    pub shown: Vec<u32>,
    pub clicks: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Observations {
    /// One row per impression, in log order.
    pub fn impressions(log: &SessionLog, weighting: Weighting<'_>) -> Result<Self> {
        let layout = log.layout();
        let n = log.len();
        let mut obs = Observations {
            docs: Vec::with_capacity(n),
            ranks: log.rank.clone(),
            shown: vec![1; n],
            clicks: log.click.iter().map(|&c| u32::from(c)).collect(),
            weights: Vec::with_capacity(n),
        };
        for i in 0..n {
            let q = log.query[i] as usize;
            let d = usize::from(log.doc[i]);
            let g = layout.global(q, d);
            obs.docs.push(g as u32);
            obs.weights
                .push(weighting.weight(q, d, g, usize::from(log.rank[i]))?);
        }
        Ok(obs)
    }

    /// One row per displayed `(document, rank)` cell, ordered by document
    /// then rank.
    pub fn cells(log: &SessionLog, weighting: Weighting<'_>) -> Result<Self> {
        let layout = log.layout();
        let k = log.max_rank;
        let mut shown = vec![0u32; layout.n_docs() * k];
        let mut clicks = vec![0u32; shown.len()];
        for i in 0..log.len() {
            let g = layout.global(log.query[i] as usize, usize::from(log.doc[i]));
            let c = g * k + usize::from(log.rank[i]) - 1;
            shown[c] += 1;
            clicks[c] += u32::from(log.click[i]);
        }
        let mut obs = Observations::default();
        for q in 0..layout.n_queries() {
            for d in 0..layout.docs_in(q) {
                let g = layout.global(q, d);
                for r in 0..k {
                    let c = g * k + r;
                    if shown[c] == 0 {
                        continue;
                    }
                    obs.docs.push(g as u32);
                    obs.ranks.push((r + 1) as u8);
                    obs.shown.push(shown[c]);
                    obs.clicks.push(clicks[c]);
                    obs.weights.push(weighting.weight(q, d, g, r + 1)?);
                }
            }
        }
        Ok(obs)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Number of impressions represented.
    pub fn n_impressions(&self) -> u64 {
        self.shown.iter().map(|&s| u64::from(s)).sum()
    }

    pub fn max_rank(&self) -> usize {
        self.ranks.iter().copied().max().map_or(0, usize::from)
    }
}

/// Scratch space mapping global document indices to batch slots, so a
/// feature tower is evaluated once per distinct document of a batch.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    slot: Vec<u32>,
    uniq: Vec<usize>,
    d_rel: Vec<f64>,
}

impl Workspace {
    pub fn new(n_docs: usize) -> Self {
        Workspace {
            slot: vec![u32::MAX; n_docs],
            uniq: Vec::new(),
            d_rel: Vec::new(),
        }
    }

    fn collect(&mut self, obs: &Observations, rows: &[usize]) {
        self.uniq.clear();
        for &i in rows {
            let d = obs.docs[i] as usize;
            if d >= self.slot.len() {
                self.slot.resize(d + 1, u32::MAX);
            }
            if self.slot[d] == u32::MAX {
                self.slot[d] = self.uniq.len() as u32;
                self.uniq.push(d);
            }
        }
    }

    fn release(&mut self) {
        for &d in &self.uniq {
            self.slot[d] = u32::MAX;
        }
    }
}

/// Gradient buffers, one per tensor in [`TwoTowerModel::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &TwoTowerModel) -> Self {
        Gradients {
            tensors: model
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.tensors.iter_mut().for_each(|g| g.fill(0.0));
    }
}

fn clamp_limit() -> f64 {
    ((1.0 - PROB_CLAMP) / PROB_CLAMP).ln()
}

/// `-[c·ln p + (n - c)·ln(1 - p)]` with `p = σ(z)` clamped.
#[inline]
fn cell_nll(z: f64, shown: u32, clicks: u32, limit: f64) -> f64 {
    let z = z.clamp(-limit, limit);
    // -ln σ(z) = ln(1 + e^{-z}); -ln(1 - σ(z)) = ln(1 + e^{z}).
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    let c = f64::from(clicks);
    let n = f64::from(shown);
    c * softplus(-z) + (n - c) * softplus(z)
}

/// Click logits `θ_k + r(q, d)` for every row.
pub fn evaluate(model: &TwoTowerModel, obs: &Observations, features: &Array2<f64>) -> Vec<f64> {
    let rel = all_relevance(model, obs, features);
    obs.docs
        .iter()
        .zip(&obs.ranks)
        .map(|(&d, &k)| model.bias.logit(usize::from(k)) + rel[d as usize])
        .collect()
}

fn all_relevance(model: &TwoTowerModel, obs: &Observations, features: &Array2<f64>) -> Vec<f64> {
    let n = obs.docs.iter().map(|&d| d as usize + 1).max().unwrap_or(0);
    let docs: Vec<usize> = (0..n).collect();
    model.relevance.forward(&docs, features).0
}

/// Weighted mean NLL over all rows, normalized by the impression count.
pub fn loss_value(model: &TwoTowerModel, obs: &Observations, features: &Array2<f64>) -> f64 {
    if obs.is_empty() {
        return f64::NAN;
    }
    let limit = clamp_limit();
    let logits = evaluate(model, obs, features);
    let total: f64 = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| obs.weights[i] * cell_nll(z, obs.shown[i], obs.clicks[i], limit))
        .sum();
    total / obs.n_impressions() as f64
}

/// Loss over `rows` and its gradient with respect to every parameter,
/// written into `out` (overwritten). The logit gradient of a row is
/// `w·(n·σ(z) - c) / N` with `N` the impressions in `rows`; it is not
/// affected by the probability clamp.
pub fn gradients(
    model: &TwoTowerModel,
    obs: &Observations,
    rows: &[usize],
    features: &Array2<f64>,
    ws: &mut Workspace,
    out: &mut Gradients,
) -> f64 {
    out.fill_zero();
    if rows.is_empty() {
        return f64::NAN;
    }
    ws.collect(obs, rows);
    let (rel, cache) = model.relevance.forward(&ws.uniq, features);
    ws.d_rel.clear();
    ws.d_rel.resize(ws.uniq.len(), 0.0);
    let norm: f64 = rows.iter().map(|&i| f64::from(obs.shown[i])).sum();
    let limit = clamp_limit();
    let mut loss = 0.0;
    let (theta_grad, tower_grads) = out.tensors.split_at_mut(1);
    for &i in rows {
        let slot = ws.slot[obs.docs[i] as usize] as usize;
        let k = usize::from(obs.ranks[i]);
        let z = model.bias.logit(k) + rel[slot];
        let w = obs.weights[i];
        loss += w * cell_nll(z, obs.shown[i], obs.clicks[i], limit);
        let g = w * (f64::from(obs.shown[i]) * sigmoid(z) - f64::from(obs.clicks[i])) / norm;
        theta_grad[0][k - 1] += g;
        ws.d_rel[slot] += g;
    }
    model
        .relevance
        .backward(&cache, &ws.uniq, features, &ws.d_rel, tower_grads);
    ws.release();
    loss / norm
}

/// Mean NLL of `model` on a log drawn from `ds`.
pub fn nll_loss(model: &TwoTowerModel, ds: &Dataset, log: &SessionLog) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    model.check_compatible(ds)?;
    let obs = Observations::cells(log, Weighting::Uniform)?;
    Ok(loss_value(model, &obs, &ds.feature_matrix()))
}

/// Mean `min(1/π̂, clip)`-weighted NLL, normalized by the impression count.
pub fn ips_nll_loss(
    model: &TwoTowerModel,
    ds: &Dataset,
    log: &SessionLog,
    propensities: &PropensityTable,
    clip: f64,
) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    model.check_compatible(ds)?;
    let obs = Observations::cells(log, Weighting::Ips { propensities, clip })?;
    Ok(loss_value(model, &obs, &ds.feature_matrix()))
}
