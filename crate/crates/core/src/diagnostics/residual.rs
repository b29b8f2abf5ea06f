//! Residuals of a fitted model against observed click rates, and the
//! per-rank reparameterization probe for embedding models.

use std::io::Write;

use crate::clicks::{PropensityTable, SessionLog};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    evaluate, nll_loss, sigmoid, Observations, RelevanceTower, TwoTowerModel, Weighting,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CellResidual {
    pub query: usize,
    pub doc: usize,
    pub rank: usize,
    pub shown: u32,
    pub clicks: u32,
    pub predicted: f64,
    /// Empirical click rate minus predicted probability.
    pub residual: f64,
    pub propensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankResidual {
    pub rank: usize,
    pub cells: usize,
    pub impressions: u64,
    /// Impression-weighted mean residual.
    pub mean_residual: f64,
    /// Pearson correlation between residual and propensity over the cells
    /// of this rank; 0 when either side is constant.
    pub correlation: f64,
    /// `Σ_q P̂(q) Σ_d π̂(d,k|q) ε(q,d,k)`.
    pub policy_sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub cells: Vec<CellResidual>,
    /// One entry per rank `1..=K`; `None` for ranks never displayed.
    pub ranks: Vec<Option<RankResidual>>,
    /// Pearson correlation over all cells.
    pub correlation: f64,
    /// `max_{q,d} |Σ_k π̂(d,k|q) ε(q,d,k)|`.
    pub max_relevance_sum: f64,
    /// `max_k |Σ_q P̂(q) Σ_d π̂(d,k|q) ε(q,d,k)|`.
    pub max_bias_sum: f64,
}

impl ResidualReport {
    pub fn max_abs_mean_residual(&self) -> f64 {
        self.ranks
            .iter()
            .flatten()
            .map(|r| r.mean_residual.abs())
            .fold(0.0, f64::max)
    }

    /// `rank,cells,impressions,mean_residual,correlation,policy_sum` rows.
    pub fn write_ranks_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "rank",
            "cells",
            "impressions",
            "mean_residual",
            "correlation",
            "policy_sum",
        ])?;
        for r in self.ranks.iter().flatten() {
            w.write_record([
                r.rank.to_string(),
                r.cells.to_string(),
                r.impressions.to_string(),
                r.mean_residual.to_string(),
                r.correlation.to_string(),
                r.policy_sum.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// `query_id,doc_id,rank,shown,clicks,predicted,residual,propensity`.
    pub fn write_cells_csv<W: Write>(&self, ds: &Dataset, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "query_id",
            "doc_id",
            "rank",
            "shown",
            "clicks",
            "predicted",
            "residual",
            "propensity",
        ])?;
        for c in &self.cells {
            let q = &ds.queries[c.query];
            w.write_record([
                q.id.clone(),
                q.docs[c.doc].doc_id.to_string(),
                c.rank.to_string(),
                c.shown.to_string(),
                c.clicks.to_string(),
                c.predicted.to_string(),
                c.residual.to_string(),
                c.propensity.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Pearson correlation; 0 when either input has no spread.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    // Treat spreads at rounding level as constant.
    let tiny = |s: f64, m: f64| s <= 1e-24 * n * m.abs().max(1.0).powi(2);
    if tiny(sxx, mx) || tiny(syy, my) {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Residuals on every displayed cell of `log`, with `P̂(q)` taken as the
/// share of sessions of each query.
pub fn residual_report(
    model: &TwoTowerModel,
    ds: &Dataset,
    log: &SessionLog,
    propensities: &PropensityTable,
) -> Result<ResidualReport> {
    if log.is_empty() {
        return Err(Error::InvalidArgument(
            "residuals need a non-empty log".into(),
        ));
    }
    model.check_compatible(ds)?;
    if log.max_rank > model.max_rank() {
        return Err(Error::InvalidArgument("log ranks exceed the model".into()));
    }
    let layout = log.layout();
    let obs = Observations::cells(log, Weighting::Uniform)?;
    let logits = evaluate(model, &obs, &ds.feature_matrix());
    let mut owner = vec![(0usize, 0usize); layout.n_docs()];
    for q in 0..layout.n_queries() {
        for d in 0..layout.docs_in(q) {
            owner[layout.global(q, d)] = (q, d);
        }
    }
    let sessions = propensities.sessions();
    let n_sessions: f64 = sessions.iter().map(|&s| f64::from(s)).sum();

    let k = log.max_rank;
    let mut cells = Vec::with_capacity(obs.len());
    let mut rel_sums = vec![0.0; layout.n_docs()];
    for i in 0..obs.len() {
        let g = obs.docs[i] as usize;
        let (query, doc) = owner[g];
        let rank = usize::from(obs.ranks[i]);
        let p = sigmoid(logits[i]);
        let rate = f64::from(obs.clicks[i]) / f64::from(obs.shown[i]);
        let propensity = propensities
            .get(query, doc, rank)
            .ok_or(Error::MissingPropensity { query, doc, rank })?;
        let residual = rate - p;
        rel_sums[g] += propensity * residual;
        cells.push(CellResidual {
            query,
            doc,
            rank,
            shown: obs.shown[i],
            clicks: obs.clicks[i],
            predicted: p,
            residual,
            propensity,
        });
    }

    let mut ranks = Vec::with_capacity(k);
    for r in 1..=k {
        let at: Vec<&CellResidual> = cells.iter().filter(|c| c.rank == r).collect();
        if at.is_empty() {
            ranks.push(None);
            continue;
        }
        let impressions: u64 = at.iter().map(|c| u64::from(c.shown)).sum();
        let weighted: f64 = at.iter().map(|c| f64::from(c.shown) * c.residual).sum();
        let policy_sum: f64 = at
            .iter()
            .map(|c| f64::from(sessions[c.query]) / n_sessions * c.propensity * c.residual)
            .sum();
        let res: Vec<f64> = at.iter().map(|c| c.residual).collect();
        let pro: Vec<f64> = at.iter().map(|c| c.propensity).collect();
        ranks.push(Some(RankResidual {
            rank: r,
            cells: at.len(),
            impressions,
            mean_residual: weighted / impressions as f64,
            correlation: pearson(&res, &pro),
            policy_sum,
        }));
    }
    let res: Vec<f64> = cells.iter().map(|c| c.residual).collect();
    let pro: Vec<f64> = cells.iter().map(|c| c.propensity).collect();
    Ok(ResidualReport {
        correlation: pearson(&res, &pro),
        max_relevance_sum: rel_sums.iter().map(|s| s.abs()).fold(0.0, f64::max),
        max_bias_sum: ranks
            .iter()
            .flatten()
            .map(|r| r.policy_sum.abs())
            .fold(0.0, f64::max),
        cells,
        ranks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftProbe {
    pub loss_before: f64,
    pub loss_after: f64,
    pub difference: f64,
    /// Pairs displayed at more than one rank, as `(query, doc, ranks)`.
    pub blockers: Vec<(usize, usize, Vec<usize>)>,
}

/// Applies `θ_k ← θ_k + Δ_k` and `γ_{q,d} ← γ_{q,d} - Δ_{k(q,d)}`, where
/// `k(q,d)` is the pair's observed rank (its lowest one when it was shown at
/// several, which makes it a blocker), and reports the change in NLL.
pub fn shift_invariance_probe(
    model: &TwoTowerModel,
    ds: &Dataset,
    log: &SessionLog,
    deltas: &[f64],
) -> Result<ShiftProbe> {
    if !matches!(model.relevance, RelevanceTower::Embedding(_)) {
        return Err(Error::InvalidArgument(
            "the shift probe needs an embedding model".into(),
        ));
    }
    if deltas.len() != model.max_rank() {
        return Err(Error::DimensionMismatch {
            expected: model.max_rank(),
            actual: deltas.len(),
        });
    }
    model.check_compatible(ds)?;
    let layout = log.layout();
    let mut seen: Vec<u64> = vec![0; layout.n_docs()];
    let mut ranks_of: Vec<Vec<usize>> = vec![Vec::new(); layout.n_docs()];
    for i in 0..log.len() {
        let g = layout.global(log.query[i] as usize, usize::from(log.doc[i]));
        let r = usize::from(log.rank[i]);
        if r <= 64 {
            if seen[g] & (1 << (r - 1)) != 0 {
                continue;
            }
            seen[g] |= 1 << (r - 1);
        } else if ranks_of[g].contains(&r) {
            continue;
        }
        ranks_of[g].push(r);
    }
    let mut shifted = model.clone();
    for (t, d) in shifted.bias.theta.data.iter_mut().zip(deltas) {
        *t += d;
    }
    let mut blockers = Vec::new();
    if let RelevanceTower::Embedding(e) = &mut shifted.relevance {
        for q in 0..layout.n_queries() {
            for d in 0..layout.docs_in(q) {
                let g = layout.global(q, d);
                let rs = &mut ranks_of[g];
                if rs.is_empty() {
                    continue;
                }
                rs.sort_unstable();
                e.gamma.data[g] -= deltas[rs[0] - 1];
                if rs.len() > 1 {
                    blockers.push((q, d, rs.clone()));
                }
            }
        }
    }
    let before = nll_loss(model, ds, log)?;
    let after = nll_loss(&shifted, ds, log)?;
    Ok(ShiftProbe {
        loss_before: before,
        loss_after: after,
        difference: (before - after).abs(),
        blockers,
    })
}
