//! Feature-support overlap between ranks.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use rand::Rng;

use super::SwapGraph;
use crate::clicks::SessionLog;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::RelevanceTower;
use crate::rng::{domain, StreamKey};
use crate::synth::percentile;

/// Cap on the cross-rank distances pooled for the default radius.
const RADIUS_SAMPLE: usize = 200_000;

#[derive(Clone, Debug, PartialEq)]
pub struct RankPairOverlap {
    pub rank_a: usize,
    pub rank_b: usize,
    /// `None` when either rank was never displayed.
    pub d_min: Option<f64>,
    /// Cross-rank feature pairs within the radius.
    pub within_eps: u64,
    /// `2·L·d_min` when a Lipschitz constant was supplied.
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub eps: f64,
    pub pairs: Vec<RankPairOverlap>,
    /// Ranks linked when `d_min <= eps`.
    pub graph: SwapGraph,
}

impl OverlapReport {
    /// `rank_a,rank_b,d_min,within_eps,bound` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank_a", "rank_b", "d_min", "within_eps", "bound"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.pairs {
            w.write_record([
                p.rank_a.to_string(),
                p.rank_b.to_string(),
                opt(p.d_min),
                p.within_eps.to_string(),
                opt(p.bound),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distinct documents displayed at each rank.
fn docs_per_rank(log: &SessionLog) -> Vec<Vec<usize>> {
    let layout = log.layout();
    let k = log.max_rank;
    let mut seen = vec![false; layout.n_docs() * k];
    let mut out = vec![Vec::new(); k];
    for i in 0..log.len() {
        let g = layout.global(log.query[i] as usize, usize::from(log.doc[i]));
        let r = usize::from(log.rank[i]) - 1;
        if !seen[g * k + r] {
            seen[g * k + r] = true;
            out[r].push(g);
        }
    }
    out
}

/// Default radius: 5th percentile of cross-rank feature distances, from a
/// deterministic sample of at most `RADIUS_SAMPLE` distances.
fn default_radius(feats: &Array2<f64>, per_rank: &[Vec<usize>]) -> f64 {
    let k = per_rank.len();
    let n_pairs = (k * k.saturating_sub(1) / 2).max(1);
    let cap = (RADIUS_SAMPLE / n_pairs).max(1);
    let mut sample = Vec::new();
    let mut rng = StreamKey::new(0).with(domain::SAMPLE).rng();
    for a in 0..k {
        for b in a + 1..k {
            let (xa, xb) = (&per_rank[a], &per_rank[b]);
            let total = xa.len() * xb.len();
            if total == 0 {
                continue;
            }
            let mut push = |i: usize, j: usize| {
                let d = sq_dist(
                    feats.row(xa[i]).as_slice().expect("row"),
                    feats.row(xb[j]).as_slice().expect("row"),
                );
                sample.push(d.sqrt());
            };
            if total <= cap {
                for i in 0..xa.len() {
                    for j in 0..xb.len() {
                        push(i, j);
                    }
                }
            } else {
                for _ in 0..cap {
                    let i = rng.random_range(0..xa.len());
                    let j = rng.random_range(0..xb.len());
                    push(i, j);
                }
            }
        }
    }
    if sample.is_empty() {
        return 0.0;
    }
    sample.sort_by(f64::total_cmp);
    percentile(&sample, 0.05)
}

/// Minimum Euclidean distance between feature vectors displayed at each
/// pair of ranks, by exhaustive search. `eps = None` picks the 5th
/// percentile of cross-rank distances.
pub fn feature_overlap(
    log: &SessionLog,
    ds: &Dataset,
    eps: Option<f64>,
    lipschitz: Option<f64>,
) -> Result<OverlapReport> {
    if let Some(e) = eps {
        if !(e > 0.0) {
            return Err(Error::InvalidArgument(
                "overlap radius must be positive".into(),
            ));
        }
    }
    if let Some(l) = lipschitz {
        if !(l >= 0.0) {
            return Err(Error::InvalidArgument(
                "Lipschitz constant must be non-negative".into(),
            ));
        }
    }
    if log.docs_per_query.len() != ds.queries.len()
        || log
            .docs_per_query
            .iter()
            .zip(&ds.queries)
            .any(|(&n, q)| n != q.docs.len())
    {
        return Err(Error::InvalidArgument("log does not match dataset".into()));
    }
    let feats = ds.feature_matrix();
    let per_rank = docs_per_rank(log);
    let eps = eps.unwrap_or_else(|| default_radius(&feats, &per_rank));
    let eps_sq = eps * eps;
    let k = per_rank.len();
    let mut pairs = Vec::new();
    let mut edges = BTreeMap::new();
    for a in 0..k {
        for b in a + 1..k {
            let mut best = f64::INFINITY;
            let mut within = 0u64;
            for &x in &per_rank[a] {
                let rx = feats.row(x);
                let rx = rx.as_slice().expect("row");
                for &y in &per_rank[b] {
                    let d = sq_dist(rx, feats.row(y).as_slice().expect("row"));
                    best = best.min(d);
                    within += u64::from(d <= eps_sq);
                }
            }
            let d_min = best.is_finite().then(|| best.sqrt());
            if d_min.is_some_and(|d| d <= eps) {
                edges.insert((a, b), within);
            }
            pairs.push(RankPairOverlap {
                rank_a: a + 1,
                rank_b: b + 1,
                d_min,
                within_eps: within,
                bound: lipschitz.zip(d_min).map(|(l, d)| 2.0 * l * d),
            });
        }
    }
    let names = (1..=k).map(|r| r.to_string()).collect();
    Ok(OverlapReport {
        eps,
        pairs,
        graph: SwapGraph::from_edges(names, edges),
    })
}

/// Largest observed `|r(x1) - r(x2)| / ‖x1 - x2‖` over `n_pairs` random
/// document pairs of `ds`. Pairs with identical features are skipped.
pub fn estimate_lipschitz(
    tower: &RelevanceTower,
    ds: &Dataset,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if tower.feature_dim() != Some(ds.feature_dim) {
        return Err(Error::InvalidArgument(
            "Lipschitz estimate needs a feature tower matching the dataset".into(),
        ));
    }
    let n = ds.n_docs();
    if n < 2 {
        return Ok(0.0);
    }
    let feats = ds.feature_matrix();
    let all: Vec<usize> = (0..n).collect();
    let out = tower.forward(&all, &feats).0;
    let mut rng = StreamKey::new(seed).with(domain::SAMPLE).rng();
    let mut best: f64 = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let d = sq_dist(
            feats.row(i).as_slice().expect("row"),
            feats.row(j).as_slice().expect("row"),
        )
        .sqrt();
        if d > 0.0 {
            best = best.max((out[i] - out[j]).abs() / d);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicks::simulate;
    use crate::data::{Document, LabelTable, Query, Split};
    use crate::diagnostics::build_swap_graph;
    use crate::model::{Linear, Tensor};
    use crate::policy::LoggingPolicy;

    fn one_query(features: Vec<Vec<f64>>) -> Dataset {
        let dim = features[0].len();
        let docs = features
            .into_iter()
            .enumerate()
            .map(|(d, f)| Document {
                query_id: "q".into(),
                doc_id: d as u32,
                features: f,
                label: 1,
            })
            .collect();
        Dataset::new(
            vec![Query {
                id: "q".into(),
                docs,
            }],
            dim,
            Split::Train,
        )
    }

    fn fixed_log(ds: &Dataset, sessions: &[Vec<usize>]) -> SessionLog {
        let mut log = SessionLog::empty(ds);
        for (s, order) in sessions.iter().enumerate() {
            for (k, &d) in order.iter().enumerate() {
                log.session.push(s as u32);
                log.query.push(0);
                log.doc.push(d as u16);
                log.rank.push((k + 1) as u8);
                log.click.push(false);
            }
        }
        log.n_sessions = sessions.len();
        log
    }

    #[test]
    fn exact_swap_is_zero_distance() {
        let ds = one_query(vec![vec![0.3, 1.0], vec![2.0, -1.0]]);
        let log = fixed_log(&ds, &[vec![0, 1], vec![1, 0]]);
        let r = feature_overlap(&log, &ds, Some(0.1), Some(5.0)).unwrap();
        assert_eq!(r.pairs[0].d_min, Some(0.0));
        assert_eq!(r.pairs[0].bound, Some(0.0));
        assert!(r.graph.is_connected());
    }

    #[test]
    fn one_hot_features_per_rank() {
        let ds = one_query(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let log = fixed_log(&ds, &[vec![0, 1, 2]]);
        let r = feature_overlap(&log, &ds, Some(1.4), Some(0.0)).unwrap();
        for p in &r.pairs {
            assert!((p.d_min.unwrap() - 2f64.sqrt()).abs() < 1e-12);
            assert_eq!(p.within_eps, 0);
            assert_eq!(p.bound, Some(0.0));
        }
        assert!(r.graph.edges.is_empty());
        let wide = feature_overlap(&log, &ds, Some(1.5), None).unwrap();
        assert!(wide.graph.is_connected());
        assert!(wide.pairs.iter().all(|p| p.bound.is_none()));
    }

    #[test]
    fn rejects_bad_radius() {
        let ds = one_query(vec![vec![0.0]]);
        let log = fixed_log(&ds, &[vec![0]]);
        assert!(feature_overlap(&log, &ds, Some(0.0), None).is_err());
        assert!(feature_overlap(&log, &ds, Some(1.0), Some(-1.0)).is_err());
    }

    #[test]
    fn overlap_contains_swap_graph() {
        let queries = (0..6)
            .map(|q| Query {
                id: format!("q{q}"),
                docs: (0..5)
                    .map(|d| Document {
                        query_id: format!("q{q}"),
                        doc_id: d,
                        features: vec![f64::from(d) + q as f64 * 0.1, (q % 2) as f64],
                        label: (d % 5) as u8,
                    })
                    .collect(),
            })
            .collect();
        let ds = Dataset::new(queries, 2, Split::Train);
        let labels = LabelTable::expert(&ds);
        let p = LoggingPolicy::interpolated(&ds, &labels, 0.7, 0.2, 3).unwrap();
        let log = simulate(&ds, &labels, &p, 300, 3).unwrap();
        let swaps = build_swap_graph(&log);
        let overlap = feature_overlap(&log, &ds, None, None).unwrap();
        assert!(overlap.eps >= 0.0);
        for &(a, b) in swaps.edges.keys() {
            assert!(overlap.graph.has_edge(a, b));
        }
    }

    #[test]
    fn lipschitz_of_a_linear_map() {
        let ds = one_query(vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![3.0, 1.0],
        ]);
        let tower = RelevanceTower::Linear(Linear {
            weight: Tensor {
                name: "relevance.weight".into(),
                shape: vec![2],
                data: vec![3.0, 4.0],
            },
            intercept: Tensor::zeros("relevance.intercept", vec![1]),
        });
        let l = estimate_lipschitz(&tower, &ds, 500, 1).unwrap();
        assert!(l <= 5.0 + 1e-12 && l > 3.0, "{l}");
    }
}
