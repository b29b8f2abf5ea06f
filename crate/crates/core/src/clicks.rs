//! Click simulation and display propensities.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::data::{Dataset, LabelTable, Layout};
use crate::error::{Error, Result};
use crate::model::sigmoid;
use crate::policy::LoggingPolicy;
use crate::rng::{domain, StreamKey};

/// Ground-truth position bias logit `-ln k`.
pub fn true_bias_logit(rank: usize) -> f64 {
    0.0 - (rank as f64).ln()
}

/// `σ(-ln k + γ̂ - 2)` for a label `γ̂ ∈ [0, 4]`.
pub fn click_probability(label: f64, rank: usize) -> f64 {
    sigmoid(true_bias_logit(rank) + label - 2.0)
}

/// Rank bias `θ̂_k = -ln k` and centered relevance `γ̂ - 2`.
#[derive(Clone, Debug)]
pub struct TrueUserModel {
    labels: LabelTable,
}

impl TrueUserModel {
    pub fn new(labels: LabelTable) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|v| !(0.0..=4.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, 4]"
            )));
        }
        Ok(TrueUserModel { labels })
    }

    pub fn bias_logits(max_rank: usize) -> Vec<f64> {
        (1..=max_rank).map(true_bias_logit).collect()
    }

    pub fn relevance_logit(&self, query: usize, doc: usize) -> f64 {
        self.labels.get(query, doc) - 2.0
    }

    pub fn click_probability(&self, query: usize, doc: usize, rank: usize) -> f64 {
        click_probability(self.labels.get(query, doc), rank)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Impression {
    pub session: u32,
    /// Query index in the dataset.
    pub query: usize,
    /// Document position within its query.
    pub doc: usize,
    pub rank: usize,
    pub click: bool,
}

/// Columnar click log. Impressions are stored in session order, ranks
/// ascending within a session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionLog {
    pub session: Vec<u32>,
    pub query: Vec<u32>,
    pub doc: Vec<u16>,
    pub rank: Vec<u8>,
    pub click: Vec<bool>,
    pub n_sessions: usize,
    pub max_rank: usize,
    /// Documents per query of the dataset the log was drawn from.
    pub docs_per_query: Vec<usize>,
}

impl SessionLog {
    pub fn empty(ds: &Dataset) -> Self {
        SessionLog {
            max_rank: ds.max_docs_per_query(),
            docs_per_query: ds.queries.iter().map(|q| q.docs.len()).collect(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.click.len()
    }

    pub fn is_empty(&self) -> bool {
        self.click.is_empty()
    }

    pub fn n_clicks(&self) -> usize {
        self.click.iter().filter(|&&c| c).count()
    }

    pub fn get(&self, i: usize) -> Impression {
        Impression {
            session: self.session[i],
            query: self.query[i] as usize,
            doc: usize::from(self.doc[i]),
            rank: usize::from(self.rank[i]),
            click: self.click[i],
        }
    }

    pub fn impressions(&self) -> impl Iterator<Item = Impression> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    fn push(&mut self, imp: Impression) {
        self.session.push(imp.session);
        self.query.push(imp.query as u32);
        self.doc.push(imp.doc as u16);
        self.rank.push(imp.rank as u8);
        self.click.push(imp.click);
    }

    /// Layout of the source dataset.
    pub fn layout(&self) -> Layout {
        Layout::from_counts(self.docs_per_query.iter().copied())
    }

    /// `session_id,query_id,doc_id,rank,click` rows.
    pub fn write_csv<W: Write>(&self, ds: &Dataset, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["session_id", "query_id", "doc_id", "rank", "click"])?;
        for imp in self.impressions() {
            let q = &ds.queries[imp.query];
            w.write_record([
                imp.session.to_string(),
                q.id.clone(),
                q.docs[imp.doc].doc_id.to_string(),
                imp.rank.to_string(),
                u8::from(imp.click).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Reads a log written by [`SessionLog::write_csv`] against the dataset
    /// it was simulated on.
    pub fn read_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let queries = ds.query_index();
        let docs: Vec<HashMap<u32, usize>> = ds
            .queries
            .iter()
            .map(|q| {
                q.docs
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (d.doc_id, i))
                    .collect()
            })
            .collect();
        let mut log = SessionLog::empty(ds);
        let mut last_session = None;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("malformed {what}"),
            };
            let session: u32 = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("session_id"))?;
            let qid = rec.get(1).ok_or_else(|| bad("query_id"))?;
            let doc_id: u32 = rec
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("doc_id"))?;
            let rank: usize = rec
                .get(3)
                .and_then(|s| s.parse().ok())
                .filter(|&r| r >= 1)
                .ok_or_else(|| bad("rank"))?;
            let click = match rec.get(4) {
                Some("0") => false,
                Some("1") => true,
                _ => return Err(bad("click")),
            };
            let query = *queries.get(qid).ok_or_else(|| Error::UnknownPair {
                query_id: qid.to_string(),
                doc_id,
            })?;
            let doc = *docs[query].get(&doc_id).ok_or_else(|| Error::UnknownPair {
                query_id: qid.to_string(),
                doc_id,
            })?;
            if rank > log.max_rank {
                return Err(bad("rank"));
            }
            if last_session != Some(session) {
                log.n_sessions += 1;
                last_session = Some(session);
            }
            log.push(Impression {
                session,
                query,
                doc,
                rank,
                click,
            });
        }
        Ok(log)
    }
}

/// Draws `n_sessions` sessions: a uniform query, a ranking from `policy`,
/// and an independent Bernoulli click per displayed document.
pub fn simulate(
    ds: &Dataset,
    labels: &LabelTable,
    policy: &LoggingPolicy,
    n_sessions: usize,
    seed: u64,
) -> Result<SessionLog> {
    labels.check_aligned(ds)?;
    if policy.n_queries() != ds.queries.len() {
        return Err(Error::InvalidArgument(
            "policy was built for a different dataset".into(),
        ));
    }
    if ds.queries.is_empty() {
        return Err(Error::EmptyDataset("no queries to simulate".into()));
    }
    if ds.max_docs_per_query() > usize::from(u8::MAX) {
        return Err(Error::InvalidArgument(
            "queries longer than 255 documents; truncate first".into(),
        ));
    }
    let user = TrueUserModel::new(labels.clone())?;
    let mut log = SessionLog::empty(ds);
    let cap = n_sessions * ds.n_docs() / ds.queries.len();
    log.session.reserve(cap);
    log.query.reserve(cap);
    log.doc.reserve(cap);
    log.rank.reserve(cap);
    log.click.reserve(cap);
    let base = StreamKey::new(seed).with(domain::SESSION);
    let nq = ds.queries.len();
    for s in 0..n_sessions {
        let key = base.with(s as u64);
        let mut rng = key.rng();
        let query = rng.random_range(0..nq);
        let ranking = policy.draw_ranking(query, key.value());
        for (pos, &doc) in ranking.docs.iter().enumerate() {
            let rank = pos + 1;
            let p = user.click_probability(query, doc, rank);
            let click = rng.random::<f64>() < p;
            log.push(Impression {
                session: s as u32,
                query,
                doc,
                rank,
                click,
            });
        }
    }
    log.n_sessions = n_sessions;
    Ok(log)
}

/// Empirical display probabilities `π̂(d, k | q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropensityTable {
    max_rank: usize,
    layout: Layout,
    /// `values[global_doc * max_rank + rank - 1]`.
    values: Vec<f64>,
    sessions: Vec<u32>,
}

impl PropensityTable {
    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    /// Sessions observed per query.
    pub fn sessions(&self) -> &[u32] {
        &self.sessions
    }

    /// `π̂` for a displayed cell; `None` when the pair was never shown at
    /// that rank.
    pub fn get(&self, query: usize, doc: usize, rank: usize) -> Option<f64> {
        if rank == 0 || rank > self.max_rank {
            return None;
        }
        let v = self.values[self.layout.global(query, doc) * self.max_rank + rank - 1];
        (v > 0.0).then_some(v)
    }

    /// Same as [`PropensityTable::get`] keyed by the global document index.
    #[inline]
    pub fn get_global(&self, doc: usize, rank: usize) -> f64 {
        self.values[doc * self.max_rank + rank - 1]
    }

    /// Exact propensities of a uniformly shuffling policy: `1 / n_q` for
    /// every rank a query can fill.
    pub fn uniform(layout: &Layout, sessions_per_query: u32) -> Self {
        let max_rank = (0..layout.n_queries())
            .map(|q| layout.docs_in(q))
            .max()
            .unwrap_or(0);
        let mut values = vec![0.0; layout.n_docs() * max_rank];
        for q in 0..layout.n_queries() {
            let n = layout.docs_in(q);
            for d in 0..n {
                let g = layout.global(q, d);
                for k in 0..n {
                    values[g * max_rank + k] = 1.0 / n as f64;
                }
            }
        }
        PropensityTable {
            max_rank,
            layout: layout.clone(),
            values,
            sessions: vec![sessions_per_query; layout.n_queries()],
        }
    }

    /// `query_id,doc_id,rank,propensity` rows for every positive entry.
    pub fn write_csv<W: Write>(&self, ds: &Dataset, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["query_id", "doc_id", "rank", "propensity"])?;
        for (qi, q) in ds.queries.iter().enumerate() {
            for (di, d) in q.docs.iter().enumerate() {
                for k in 1..=self.max_rank {
                    if let Some(p) = self.get(qi, di, k) {
                        w.write_record([
                            q.id.clone(),
                            d.doc_id.to_string(),
                            k.to_string(),
                            p.to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Counts how often each pair was displayed at each rank, per session of
/// its query.
pub fn estimate_propensities(log: &SessionLog) -> Result<PropensityTable> {
    if log.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot count propensities on an empty log".into(),
        ));
    }
    let layout = log.layout();
    let k = log.max_rank;
    let mut counts = vec![0u32; layout.n_docs() * k];
    let mut sessions = vec![0u32; layout.n_queries()];
    for i in 0..log.len() {
        let q = log.query[i] as usize;
        let rank = usize::from(log.rank[i]);
        if rank == 1 {
            sessions[q] += 1;
        }
        counts[layout.global(q, usize::from(log.doc[i])) * k + rank - 1] += 1;
    }
    let mut values = vec![0.0; counts.len()];
    for q in 0..layout.n_queries() {
        if sessions[q] == 0 {
            continue;
        }
        let n = f64::from(sessions[q]);
        for d in 0..layout.docs_in(q) {
            let g = layout.global(q, d) * k;
            for r in 0..k {
                values[g + r] = f64::from(counts[g + r]) / n;
            }
        }
    }
    Ok(PropensityTable {
        max_rank: k,
        layout,
        values,
        sessions,
    })
}
