//! Identifiability and misspecification checks on logs and fitted models.
//!
//! * swap graph: ranks linked when the same pair was displayed at both;
//! * feature overlap: ranks linked when displayed feature vectors come close;
//! * residual report: click-rate residuals and their correlation with the
//!   display propensities;
//! * shift probe: applies a per-rank reparameterization to an embedding
//!   model and measures the change in loss;
//! * configuration graph: the swap graph over arbitrary discrete bias
//!   configurations instead of ranks.

mod overlap;
mod residual;
mod union_find;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;

use crate::clicks::SessionLog;
use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};

pub use overlap::{estimate_lipschitz, feature_overlap, OverlapReport, RankPairOverlap};
pub use residual::{
    residual_report, shift_invariance_probe, CellResidual, RankResidual, ResidualReport, ShiftProbe,
};
pub use union_find::UnionFind;

/// Undirected graph over numbered vertices with its connected components.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapGraph {
    /// Display name per vertex (`"3"` for rank 3).
    pub vertices: Vec<String>,
    /// `(a, b) -> shared items`, 0-based vertex indices with `a < b`.
    pub edges: BTreeMap<(usize, usize), u64>,
    pub components: Vec<Vec<usize>>,
}

impl SwapGraph {
    pub fn from_edges(vertices: Vec<String>, edges: BTreeMap<(usize, usize), u64>) -> Self {
        let mut uf = UnionFind::new(vertices.len());
        for &(a, b) in edges.keys() {
            uf.union(a, b);
        }
        SwapGraph {
            components: uf.components(),
            vertices,
            edges,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_connected(&self) -> bool {
        self.components.len() <= 1
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains_key(&(a.min(b), a.max(b)))
    }

    /// Component index of every vertex.
    pub fn component_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_vertices()];
        for (c, members) in self.components.iter().enumerate() {
            for &v in members {
                out[v] = c;
            }
        }
        out
    }

    /// `connected: true|false components: {1,2} {3}`.
    pub fn verdict(&self) -> String {
        let mut s = format!("connected: {} components:", self.is_connected());
        for c in &self.components {
            let names: Vec<&str> = c.iter().map(|&v| self.vertices[v].as_str()).collect();
            let _ = write!(s, " {{{}}}", names.join(","));
        }
        s
    }

    /// `vertex_a,vertex_b,shared` rows.
    pub fn write_edges_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["vertex_a", "vertex_b", "shared"])?;
        for (&(a, b), n) in &self.edges {
            w.write_record([&self.vertices[a], &self.vertices[b], &n.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// `vertex,component` rows.
    pub fn write_components_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["vertex", "component"])?;
        for (v, c) in self.component_of().into_iter().enumerate() {
            w.write_record([&self.vertices[v], &c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Links every pair of vertices at which the same item was observed.
/// `observations` yields `(item, vertex)`.
fn graph_from_observations(
    vertices: Vec<String>,
    observations: impl Iterator<Item = (usize, usize)>,
) -> SwapGraph {
    let mut seen: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (item, v) in observations {
        seen.entry(item).or_default().insert(v);
    }
    let mut edges = BTreeMap::new();
    for vs in seen.values() {
        let vs: Vec<usize> = vs.iter().copied().collect();
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                *edges.entry((vs[i], vs[j])).or_insert(0) += 1;
            }
        }
    }
    SwapGraph::from_edges(vertices, edges)
}

/// Ranks `1..=K` linked when some query-document pair was displayed at
/// both. Edge weights count such pairs.
pub fn build_swap_graph(log: &SessionLog) -> SwapGraph {
    let layout = log.layout();
    let k = log.max_rank;
    // One rank bitset per document is enough up to 64 ranks; fall back to
    // the generic path otherwise.
    if k <= 64 {
        let mut masks = vec![0u64; layout.n_docs()];
        for i in 0..log.len() {
            let g = layout.global(log.query[i] as usize, usize::from(log.doc[i]));
            masks[g] |= 1 << (log.rank[i] - 1);
        }
        let mut edges = BTreeMap::new();
        for m in masks.into_iter().filter(|m| m.count_ones() > 1) {
            let ranks: Vec<usize> = (0..k).filter(|r| m & (1 << r) != 0).collect();
            for i in 0..ranks.len() {
                for j in i + 1..ranks.len() {
                    *edges.entry((ranks[i], ranks[j])).or_insert(0) += 1;
                }
            }
        }
        return SwapGraph::from_edges(rank_names(k), edges);
    }
    graph_from_observations(
        rank_names(k),
        (0..log.len()).map(|i| {
            (
                layout.global(log.query[i] as usize, usize::from(log.doc[i])),
                usize::from(log.rank[i]) - 1,
            )
        }),
    )
}

fn rank_names(k: usize) -> Vec<String> {
    (1..=k).map(|r| r.to_string()).collect()
}

/// An impression tagged with a discrete bias configuration, e.g.
/// `(rank, device, content type)` with each coordinate 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedImpression {
    pub item: usize,
    pub config: Vec<usize>,
}

/// The swap graph over all configurations of a grid with the given
/// dimension sizes: vertices are configurations, linked when the same item
/// was observed in both.
pub fn bias_config_graph(dims: &[usize], impressions: &[TaggedImpression]) -> Result<SwapGraph> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidArgument(
            "configuration dimensions must be positive".into(),
        ));
    }
    let n: usize = dims.iter().product();
    let mut names = Vec::with_capacity(n);
    for v in 0..n {
        let coords = unflatten(v, dims);
        let parts: Vec<String> = coords.iter().map(|c| (c + 1).to_string()).collect();
        names.push(parts.join("."));
    }
    let mut obs = Vec::with_capacity(impressions.len());
    for imp in impressions {
        obs.push((imp.item, flatten(&imp.config, dims)?));
    }
    Ok(graph_from_observations(names, obs.into_iter()))
}

fn flatten(coords: &[usize], dims: &[usize]) -> Result<usize> {
    if coords.len() != dims.len() {
        return Err(Error::DimensionMismatch {
            expected: dims.len(),
            actual: coords.len(),
        });
    }
    let mut v = 0;
    for (&c, &d) in coords.iter().zip(dims) {
        if c >= d {
            return Err(Error::InvalidArgument(format!(
                "configuration coordinate {c} outside 0..{d}"
            )));
        }
        v = v * d + c;
    }
    Ok(v)
}

fn unflatten(mut v: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (slot, &d) in out.iter_mut().zip(dims).rev() {
        *slot = v % d;
        v /= d;
    }
    out
}

/// Tags a simulated log with configurations `(rank, extra...)`: the rank
/// coordinate is the displayed rank (capped at `dims[0]`, impressions below
/// it dropped) and every extra coordinate is drawn uniformly once per
/// session, like a device type that stays fixed within a session.
pub fn tag_log(log: &SessionLog, dims: &[usize], seed: u64) -> Result<Vec<TaggedImpression>> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidArgument(
            "configuration dimensions must be positive".into(),
        ));
    }
    let layout = log.layout();
    let base = StreamKey::new(seed).with(domain::SAMPLE);
    let mut out = Vec::new();
    let mut current: Option<(u32, Vec<usize>)> = None;
    for i in 0..log.len() {
        let rank = usize::from(log.rank[i]);
        if rank > dims[0] {
            continue;
        }
        let session = log.session[i];
        if current.as_ref().map(|c| c.0) != Some(session) {
            let mut rng = base.with(u64::from(session)).rng();
            let extra = dims[1..].iter().map(|&d| rng.random_range(0..d)).collect();
            current = Some((session, extra));
        }
        let mut config = vec![rank - 1];
        config.extend_from_slice(&current.as_ref().expect("set above").1);
        out.push(TaggedImpression {
            item: layout.global(log.query[i] as usize, usize::from(log.doc[i])),
            config,
        });
    }
    Ok(out)
}
