//! LETOR datasets: parsing, preprocessing and per-document value tables.
//!
//! A dataset is an ordered list of queries, each holding its documents in
//! file order. Documents keep the ordinal they had in the file (`doc_id`),
//! so truncation and filtering never renumber them and every tie-break in
//! the crate can fall back on ascending `doc_id`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub query_id: String,
    pub doc_id: u32,
    pub features: Vec<f64>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub docs: Vec<Document>,
}

impl Query {
    pub fn max_label(&self) -> u8 {
        self.docs.iter().map(|d| d.label).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub queries: Vec<Query>,
    pub feature_dim: usize,
    pub split: Split,
}

/// Offsets that flatten `(query index, document position)` into a single
/// document index, in dataset order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    offsets: Vec<usize>,
}

impl Layout {
    pub fn of(ds: &Dataset) -> Self {
        Self::from_counts(ds.queries.iter().map(|q| q.docs.len()))
    }

    /// Layout from the number of documents of each query.
    pub fn from_counts(counts: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for n in counts {
            acc += n;
            offsets.push(acc);
        }
        Layout { offsets }
    }

    #[inline]
    pub fn global(&self, query: usize, doc: usize) -> usize {
        self.offsets[query] + doc
    }

    pub fn n_docs(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn docs_in(&self, query: usize) -> usize {
        self.offsets[query + 1] - self.offsets[query]
    }
}

impl Dataset {
    pub fn new(queries: Vec<Query>, feature_dim: usize, split: Split) -> Self {
        Dataset {
            queries,
            feature_dim,
            split,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.queries.iter().map(|q| q.docs.len()).sum()
    }

    pub fn max_docs_per_query(&self) -> usize {
        self.queries.iter().map(|q| q.docs.len()).max().unwrap_or(0)
    }

    pub fn layout(&self) -> Layout {
        Layout::of(self)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.queries.iter().flat_map(|q| q.docs.iter())
    }

    /// Dense `n_docs × feature_dim` matrix in layout order.
    pub fn feature_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_docs(), self.feature_dim));
        for (row, doc) in self.documents().enumerate() {
            for (j, &v) in doc.features.iter().enumerate() {
                m[[row, j]] = v;
            }
        }
        m
    }

    pub fn query_index(&self) -> HashMap<&str, usize> {
        self.queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.as_str(), i))
            .collect()
    }

    /// Keeps only the listed feature columns, in the given order.
    pub fn select_features(&self, keep: &[usize]) -> Result<Dataset> {
        if keep.is_empty() {
            return Err(Error::InvalidArgument("empty feature list".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&j| j >= self.feature_dim) {
            return Err(Error::InvalidArgument(format!(
                "feature index {bad} out of range for dimension {}",
                self.feature_dim
            )));
        }
        let mut out = self.clone();
        out.feature_dim = keep.len();
        for doc in out.queries.iter_mut().flat_map(|q| q.docs.iter_mut()) {
            doc.features = keep.iter().map(|&j| doc.features[j]).collect();
        }
        Ok(out)
    }
}

fn parse_err(line: usize, message: &str) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

/// Parses LETOR / SVMLight ranking text.
///
/// Lines look like `<label> qid:<id> <fid>:<val> ... [# comment]`. Blank
/// lines and pure comment lines are skipped. Documents are grouped by query
/// in order of first appearance and missing feature ids are zero-filled up to
/// the largest id seen anywhere in the file.
pub fn parse_letor_str(text: &str, split: Split) -> Result<Dataset> {
    struct Row {
        query: usize,
        label: u8,
        sparse: Vec<(usize, f64)>,
    }

    let mut query_ids: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    let mut feature_dim = 0usize;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label_tok = tokens
            .next()
            .ok_or_else(|| parse_err(line_no, "missing label"))?;
        let label_val =
            f64::from_str(label_tok).map_err(|_| parse_err(line_no, "non-numeric label"))?;
        if label_val.fract() != 0.0 || !(0.0..=4.0).contains(&label_val) {
            return Err(parse_err(line_no, "label outside 0..=4"));
        }
        let qid_tok = tokens
            .next()
            .ok_or_else(|| parse_err(line_no, "missing qid"))?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(line_no, "malformed qid"))?;

        let mut sparse = Vec::new();
        for tok in tokens {
            let (fid, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line_no, "malformed feature"))?;
            let fid: usize = fid
                .parse()
                .map_err(|_| parse_err(line_no, "malformed feature id"))?;
            if fid == 0 {
                return Err(parse_err(line_no, "feature ids start at 1"));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(line_no, "non-numeric value"))?;
            feature_dim = feature_dim.max(fid);
            sparse.push((fid - 1, val));
        }

        let query = *by_id.entry(qid.to_string()).or_insert_with(|| {
            query_ids.push(qid.to_string());
            query_ids.len() - 1
        });
        rows.push(Row {
            query,
            label: label_val as u8,
            sparse,
        });
    }

    if rows.is_empty() {
        return Err(Error::EmptyDataset("no documents in input".into()));
    }

    let mut queries: Vec<Query> = query_ids
        .into_iter()
        .map(|id| Query {
            id,
            docs: Vec::new(),
        })
        .collect();
    for row in rows {
        let q = &mut queries[row.query];
        let mut features = vec![0.0; feature_dim];
        for (j, v) in row.sparse {
            features[j] = v;
        }
        let doc_id = q.docs.len() as u32;
        q.docs.push(Document {
            query_id: q.id.clone(),
            doc_id,
            features,
            label: row.label,
        });
    }
    Ok(Dataset::new(queries, feature_dim, split))
}

pub fn parse_letor(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_letor_str(&text, split)
}

/// Writes every feature densely; `parse_letor_str` of the output reproduces
/// the dataset exactly.
pub fn write_letor<W: Write>(ds: &Dataset, out: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    for doc in ds.documents() {
        write!(w, "{} qid:{}", doc.label, doc.query_id)?;
        for (j, v) in doc.features.iter().enumerate() {
            write!(w, " {}:{}", j + 1, v)?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn to_letor_string(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    write_letor(ds, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("letor output is ascii")
}

#[inline]
pub fn log1p_signed(x: f64) -> f64 {
    x.abs().ln_1p().copysign(x)
}

/// Replaces every feature by `ln(1 + |x|) · sign(x)`.
pub fn normalize_log1p(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for doc in out.queries.iter_mut().flat_map(|q| q.docs.iter_mut()) {
        for v in doc.features.iter_mut() {
            *v = log1p_signed(*v);
        }
    }
    out
}

/// Keeps the `k` highest-labelled documents per query (ties: lower `doc_id`
/// first). Surviving documents stay in their original order.
pub fn truncate_top_k(ds: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "truncation depth must be >= 1".into(),
        ));
    }
    let mut out = ds.clone();
    for q in out.queries.iter_mut() {
        if q.docs.len() <= k {
            continue;
        }
        let mut order: Vec<usize> = (0..q.docs.len()).collect();
        order.sort_by(|&a, &b| {
            let (da, db) = (&q.docs[a], &q.docs[b]);
            db.label.cmp(&da.label).then(da.doc_id.cmp(&db.doc_id))
        });
        order.truncate(k);
        order.sort_by_key(|&i| q.docs[i].doc_id);
        let docs = std::mem::take(&mut q.docs);
        let mut keep = vec![false; docs.len()];
        for i in order {
            keep[i] = true;
        }
        q.docs = docs
            .into_iter()
            .zip(keep)
            .filter_map(|(d, k)| k.then_some(d))
            .collect();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropReport {
    pub kept: usize,
    pub removed: usize,
}

impl DropReport {
    pub fn fraction_removed(&self) -> f64 {
        let total = self.kept + self.removed;
        if total == 0 {
            0.0
        } else {
            self.removed as f64 / total as f64
        }
    }
}

/// Removes queries without a single document labelled 1 or higher.
pub fn drop_irrelevant_queries(ds: &Dataset) -> (Dataset, DropReport) {
    let mut out = ds.clone();
    let before = out.queries.len();
    out.queries.retain(|q| q.max_label() >= 1);
    let kept = out.queries.len();
    (
        out,
        DropReport {
            kept,
            removed: before - kept,
        },
    )
}

/// Truncate, drop irrelevant queries, then log1p-normalize.
pub fn preprocess(ds: &Dataset, k: usize) -> Result<(Dataset, DropReport)> {
    let truncated = truncate_top_k(ds, k)?;
    let (filtered, report) = drop_irrelevant_queries(&truncated);
    Ok((normalize_log1p(&filtered), report))
}

/// A real value per document, aligned with a dataset's layout. Used for
/// labels and for policy scores.
#[derive(Clone, Debug, PartialEq)]
pub struct DocValues {
    pub values: Vec<Vec<f64>>,
}

pub type LabelTable = DocValues;
pub type ScoreTable = DocValues;

impl DocValues {
    pub fn from_fn(ds: &Dataset, mut f: impl FnMut(usize, usize, &Document) -> f64) -> Self {
        DocValues {
            values: ds
                .queries
                .iter()
                .enumerate()
                .map(|(qi, q)| {
                    q.docs
                        .iter()
                        .enumerate()
                        .map(|(di, d)| f(qi, di, d))
                        .collect()
                })
                .collect(),
        }
    }

    /// The dataset's graded labels as reals.
    pub fn expert(ds: &Dataset) -> Self {
        Self::from_fn(ds, |_, _, d| f64::from(d.label))
    }

    #[inline]
    pub fn get(&self, query: usize, doc: usize) -> f64 {
        self.values[query][doc]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flat_map(|r| r.iter().copied())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DocValues {
            values: self
                .values
                .iter()
                .map(|r| r.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    pub fn check_aligned(&self, ds: &Dataset) -> Result<()> {
        let ok = self.values.len() == ds.queries.len()
            && self
                .values
                .iter()
                .zip(&ds.queries)
                .all(|(r, q)| r.len() == q.docs.len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "value table does not match dataset layout".into(),
            ))
        }
    }

    /// `query_id,doc_id,<column>` rows.
    pub fn write_csv<W: Write>(&self, ds: &Dataset, column: &str, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["query_id", "doc_id", column])?;
        for (q, row) in ds.queries.iter().zip(&self.values) {
            for (d, v) in q.docs.iter().zip(row) {
                w.write_record([q.id.clone(), d.doc_id.to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Reads a table written by [`DocValues::write_csv`]; every document of
    /// `ds` must be present.
    pub fn read_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let mut map: HashMap<(String, u32), f64> = HashMap::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = || parse_err(i + 2, "malformed value row");
            let q = rec.get(0).ok_or_else(bad)?.to_string();
            let d: u32 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let v: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            map.insert((q, d), v);
        }
        let mut missing = None;
        let table = Self::from_fn(ds, |_, _, doc| {
            match map.get(&(doc.query_id.clone(), doc.doc_id)) {
                Some(&v) => v,
                None => {
                    missing.get_or_insert((doc.query_id.clone(), doc.doc_id));
                    f64::NAN
                }
            }
        });
        match missing {
            Some((query_id, doc_id)) => Err(Error::UnknownPair { query_id, doc_id }),
            None => Ok(table),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(text: &str) -> Dataset {
        parse_letor_str(text, Split::Train).unwrap()
    }

    #[test]
    fn parses_sparse_line() {
        let d = ds("2 qid:7 1:0.5 3:-1.0\n");
        assert_eq!(d.feature_dim, 3);
        let doc = &d.queries[0].docs[0];
        assert_eq!(doc.query_id, "7");
        assert_eq!(doc.features, vec![0.5, 0.0, -1.0]);
        assert_eq!(doc.label, 2);
    }

    #[test]
    fn groups_by_query() {
        let d = ds("1 qid:7 1:1\n0 qid:7 1:2 # trailing comment\n");
        assert_eq!(d.queries.len(), 1);
        assert_eq!(d.queries[0].docs.len(), 2);
        assert_eq!(d.queries[0].docs[1].doc_id, 1);
    }

    #[test]
    fn interleaved_queries_keep_first_appearance_order() {
        let d = ds("1 qid:b 1:1\n0 qid:a 1:2\n3 qid:b 1:3\n");
        let ids: Vec<_> = d.queries.iter().map(|q| q.id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
        assert_eq!(d.queries[0].docs[1].label, 3);
    }

    #[test]
    fn reports_bad_label() {
        let err = parse_letor_str("x qid:7 1:0.5\n", Split::Train).unwrap_err();
        assert_eq!(err.to_string(), "non-numeric label at line 1");
    }

    #[test]
    fn reports_bad_value_with_line_number() {
        let err = parse_letor_str("1 qid:1 1:0.5\n\n1 qid:1 2:abc\n", Split::Train).unwrap_err();
        assert_eq!(err.to_string(), "non-numeric value at line 3");
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in [
            "1 7 1:0.5",
            "1 qid:1 1=0.5",
            "1 qid:1 0:1",
            "5 qid:1 1:1",
            "1",
        ] {
            assert!(matches!(
                parse_letor_str(bad, Split::Train),
                Err(Error::Parse { line: 1, .. })
            ));
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            parse_letor_str("# only a comment\n\n", Split::Train),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn log1p_examples() {
        assert_eq!(log1p_signed(0.0), 0.0);
        assert!((log1p_signed(9.0) - 10f64.ln()).abs() < 1e-15);
        assert!((log1p_signed(-(std::f64::consts::E - 1.0)) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncation_keeps_highest_labels() {
        let text: String = (0..30)
            .map(|i| format!("{} qid:1 1:{i}\n", (i * 7) % 5))
            .collect();
        let d = ds(&text);
        let t = truncate_top_k(&d, 25).unwrap();
        let kept = &t.queries[0].docs;
        assert_eq!(kept.len(), 25);
        let min_kept = kept.iter().map(|d| d.label).min().unwrap();
        let kept_ids: Vec<u32> = kept.iter().map(|d| d.doc_id).collect();
        for doc in &d.queries[0].docs {
            if !kept_ids.contains(&doc.doc_id) {
                assert!(doc.label <= min_kept);
            }
        }
    }

    #[test]
    fn truncation_below_threshold_is_noop() {
        let text: String = (0..10)
            .map(|i| format!("{} qid:1 1:{i}\n", i % 5))
            .collect();
        let d = ds(&text);
        assert_eq!(truncate_top_k(&d, 25).unwrap(), d);
    }

    #[test]
    fn truncation_tie_break_by_doc_id() {
        let mut d = ds("3 qid:1 1:1\n3 qid:1 1:2\n1 qid:1 1:3\n");
        for (doc, id) in d.queries[0].docs.iter_mut().zip([5, 2, 9]) {
            doc.doc_id = id;
        }
        let t = truncate_top_k(&d, 2).unwrap();
        let mut ids: Vec<u32> = t.queries[0].docs.iter().map(|d| d.doc_id).collect();
        ids.sort();
        assert_eq!(ids, [2, 5]);
    }

    #[test]
    fn drop_irrelevant() {
        let d =
            ds("0 qid:1 1:1\n0 qid:1 1:1\n0 qid:1 1:1\n0 qid:2 1:1\n1 qid:2 1:1\n0 qid:2 1:1\n");
        let (out, rep) = drop_irrelevant_queries(&d);
        assert_eq!(out.queries.len(), 1);
        assert_eq!(out.queries[0].id, "2");
        assert_eq!(rep.fraction_removed(), 0.5);

        let empty = Dataset::new(vec![], 3, Split::Train);
        let (out, rep) = drop_irrelevant_queries(&empty);
        assert!(out.queries.is_empty());
        assert_eq!(rep.fraction_removed(), 0.0);
    }

    #[test]
    fn select_features_projects_columns() {
        let d = ds("1 qid:1 1:1 2:2 3:3\n");
        let p = d.select_features(&[0]).unwrap();
        assert_eq!(p.feature_dim, 1);
        assert_eq!(p.queries[0].docs[0].features, vec![1.0]);
        assert_eq!(d.select_features(&[0, 1, 2]).unwrap(), d);
        assert!(d.select_features(&[]).is_err());
        assert!(d.select_features(&[3]).is_err());
    }

    #[test]
    fn value_table_csv_round_trip() {
        let d = ds("1 qid:a 1:1\n0 qid:a 1:2\n2 qid:b 1:3\n");
        let t = DocValues::from_fn(&d, |q, i, _| q as f64 * 0.1 + i as f64 / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        t.write_csv(&d, "label", std::fs::File::create(&path).unwrap())
            .unwrap();
        assert_eq!(DocValues::read_csv(&d, &path).unwrap(), t);
    }
}
