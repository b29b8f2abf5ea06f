//! The small bundled LETOR corpus and the generator that produced it.
//!
//! Each document has a latent quality `z`. Six features are heavy-tailed
//! non-negative counts driven by `z` and a query effect, four are signed
//! reals with weaker dependence. The grade is a noisy rounding of `z`, so the
//! features predict it well but not perfectly. A few training queries have
//! only zero grades and are removed by preprocessing.

use rand_distr::{Distribution, Normal};

use crate::data::{parse_letor_str, Dataset, Document, Query, Split};
use crate::error::Result;
use crate::rng::StreamKey;

pub const FEATURE_DIM: usize = 10;
pub const DOCS_PER_QUERY: usize = 10;
/// Training queries left after dropping the all-zero ones.
pub const TRAIN_QUERIES: usize = 100;
pub const ZERO_QUERIES: usize = 3;
pub const HELDOUT_QUERIES: usize = 30;
pub const SEED: u64 = 20_250_501;

const TRAIN_TEXT: &str = include_str!("../data/train.txt");
const VALI_TEXT: &str = include_str!("../data/vali.txt");
const TEST_TEXT: &str = include_str!("../data/test.txt");

/// Raw (unnormalized) bundled split.
pub fn bundled(split: Split) -> Result<Dataset> {
    let text = match split {
        Split::Train => TRAIN_TEXT,
        Split::Validation => VALI_TEXT,
        Split::Test => TEST_TEXT,
    };
    parse_letor_str(text, split)
}

const COUNT_LOADINGS: [f64; 6] = [1.0, 0.8, 0.6, 0.5, 0.3, 0.15];
const REAL_LOADINGS: [f64; 4] = [0.7, -0.5, 0.3, 0.0];

fn document(
    key: StreamKey,
    query_id: &str,
    doc_id: u32,
    query_effect: f64,
    zero: bool,
) -> Document {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = key.rng();
    let z: f64 = normal.sample(&mut rng);
    let mut features = Vec::with_capacity(FEATURE_DIM);
    for a in COUNT_LOADINGS {
        let e: f64 = normal.sample(&mut rng);
        features.push((2.5 + 1.5 * a * (z + query_effect) + 0.8 * e).exp().round());
    }
    for b in REAL_LOADINGS {
        let e: f64 = normal.sample(&mut rng);
        features.push(((b * z + e) * 20_000.0).round() / 1000.0);
    }
    let e: f64 = normal.sample(&mut rng);
    let grade = (1.0 + z + 0.6 * e).round().clamp(0.0, 4.0);
    Document {
        query_id: query_id.to_string(),
        doc_id,
        features,
        label: if zero { 0 } else { grade as u8 },
    }
}

/// Regenerates one raw split of the bundled corpus.
pub fn generate(split: Split) -> Dataset {
    let (tag, n, zeros) = match split {
        Split::Train => (1u64, TRAIN_QUERIES + ZERO_QUERIES, ZERO_QUERIES),
        Split::Validation => (2, HELDOUT_QUERIES, 0),
        Split::Test => (3, HELDOUT_QUERIES, 0),
    };
    let normal = Normal::new(0.0, 0.5).expect("normal");
    let base = StreamKey::new(SEED).with(tag);
    // All-zero queries are spread through the file rather than bunched.
    let zero_at =
        |q: usize| zeros > 0 && q % (n / zeros) == n / zeros / 2 && q / (n / zeros) < zeros;
    let queries = (0..n)
        .map(|q| {
            let id = format!("{}", tag * 1000 + q as u64);
            let qkey = base.with(q as u64);
            let effect = normal.sample(&mut qkey.rng());
            let docs = (0..DOCS_PER_QUERY as u32)
                .map(|d| document(qkey.with(u64::from(d) + 1), &id, d, effect, zero_at(q)))
                .collect();
            Query { id, docs }
        })
        .collect();
    Dataset::new(queries, FEATURE_DIM, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preprocess, to_letor_string};

    #[test]
    fn bundled_files_match_generator() {
        for split in [Split::Train, Split::Validation, Split::Test] {
            assert_eq!(bundled(split).unwrap(), generate(split), "{split}");
        }
    }

    #[test]
    fn shape_after_preprocessing() {
        let (train, report) = preprocess(&bundled(Split::Train).unwrap(), 25).unwrap();
        assert_eq!(report.removed, ZERO_QUERIES);
        assert_eq!(train.queries.len(), TRAIN_QUERIES);
        assert!(train.queries.iter().all(|q| q.docs.len() == DOCS_PER_QUERY));
        assert_eq!(train.feature_dim, FEATURE_DIM);
        let labels: Vec<u8> = train.documents().map(|d| d.label).collect();
        for g in 0..=4u8 {
            assert!(labels.contains(&g), "grade {g} missing");
        }
    }

    #[test]
    #[ignore = "rewrites crates/core/data"]
    fn write_bundled_files() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
        std::fs::create_dir_all(dir).unwrap();
        for (split, name) in [
            (Split::Train, "train.txt"),
            (Split::Validation, "vali.txt"),
            (Split::Test, "test.txt"),
        ] {
            std::fs::write(format!("{dir}/{name}"), to_letor_string(&generate(split))).unwrap();
        }
    }
}
