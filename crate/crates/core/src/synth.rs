//! Synthetic relevance labels with a known functional form.
//!
//! Raw scores come from either a linear map `wᵀx` or a one-hidden-layer tanh
//! network `W₂ᵀ tanh(W₁ᵀx + b₁) + b₂`, plus Gaussian noise drawn once per
//! query-document pair. The raw scores are then mapped affinely so that the
//! 5th percentile lands on 0 and the 95th on 4, and clipped to `[0, 4]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, LabelTable};
use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};

pub const HIDDEN_WIDTH: usize = 16;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.2;
pub const LABEL_MAX: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelerKind {
    Linear,
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Linear {
        weights: Vec<f64>,
    },
    /// `w1` is `dim × HIDDEN_WIDTH`, row-major.
    Nonlinear {
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLabeler {
    pub generator: Generator,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    // Variance 1/fan_in.
    let limit = (3.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
}

impl SyntheticLabeler {
    /// Draws generator weights from `U(±√(3/fan_in))`.
    pub fn random(kind: LabelerKind, dim: usize, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = StreamKey::new(seed).with(domain::LABEL_WEIGHTS).rng();
        let generator = match kind {
            LabelerKind::Linear => Generator::Linear {
                weights: uniform_fan_in(&mut rng, dim, dim),
            },
            LabelerKind::Nonlinear => Generator::Nonlinear {
                w1: uniform_fan_in(&mut rng, dim, dim * HIDDEN_WIDTH),
                b1: uniform_fan_in(&mut rng, dim, HIDDEN_WIDTH),
                w2: uniform_fan_in(&mut rng, HIDDEN_WIDTH, HIDDEN_WIDTH),
                b2: uniform_fan_in(&mut rng, HIDDEN_WIDTH, 1)[0],
            },
        };
        SyntheticLabeler {
            generator,
            noise_sigma,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.generator {
            Generator::Linear { weights } => weights.len(),
            Generator::Nonlinear { w1, .. } => w1.len() / HIDDEN_WIDTH,
        }
    }

    pub fn kind(&self) -> LabelerKind {
        match self.generator {
            Generator::Linear { .. } => LabelerKind::Linear,
            Generator::Nonlinear { .. } => LabelerKind::Nonlinear,
        }
    }

    /// Generator output without noise.
    pub fn noiseless(&self, x: &[f64]) -> f64 {
        match &self.generator {
            Generator::Linear { weights } => weights.iter().zip(x).map(|(w, v)| w * v).sum(),
            Generator::Nonlinear { w1, b1, w2, b2 } => {
                let mut out = *b2;
                for h in 0..HIDDEN_WIDTH {
                    let mut z = b1[h];
                    for (j, v) in x.iter().enumerate() {
                        z += w1[j * HIDDEN_WIDTH + h] * v;
                    }
                    out += w2[h] * z.tanh();
                }
                out
            }
        }
    }

    /// Unscaled scores with per-pair noise keyed on `(seed, query_id, doc_id)`.
    pub fn raw_scores(&self, ds: &Dataset) -> Result<LabelTable> {
        if ds.feature_dim != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: ds.feature_dim,
            });
        }
        let noise = if self.noise_sigma > 0.0 {
            Some(Normal::new(0.0, self.noise_sigma).map_err(|e| {
                Error::InvalidArgument(format!("noise sigma {}: {e}", self.noise_sigma))
            })?)
        } else {
            None
        };
        let base = StreamKey::new(self.seed).with(domain::LABEL_NOISE);
        Ok(LabelTable::from_fn(ds, |_, _, doc| {
            let xi = noise.as_ref().map_or(0.0, |n| {
                let mut rng = base
                    .with_str(&doc.query_id)
                    .with(u64::from(doc.doc_id))
                    .rng();
                n.sample(&mut rng)
            });
            self.noiseless(&doc.features) + xi
        }))
    }
}

/// Percentile by linear interpolation between closest ranks of the sorted
/// sample (position `p · (n − 1)`).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Affine map sending the 5th percentile to 0 and the 95th to 4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PercentileScaler {
    pub p5: f64,
    pub p95: f64,
}

impl PercentileScaler {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateLabels("non-finite raw label".into()));
        }
        if v.len() < 2 {
            return Err(Error::DegenerateLabels("fewer than two raw labels".into()));
        }
        v.sort_by(f64::total_cmp);
        let p5 = percentile(&v, 0.05);
        let p95 = percentile(&v, 0.95);
        if p95 <= p5 {
            return Err(Error::DegenerateLabels(format!(
                "5th and 95th percentiles coincide at {p5}"
            )));
        }
        Ok(PercentileScaler { p5, p95 })
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        ((v - self.p5) / (self.p95 - self.p5) * LABEL_MAX).clamp(0.0, LABEL_MAX)
    }

    pub fn apply_table(&self, raw: &LabelTable) -> LabelTable {
        raw.map(|v| self.apply(v))
    }
}

/// Scales a raw table using percentiles fitted on itself.
pub fn minmax_percentile_scale(raw: &LabelTable) -> Result<LabelTable> {
    let scaler = PercentileScaler::fit(raw.iter())?;
    Ok(scaler.apply_table(raw))
}

/// Raw scores followed by percentile scaling fitted on `ds` itself.
pub fn generate_labels(ds: &Dataset, gen: &SyntheticLabeler) -> Result<LabelTable> {
    minmax_percentile_scale(&gen.raw_scores(ds)?)
}

/// Labels for several splits, with the scaler fitted on the first (training)
/// split and reused for the rest.
pub fn generate_split_labels(
    splits: &[&Dataset],
    gen: &SyntheticLabeler,
) -> Result<(PercentileScaler, Vec<LabelTable>)> {
    let train = splits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no splits given".into()))?;
    let raw_train = gen.raw_scores(train)?;
    let scaler = PercentileScaler::fit(raw_train.iter())?;
    let mut out = vec![scaler.apply_table(&raw_train)];
    for ds in &splits[1..] {
        out.push(scaler.apply_table(&gen.raw_scores(ds)?));
    }
    Ok((scaler, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Document, Query, Split};
    use proptest::prelude::*;

    fn dataset(features: Vec<Vec<f64>>) -> Dataset {
        let dim = features[0].len();
        let docs = features
            .into_iter()
            .enumerate()
            .map(|(i, f)| Document {
                query_id: "q".into(),
                doc_id: i as u32,
                features: f,
                label: 0,
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

    #[test]
    fn identity_projection() {
        let gen = SyntheticLabeler {
            generator: Generator::Linear {
                weights: vec![1.0, 0.0, 0.0],
            },
            noise_sigma: 0.0,
            seed: 1,
        };
        let ds = dataset(vec![vec![1.5, 7.0, -2.0]]);
        assert_eq!(gen.raw_scores(&ds).unwrap().get(0, 0), 1.5);
    }

    #[test]
    fn zero_network_scores_zero() {
        let gen = SyntheticLabeler {
            generator: Generator::Nonlinear {
                w1: vec![0.0; 2 * HIDDEN_WIDTH],
                b1: vec![0.0; HIDDEN_WIDTH],
                w2: vec![0.0; HIDDEN_WIDTH],
                b2: 0.0,
            },
            noise_sigma: 0.0,
            seed: 1,
        };
        let ds = dataset(vec![vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert!(gen.raw_scores(&ds).unwrap().iter().all(|v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let gen = SyntheticLabeler::random(LabelerKind::Linear, 4, 0.2, 1);
        let ds = dataset(vec![vec![1.0, 2.0]]);
        assert!(matches!(
            gen.raw_scores(&ds),
            Err(Error::DimensionMismatch {
                expected: 4,
                actual: 2
            })
        ));
    }

    #[test]
    fn noise_has_requested_spread() {
        let ds = dataset(vec![vec![0.0]; 100_000]);
        let gen = SyntheticLabeler {
            generator: Generator::Linear { weights: vec![0.0] },
            noise_sigma: DEFAULT_NOISE_SIGMA,
            seed: 42,
        };
        let v: Vec<f64> = gen.raw_scores(&ds).unwrap().iter().collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.195..=0.205).contains(&sd), "sd = {sd}");
    }

    #[test]
    fn scaling_examples() {
        let s = PercentileScaler { p5: 1.0, p95: 3.0 };
        assert_eq!(s.apply(2.0), 2.0);
        assert_eq!(s.apply(3.5), 4.0);
        assert_eq!(s.apply(1.0), 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.05), 1.0);
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert!((percentile(&[0.0, 10.0], 0.05) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_labels_are_degenerate() {
        let raw = LabelTable {
            values: vec![vec![2.0; 10]],
        };
        assert!(matches!(
            minmax_percentile_scale(&raw),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn labels_are_deterministic() {
        let ds = dataset(
            (0..50)
                .map(|i| vec![i as f64 / 10.0, (i % 7) as f64])
                .collect(),
        );
        let gen = SyntheticLabeler::random(LabelerKind::Nonlinear, 2, 0.2, 9);
        let a = generate_labels(&ds, &gen).unwrap();
        let b = generate_labels(&ds, &gen).unwrap();
        let bits = |t: &LabelTable| t.iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn noiseless_linear_labels_are_linear_in_the_interior() {
        let ds = dataset((0..100).map(|i| vec![i as f64 / 10.0, 1.0]).collect());
        let gen = SyntheticLabeler {
            generator: Generator::Linear {
                weights: vec![0.5, 3.0],
            },
            noise_sigma: 0.0,
            seed: 0,
        };
        let labels = generate_labels(&ds, &gen).unwrap();
        let interior: Vec<(f64, f64)> = ds.queries[0]
            .docs
            .iter()
            .zip(&labels.values[0])
            .filter(|(_, &l)| l > 0.0 && l < LABEL_MAX)
            .map(|(d, &l)| (d.features[0], l))
            .collect();
        assert!(interior.len() > 50);
        let slope = (interior[1].1 - interior[0].1) / (interior[1].0 - interior[0].0);
        for w in interior.windows(2) {
            let s = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            assert!((s - slope).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn scaling_is_monotone_and_bounded(raw in prop::collection::vec(-100.0f64..100.0, 2..200)) {
            let table = LabelTable { values: vec![raw.clone()] };
            if let Ok(scaled) = minmax_percentile_scale(&table) {
                for (i, a) in raw.iter().enumerate() {
                    let sa = scaled.get(0, i);
                    prop_assert!((0.0..=LABEL_MAX).contains(&sa));
                    for (j, b) in raw.iter().enumerate() {
                        if a < b {
                            prop_assert!(sa <= scaled.get(0, j));
                        }
                    }
                }
            }
        }
    }
}
