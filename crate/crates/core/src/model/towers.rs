//! Relevance towers: one free logit per pair, a linear map, or a small MLP.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::{Tensor, TowerKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::StreamKey;

pub const MLP_HIDDEN: usize = 32;

fn uniform_tensor<R: Rng>(rng: &mut R, name: &str, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor {
        name: name.to_string(),
        shape,
        data: (0..n).map(|_| rng.random_range(-limit..=limit)).collect(),
    }
}

/// One logit per query-document pair seen at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub gamma: Tensor,
    keys: Vec<(String, u32)>,
    index: HashMap<(String, u32), usize>,
}

impl Embedding {
    /// Zero-initialised logits for every document of `ds`, indexed in layout
    /// order.
    pub fn for_dataset(ds: &Dataset) -> Self {
        let keys = ds
            .documents()
            .map(|d| (d.query_id.clone(), d.doc_id))
            .collect();
        Self::from_keys(keys, None)
    }

    pub(crate) fn from_keys(keys: Vec<(String, u32)>, values: Option<Vec<f64>>) -> Self {
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        let n = keys.len();
        Embedding {
            gamma: Tensor {
                name: "relevance.gamma".into(),
                shape: vec![n],
                data: values.unwrap_or_else(|| vec![0.0; n]),
            },
            keys,
            index,
        }
    }

    pub fn keys(&self) -> &[(String, u32)] {
        &self.keys
    }

    pub fn index_of(&self, query_id: &str, doc_id: u32) -> Result<usize> {
        self.index
            .get(&(query_id.to_string(), doc_id))
            .copied()
            .ok_or_else(|| Error::UnknownPair {
                query_id: query_id.to_string(),
                doc_id,
            })
    }

    /// True when this embedding was built over exactly `ds`'s pairs in
    /// layout order, so global document indices can be used directly.
    pub fn matches_layout(&self, ds: &Dataset) -> bool {
        self.keys.len() == ds.n_docs()
            && ds
                .documents()
                .zip(&self.keys)
                .all(|(d, (q, id))| &d.query_id == q && d.doc_id == *id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub intercept: Tensor,
}

impl Linear {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = StreamKey::new(seed).with(crate::rng::domain::INIT).rng();
        Linear {
            weight: uniform_tensor(&mut rng, "relevance.weight", vec![dim], dim),
            intercept: Tensor::zeros("relevance.intercept", vec![1]),
        }
    }
}

/// Two hidden ELU layers and a scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl Mlp {
    pub fn new(dim: usize, seed: u64) -> Self {
        let h = MLP_HIDDEN;
        let mut rng = StreamKey::new(seed).with(crate::rng::domain::INIT).rng();
        Mlp {
            w1: uniform_tensor(&mut rng, "relevance.w1", vec![dim, h], dim),
            b1: uniform_tensor(&mut rng, "relevance.b1", vec![h], dim),
            w2: uniform_tensor(&mut rng, "relevance.w2", vec![h, h], h),
            b2: uniform_tensor(&mut rng, "relevance.b2", vec![h], h),
            w3: uniform_tensor(&mut rng, "relevance.w3", vec![h], h),
            b3: uniform_tensor(&mut rng, "relevance.b3", vec![1], h),
        }
    }

    fn mat(t: &Tensor) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("tensor shape")
    }

    fn vec(t: &Tensor) -> ArrayView1<'_, f64> {
        ArrayView1::from(&t.data[..])
    }
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RelevanceTower {
    Embedding(Embedding),
    Linear(Linear),
    Mlp(Mlp),
}

/// Intermediate activations kept for the backward pass.
pub enum TowerCache {
    None,
    Mlp {
        x: Array2<f64>,
        z1: Array2<f64>,
        h1: Array2<f64>,
        z2: Array2<f64>,
        h2: Array2<f64>,
    },
}

impl RelevanceTower {
    pub fn kind(&self) -> TowerKind {
        match self {
            RelevanceTower::Embedding(_) => TowerKind::Embedding,
            RelevanceTower::Linear(_) => TowerKind::Linear,
            RelevanceTower::Mlp(_) => TowerKind::Mlp,
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            RelevanceTower::Embedding(_) => None,
            RelevanceTower::Linear(l) => Some(l.weight.shape[0]),
            RelevanceTower::Mlp(m) => Some(m.w1.shape[0]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            RelevanceTower::Embedding(e) => vec![&e.gamma],
            RelevanceTower::Linear(l) => vec![&l.weight, &l.intercept],
            RelevanceTower::Mlp(m) => vec![&m.w1, &m.b1, &m.w2, &m.b2, &m.w3, &m.b3],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            RelevanceTower::Embedding(e) => vec![&mut e.gamma],
            RelevanceTower::Linear(l) => vec![&mut l.weight, &mut l.intercept],
            RelevanceTower::Mlp(m) => vec![
                &mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2, &mut m.w3, &mut m.b3,
            ],
        }
    }

    /// Outputs for the given global document indices. `features` rows are
    /// indexed by the same global indices; the embedding ignores them.
    pub fn forward(&self, docs: &[usize], features: &Array2<f64>) -> (Vec<f64>, TowerCache) {
        match self {
            RelevanceTower::Embedding(e) => (
                docs.iter().map(|&d| e.gamma.data[d]).collect(),
                TowerCache::None,
            ),
            RelevanceTower::Linear(l) => {
                let b = l.intercept.data[0];
                let out = docs
                    .iter()
                    .map(|&d| {
                        let row = features.row(d);
                        b + row
                            .iter()
                            .zip(&l.weight.data)
                            .map(|(x, w)| x * w)
                            .sum::<f64>()
                    })
                    .collect();
                (out, TowerCache::None)
            }
            RelevanceTower::Mlp(m) => {
                let x = features.select(Axis(0), docs);
                let mut z1 = x.dot(&Mlp::mat(&m.w1));
                z1 += &Mlp::vec(&m.b1);
                let h1 = z1.mapv(elu);
                let mut z2 = h1.dot(&Mlp::mat(&m.w2));
                z2 += &Mlp::vec(&m.b2);
                let h2 = z2.mapv(elu);
                let out = h2.dot(&Mlp::vec(&m.w3)) + m.b3.data[0];
                (out.to_vec(), TowerCache::Mlp { x, z1, h1, z2, h2 })
            }
        }
    }

    /// Accumulates `∂loss/∂params` into `grads` (one buffer per tensor, in
    /// [`RelevanceTower::tensors`] order) given `∂loss/∂output` per document.
    pub fn backward(
        &self,
        cache: &TowerCache,
        docs: &[usize],
        features: &Array2<f64>,
        d_out: &[f64],
        grads: &mut [Vec<f64>],
    ) {
        match (self, cache) {
            (RelevanceTower::Embedding(_), _) => {
                for (&d, &g) in docs.iter().zip(d_out) {
                    grads[0][d] += g;
                }
            }
            (RelevanceTower::Linear(_), _) => {
                let (gw, rest) = grads.split_at_mut(1);
                for (&d, &g) in docs.iter().zip(d_out) {
                    for (acc, x) in gw[0].iter_mut().zip(features.row(d)) {
                        *acc += g * x;
                    }
                    rest[0][0] += g;
                }
            }
            (RelevanceTower::Mlp(m), TowerCache::Mlp { x, z1, h1, z2, h2 }) => {
                let dout = ArrayView1::from(d_out);
                let add = |buf: &mut Vec<f64>, src: &[f64]| {
                    for (a, s) in buf.iter_mut().zip(src) {
                        *a += s;
                    }
                };
                let dw3 = h2.t().dot(&dout);
                add(&mut grads[4], dw3.as_slice().expect("contiguous"));
                grads[5][0] += dout.sum();

                let w3 = Mlp::vec(&m.w3);
                let mut dz2 = Array2::zeros(z2.raw_dim());
                for ((mut row, z), g) in dz2
                    .axis_iter_mut(Axis(0))
                    .zip(z2.axis_iter(Axis(0)))
                    .zip(dout.iter())
                {
                    for ((r, zv), wv) in row.iter_mut().zip(z.iter()).zip(w3.iter()) {
                        *r = g * wv * elu_grad(*zv);
                    }
                }
                let dw2 = h1.t().dot(&dz2);
                add(
                    &mut grads[2],
                    dw2.as_standard_layout().as_slice().expect("contiguous"),
                );
                let db2: Array1<f64> = dz2.sum_axis(Axis(0));
                add(&mut grads[3], db2.as_slice().expect("contiguous"));

                let mut dz1 = dz2.dot(&Mlp::mat(&m.w2).t());
                dz1.zip_mut_with(z1, |g, &z| *g *= elu_grad(z));
                let dw1 = x.t().dot(&dz1);
                add(
                    &mut grads[0],
                    dw1.as_standard_layout().as_slice().expect("contiguous"),
                );
                let db1: Array1<f64> = dz1.sum_axis(Axis(0));
                add(&mut grads[1], db1.as_slice().expect("contiguous"));
            }
            (RelevanceTower::Mlp(_), TowerCache::None) => {
                panic!("mlp backward requires the forward cache")
            }
        }
    }
}
