//! Additive two-tower click model.
//!
//! The click logit of a document at rank `k` is `θ_k + r(q, d)`: one bias
//! logit per rank plus the output of a relevance tower. Everything trainable
//! is stored as named [`Tensor`]s so that the optimizer, the finite
//! difference checks and the parameter dump treat all variants alike.

mod loss;
mod optim;
mod params;
mod towers;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::data::{Dataset, ScoreTable};
use crate::error::{Error, Result};

pub use loss::{
    evaluate, gradients, ips_nll_loss, loss_value, nll_loss, Gradients, LossKind, Observations,
    Weighting, Workspace, PROB_CLAMP,
};
pub use optim::AdamW;
pub use params::{read_params, write_params};
pub use towers::{Embedding, Linear, Mlp, RelevanceTower, TowerCache, MLP_HIDDEN};
pub use train::{
    train, EarlyStopping, EpochRecord, StopSignal, TrainConfig, TrainTrace,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.to_string(),
            shape,
            data: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TowerKind {
    Embedding,
    Linear,
    Mlp,
}

impl fmt::Display for TowerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TowerKind::Embedding => "embedding",
            TowerKind::Linear => "linear",
            TowerKind::Mlp => "mlp",
        })
    }
}

impl FromStr for TowerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(TowerKind::Embedding),
            "linear" => Ok(TowerKind::Linear),
            "mlp" => Ok(TowerKind::Mlp),
            other => Err(Error::InvalidArgument(format!("unknown tower '{other}'"))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One logit per rank, `theta[k - 1]` for rank `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasTower {
    pub theta: Tensor,
}

impl BiasTower {
    pub fn zeros(max_rank: usize) -> Self {
        BiasTower {
            theta: Tensor::zeros("bias.theta", vec![max_rank]),
        }
    }

    pub fn max_rank(&self) -> usize {
        self.theta.data.len()
    }

    #[inline]
    pub fn logit(&self, rank: usize) -> f64 {
        self.theta.data[rank - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoTowerModel {
    pub bias: BiasTower,
    pub relevance: RelevanceTower,
}

impl TwoTowerModel {
    /// Fresh model: zero bias logits; relevance initialised per variant. The
    /// embedding variant gets one zero logit per document of `ds`.
    pub fn new(kind: TowerKind, ds: &Dataset, max_rank: usize, seed: u64) -> Self {
        let relevance = match kind {
            TowerKind::Embedding => RelevanceTower::Embedding(Embedding::for_dataset(ds)),
            TowerKind::Linear => RelevanceTower::Linear(Linear::new(ds.feature_dim, seed)),
            TowerKind::Mlp => RelevanceTower::Mlp(Mlp::new(ds.feature_dim, seed)),
        };
        TwoTowerModel {
            bias: BiasTower::zeros(max_rank),
            relevance,
        }
    }

    pub fn kind(&self) -> TowerKind {
        self.relevance.kind()
    }

    pub fn max_rank(&self) -> usize {
        self.bias.max_rank()
    }

    pub fn theta(&self) -> &[f64] {
        &self.bias.theta.data
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.bias.theta];
        v.extend(self.relevance.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.bias.theta];
        v.extend(self.relevance.tensors_mut());
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Relevance logit of a single document.
    pub fn relevance_logit(&self, query_id: &str, doc_id: u32, features: &[f64]) -> Result<f64> {
        match &self.relevance {
            RelevanceTower::Embedding(e) => Ok(e.gamma.data[e.index_of(query_id, doc_id)?]),
            tower => {
                let dim = tower.feature_dim().unwrap_or(0);
                if features.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: features.len(),
                    });
                }
                let row =
                    Array2::from_shape_vec((1, dim), features.to_vec()).expect("one feature row");
                Ok(tower.forward(&[0], &row).0[0])
            }
        }
    }

    /// `σ(θ_rank + r(q, d))`.
    pub fn click_probability(
        &self,
        query_id: &str,
        doc_id: u32,
        features: &[f64],
        rank: usize,
    ) -> Result<f64> {
        if rank == 0 || rank > self.max_rank() {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside 1..={}",
                self.max_rank()
            )));
        }
        let r = self.relevance_logit(query_id, doc_id, features)?;
        Ok(sigmoid(self.bias.logit(rank) + r))
    }

    /// Relevance logits for every document of `ds`.
    pub fn relevance_scores(&self, ds: &Dataset) -> Result<ScoreTable> {
        match &self.relevance {
            RelevanceTower::Embedding(e) => {
                let mut err = None;
                let table =
                    ScoreTable::from_fn(ds, |_, _, d| match e.index_of(&d.query_id, d.doc_id) {
                        Ok(i) => e.gamma.data[i],
                        Err(x) => {
                            err.get_or_insert(x);
                            f64::NAN
                        }
                    });
                err.map_or(Ok(table), Err)
            }
            tower => {
                let dim = tower.feature_dim().unwrap_or(0);
                if ds.feature_dim != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: ds.feature_dim,
                    });
                }
                let feats = ds.feature_matrix();
                let all: Vec<usize> = (0..ds.n_docs()).collect();
                let out = tower.forward(&all, &feats).0;
                let layout = ds.layout();
                Ok(ScoreTable::from_fn(ds, |q, i, _| out[layout.global(q, i)]))
            }
        }
    }

    /// Checks that the model can be trained on documents of `ds`: feature
    /// dimension for feature towers, identical pair layout for embeddings.
    pub fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        match &self.relevance {
            RelevanceTower::Embedding(e) => {
                if e.matches_layout(ds) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(
                        "embedding tower was built for a different dataset".into(),
                    ))
                }
            }
            tower => {
                let dim = tower.feature_dim().unwrap_or(0);
                if dim == ds.feature_dim {
                    Ok(())
                } else {
                    Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: ds.feature_dim,
                    })
                }
            }
        }
    }
}
