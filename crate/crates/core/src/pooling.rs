//! Sequence aggregation: [EOS] token, single learnable query, or average over
//! valid positions, followed by L2 normalization.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::encoder::{HiddenStates, MASK_BIAS};
use crate::numcore::{Graph, Matrix, NodeId, NumError};

pub const QUERY_PARAM: &str = "pooling.query";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("no valid positions to pool")]
    EmptySequence,
    #[error("pooled vector has zero norm")]
    Degenerate,
    #[error("EOS index {0} is not a valid position")]
    EosOutOfRange(usize),
    #[error("query pooling needs a 1 x {0} query vector")]
    MissingQuery(usize),
    #[error("unknown pooling strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Num(NumError),
}

impl From<NumError> for PoolError {
    fn from(e: NumError) -> Self {
        match e {
            NumError::Degenerate(_) => PoolError::Degenerate,
            NumError::Empty(_) => PoolError::EmptySequence,
            other => PoolError::Num(other),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingStrategy {
    Eos,
    Query,
    Average,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 3] = [PoolingStrategy::Eos, PoolingStrategy::Query, PoolingStrategy::Average];

    pub fn name(self) -> &'static str {
        match self {
            PoolingStrategy::Eos => "eos",
            PoolingStrategy::Query => "query",
            PoolingStrategy::Average => "average",
        }
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingStrategy {
    type Err = PoolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PoolingStrategy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PoolError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingConfig {
    strategy: PoolingStrategy,
    query: Option<Matrix>,
}

impl PoolingConfig {
    /// Query pooling gets a `1 x d` query drawn from N(0, 0.02²).
    pub fn new(strategy: PoolingStrategy, d: usize, seed: u64) -> Self {
        let query = (strategy == PoolingStrategy::Query).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 0.02).expect("positive std");
            Matrix::new(1, d, (0..d).map(|_| normal.sample(&mut rng)).collect()).expect("sized")
        });
        Self { strategy, query }
    }

    pub fn with_query(query: Matrix) -> Result<Self, PoolError> {
        if query.rows() != 1 || !query.is_finite() {
            return Err(PoolError::MissingQuery(query.cols()));
        }
        Ok(Self {
            strategy: PoolingStrategy::Query,
            query: Some(query),
        })
    }

    pub fn strategy(&self) -> PoolingStrategy {
        self.strategy
    }

    pub fn query(&self) -> Option<&Matrix> {
        self.query.as_ref()
    }

    pub fn query_mut(&mut self) -> Option<&mut Matrix> {
        self.query.as_mut()
    }
}

/// Pools `states` (T x d) into a unit-norm `1 x d` node.
pub fn pool_node(
    g: &mut Graph<'_>,
    states: NodeId,
    mask: &[bool],
    eos_index: usize,
    strategy: PoolingStrategy,
    query: Option<NodeId>,
) -> Result<NodeId, PoolError> {
    let (t, d) = g.value(states).shape();
    if mask.len() != t {
        return Err(PoolError::Num(NumError::Shape(format!("mask has {} entries for {t} rows", mask.len()))));
    }
    if !mask.iter().any(|&m| m) {
        return Err(PoolError::EmptySequence);
    }
    let pooled = match strategy {
        PoolingStrategy::Eos => {
            if !mask.get(eos_index).copied().unwrap_or(false) {
                return Err(PoolError::EosOutOfRange(eos_index));
            }
            g.slice_row(states, eos_index)?
        }
        PoolingStrategy::Average => g.masked_mean_rows(states, mask.to_vec())?,
        PoolingStrategy::Query => {
            let q = query.ok_or(PoolError::MissingQuery(d))?;
            if g.value(q).shape() != (1, d) {
                return Err(PoolError::MissingQuery(d));
            }
            let scores = g.matmul_nt(q, states)?;
            let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
            if mask.iter().any(|&m| !m) {
                let bias = mask.iter().map(|&m| if m { 0.0 } else { MASK_BIAS }).collect::<Vec<_>>();
                let bias = g.constant(Matrix::row_vector(&bias))?;
                scores = g.add(scores, bias)?;
            }
            let weights = g.softmax_rows(scores)?;
            g.matmul(weights, states)?
        }
    };
    Ok(g.l2_normalize_rows(pooled)?)
}

/// Aggregates hidden states into a unit-norm embedding.
pub fn pool(h: &HiddenStates, cfg: &PoolingConfig) -> Result<Embedding, PoolError> {
    let mut g = Graph::new();
    let states = g.constant(&h.states)?;
    let query = cfg.query().map(|q| g.constant(q)).transpose()?;
    let out = pool_node(&mut g, states, &h.mask, h.eos_index, cfg.strategy, query)?;
    Ok(Embedding::from_unit(g.value(out).data().to_vec(), 1e-12).expect("normalized by graph"))
}
