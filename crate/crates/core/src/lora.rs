//! Low-rank adaptation: a frozen base `W₀` (d x k) plus a trainable delta
//! `ΔW = (α/r)·B·A` with `B` (d x r) and `A` (r x k). Row-vector inputs, so
//! an adapted layer computes `x·W₀ + (α/r)·(x·B)·A`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::encoder::{EncoderParams, LinearNodes};
use crate::numcore::{Graph, Matrix, NodeId, NumError};
use crate::pooling::{PoolingConfig, PoolingStrategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoraError {
    #[error("rank {rank} exceeds min(d, k) = {limit} for {target}")]
    Rank { rank: usize, limit: usize, target: String },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("alpha must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("no base matrix named {0:?}")]
    UnknownTarget(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    a: Matrix,
    b: Matrix,
    alpha: f64,
    rank: usize,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, a: Matrix, b: Matrix, alpha: f64) -> Result<Self, LoraError> {
        let target = target.into();
        let rank = a.rows();
        if rank == 0 {
            return Err(LoraError::ZeroRank);
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LoraError::Alpha(alpha));
        }
        if b.cols() != rank {
            return Err(LoraError::Shape(format!(
                "B is {}x{} but A has {rank} rows",
                b.rows(),
                b.cols()
            )));
        }
        let limit = b.rows().min(a.cols());
        if rank > limit {
            return Err(LoraError::Rank { rank, limit, target });
        }
        Ok(Self {
            target,
            a,
            b,
            alpha,
            rank,
        })
    }

    /// `α / r`
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    fn check_base(&self, w0: &Matrix) -> Result<(), LoraError> {
        if w0.shape() != (self.b.rows(), self.a.cols()) {
            return Err(LoraError::Shape(format!(
                "base {:?} vs adapter {}x{}",
                w0.shape(),
                self.b.rows(),
                self.a.cols()
            )));
        }
        Ok(())
    }
}

/// One adapter per adapted base matrix.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LoraSet {
    adapters: BTreeMap<String, LoraAdapter>,
}

impl LoraSet {
    pub fn from_adapters(adapters: impl IntoIterator<Item = LoraAdapter>) -> Self {
        Self {
            adapters: adapters.into_iter().map(|a| (a.target.clone(), a)).collect(),
        }
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn get_mut(&mut self, target: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(target)
    }

    /// Target-name ordered.
    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn coverage(&self) -> Vec<&str> {
        self.adapters.keys().map(String::as_str).collect()
    }

    /// Every attention and MLP matrix of the trunk has exactly one adapter.
    pub fn is_full_coverage(&self, params: &EncoderParams) -> bool {
        let targets = params.config().adapted_matrix_names();
        targets.len() == self.adapters.len() && targets.iter().all(|t| self.adapters.contains_key(t))
    }

    /// Resolves a `lora.<target>.A` / `lora.<target>.B` parameter name.
    pub fn matrix_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let rest = name.strip_prefix("lora.")?;
        if let Some(target) = rest.strip_suffix(".A") {
            return self.adapters.get_mut(target).map(|a| &mut a.a);
        }
        let target = rest.strip_suffix(".B")?;
        self.adapters.get_mut(target).map(|a| &mut a.b)
    }

    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        let rest = name.strip_prefix("lora.")?;
        if let Some(target) = rest.strip_suffix(".A") {
            return self.adapters.get(target).map(|a| &a.a);
        }
        let target = rest.strip_suffix(".B")?;
        self.adapters.get(target).map(|a| &a.b)
    }
}

/// Creates one adapter for every attention and MLP matrix: `A ~ N(0, 1/r)`,
/// `B = 0`, so the adapted model starts out identical to the base.
pub fn attach(params: &EncoderParams, rank: usize, alpha: f64, seed: u64) -> Result<LoraSet, LoraError> {
    if rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(LoraError::Alpha(alpha));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("positive std");
    let mut adapters = Vec::new();
    for target in params.config().adapted_matrix_names() {
        let w0 = params
            .get(&target)
            .ok_or_else(|| LoraError::UnknownTarget(target.clone()))?;
        let (d, k) = w0.shape();
        if rank > d.min(k) {
            return Err(LoraError::Rank {
                rank,
                limit: d.min(k),
                target,
            });
        }
        let a_data = (0..rank * k).map(|_| normal.sample(&mut rng)).collect();
        let a = Matrix::new(rank, k, a_data)?;
        adapters.push(LoraAdapter::new(target, a, Matrix::zeros(d, rank), alpha)?);
    }
    Ok(LoraSet::from_adapters(adapters))
}

/// `x·W₀ + (α/r)·(x·B)·A` without forming `B·A`.
pub fn adapted_forward(w0: &Matrix, adapter: &LoraAdapter, x: &Matrix) -> Result<Matrix, LoraError> {
    adapter.check_base(w0)?;
    let mut out = x.matmul(w0)?;
    let low = x.matmul(&adapter.b)?.matmul(&adapter.a)?;
    out.axpy(adapter.scaling(), &low);
    Ok(out)
}

/// Dense `W₀ + (α/r)·B·A`.
pub fn merge(w0: &Matrix, adapter: &LoraAdapter) -> Result<Matrix, LoraError> {
    adapter.check_base(w0)?;
    let mut merged = w0.clone();
    merged.axpy(adapter.scaling(), &adapter.b.matmul(&adapter.a)?);
    Ok(merged)
}

/// Graph form of [`adapted_forward`]; a plain matmul when no adapter is bound.
pub fn adapted_linear(g: &mut Graph<'_>, x: NodeId, linear: &LinearNodes) -> Result<NodeId, NumError> {
    let base = g.matmul(x, linear.base)?;
    let Some(lora) = linear.lora else {
        return Ok(base);
    };
    let down = g.matmul(x, lora.b)?;
    let up = g.matmul(down, lora.a)?;
    let delta = g.scale(up, lora.scaling)?;
    g.add(base, delta)
}

/// Names of the parameters LoRA training updates: every `A` and `B`, plus
/// the pooling query when query pooling is active. Never a base matrix.
pub fn trainable_parameters(set: &LoraSet, pooling: &PoolingConfig) -> Vec<String> {
    let mut names: Vec<String> = set
        .adapters()
        .flat_map(|a| [format!("lora.{}.A", a.target), format!("lora.{}.B", a.target)])
        .collect();
    if pooling.strategy() == PoolingStrategy::Query {
        names.push(crate::pooling::QUERY_PARAM.to_string());
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Matrix::new(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn scaling_factors() {
        let a = Matrix::zeros(16, 64);
        let b = Matrix::zeros(64, 16);
        assert_eq!(LoraAdapter::new("w", a.clone(), b.clone(), 128.0).unwrap().scaling(), 8.0);
        assert_eq!(LoraAdapter::new("w", a.clone(), b.clone(), 16.0).unwrap().scaling(), 1.0);
        assert!(matches!(LoraAdapter::new("w", a, b, 0.0), Err(LoraError::Alpha(_))));
    }

    #[test]
    fn zero_b_is_identity_update() {
        let w0 = seeded(6, 5, 1);
        let adapter = LoraAdapter::new("w", seeded(2, 5, 2), Matrix::zeros(6, 2), 4.0).unwrap();
        let x = seeded(3, 6, 3);
        assert_eq!(adapted_forward(&w0, &adapter, &x).unwrap(), x.matmul(&w0).unwrap());
        assert_eq!(merge(&w0, &adapter).unwrap(), w0);
    }

    #[test]
    fn zero_base_hand_computed() {
        // W0 = 0, alpha = r = 1, A selects column 0 -> output column 1.
        let w0 = Matrix::zeros(2, 2);
        let a = Matrix::from_rows(&[[0.0, 1.0]]);
        let b = Matrix::from_rows(&[[3.0], [5.0]]);
        let adapter = LoraAdapter::new("w", a, b, 1.0).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        // x·B = 13, times A = [0, 13]
        assert_eq!(adapted_forward(&w0, &adapter, &x).unwrap().data(), &[0.0, 13.0]);
    }

    #[test]
    fn matches_dense_materialization() {
        let w0 = seeded(8, 6, 10);
        let adapter = LoraAdapter::new("w", seeded(3, 6, 11), seeded(8, 3, 12), 7.0).unwrap();
        let x = seeded(5, 8, 13);
        let dense = w0.clone();
        let mut delta = adapter.b().matmul(adapter.a()).unwrap();
        delta = delta.scaled(7.0 / 3.0);
        let mut explicit = dense;
        explicit.add_assign(&delta);
        let oracle = x.matmul(&explicit).unwrap();
        assert!(adapted_forward(&w0, &adapter, &x).unwrap().max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn shape_mismatch() {
        let adapter = LoraAdapter::new("w", Matrix::zeros(2, 5), Matrix::zeros(6, 2), 1.0).unwrap();
        let x = Matrix::zeros(1, 6);
        assert!(matches!(adapted_forward(&Matrix::zeros(5, 5), &adapter, &x), Err(LoraError::Shape(_))));
        assert!(matches!(merge(&Matrix::zeros(6, 4), &adapter), Err(LoraError::Shape(_))));
    }

    #[test]
    fn attach_full_coverage_and_rank_limit() {
        let params = EncoderParams::init(EncoderConfig::default(), 0).unwrap();
        let set = attach(&params, 16, 128.0, 1).unwrap();
        assert!(set.is_full_coverage(&params));
        assert_eq!(set.len(), 12);
        assert!(set.adapters().all(|a| a.b().data().iter().all(|&v| v == 0.0)));
        assert!(set.adapters().all(|a| a.scaling() == 8.0));
        let err = attach(&params, 65, 128.0, 1);
        assert!(matches!(err, Err(LoraError::Rank { .. })));
        assert!(matches!(attach(&params, 0, 1.0, 1), Err(LoraError::ZeroRank)));
    }

    #[test]
    fn trainable_parameter_lists() {
        let params = EncoderParams::init(EncoderConfig::default(), 0).unwrap();
        let set = attach(&params, 16, 128.0, 1).unwrap();
        let d = params.config().d_model;
        let eos = PoolingConfig::new(PoolingStrategy::Eos, d, 0);
        let names = trainable_parameters(&set, &eos);
        assert_eq!(names.len(), 24);
        assert!(names.iter().all(|n| n.starts_with("lora.")));
        assert!(names.iter().all(|n| params.get(n).is_none()));
        let query = PoolingConfig::new(PoolingStrategy::Query, d, 0);
        let names = trainable_parameters(&set, &query);
        assert_eq!(names.len(), 25);
        assert_eq!(names.last().unwrap(), crate::pooling::QUERY_PARAM);
    }
}
