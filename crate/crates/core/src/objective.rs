//! In-batch InfoNCE over query/satellite pairs with fixed or learnable temperature.
//!
//! For queries `Q` and satellites `S` (unit rows, row `i` of each forms a
//! positive pair) the text-to-image term is
//! `mean_i −log softmax_j(qᵢ·sⱼ / τ)[i]`, where `j` ranges over the `B`
//! satellites of the batch. The symmetric form averages it with the
//! image-to-text term.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::l2_norm;
use crate::numcore::{Graph, Matrix, NodeId, NumError};

pub const LOG_TAU_PARAM: &str = "loss.log_tau";

/// Rows must be unit norm within this tolerance.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("row {row} of {side} has norm {norm}, expected 1")]
    Normalization { side: &'static str, row: usize, norm: f64 },
    #[error("queries are {queries:?} but satellites are {satellites:?}")]
    Shape {
        queries: (usize, usize),
        satellites: (usize, usize),
    },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("unknown loss direction {0:?}")]
    UnknownDirection(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Text-to-image only, as written for a text query.
    T2i,
    Symmetric,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::T2i => "t2i",
            Direction::Symmetric => "symmetric",
        })
    }
}

impl FromStr for Direction {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "t2i" => Ok(Direction::T2i),
            "symmetric" => Ok(Direction::Symmetric),
            other => Err(LossError::UnknownDirection(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureMode {
    Fixed,
    Learnable,
}

/// Fixed τ, or a trainable `log τ` so positivity holds by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TemperatureConfig {
    Fixed(f64),
    Learnable { log_tau: f64 },
}

impl TemperatureConfig {
    pub fn fixed(tau: f64) -> Result<Self, LossError> {
        check_tau(tau)?;
        Ok(Self::Fixed(tau))
    }

    pub fn learnable(initial_tau: f64) -> Result<Self, LossError> {
        check_tau(initial_tau)?;
        Ok(Self::Learnable {
            log_tau: initial_tau.ln(),
        })
    }

    pub fn mode(&self) -> TemperatureMode {
        match self {
            Self::Fixed(_) => TemperatureMode::Fixed,
            Self::Learnable { .. } => TemperatureMode::Learnable,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Self::Learnable { .. })
    }
}

/// Current τ; `exp(log τ)` in learnable mode.
pub fn temperature_value(temp: &TemperatureConfig) -> f64 {
    match *temp {
        TemperatureConfig::Fixed(tau) => tau,
        TemperatureConfig::Learnable { log_tau } => log_tau.exp(),
    }
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Temperature(tau))
    }
}

/// Temperature as it enters a graph.
#[derive(Clone, Copy, Debug)]
pub enum TauInput {
    Fixed(f64),
    /// A 1x1 node holding `log τ`.
    LogTau(NodeId),
}

fn check_rows(m: &Matrix, side: &'static str) -> Result<(), LossError> {
    for r in 0..m.rows() {
        let norm = l2_norm(m.row(r));
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(LossError::Normalization { side, row: r, norm });
        }
    }
    Ok(())
}

/// Mean over rows of `−log softmax(logits)[i, i]`.
fn diagonal_nll(g: &mut Graph<'_>, logits: NodeId, b: usize) -> Result<NodeId, NumError> {
    let probs = g.softmax_rows(logits)?;
    let eye = g.constant(Matrix::identity(b))?;
    let ones = g.constant(Matrix::filled(b, 1, 1.0))?;
    let diag_only = g.mul(probs, eye)?;
    let positives = g.matmul(diag_only, ones)?;
    let log_p = g.log(positives)?;
    let mean = g.masked_mean_rows(log_p, vec![true; b])?;
    g.scale(mean, -1.0)
}

/// Builds the InfoNCE loss over the `B x d` nodes `queries` and `satellites`.
/// Softmax subtracts the row maximum, so `log` only ever sees probabilities
/// bounded below by `exp(−2/τ)/B`.
pub fn info_nce(
    g: &mut Graph<'_>,
    queries: NodeId,
    satellites: NodeId,
    tau: TauInput,
    direction: Direction,
) -> Result<NodeId, LossError> {
    let (qv, sv) = (g.value(queries), g.value(satellites));
    if qv.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if qv.shape() != sv.shape() {
        return Err(LossError::Shape {
            queries: qv.shape(),
            satellites: sv.shape(),
        });
    }
    check_rows(qv, "queries")?;
    check_rows(sv, "satellites")?;
    let b = qv.rows();
    let inv_tau = match tau {
        TauInput::Fixed(t) => {
            check_tau(t)?;
            None
        }
        TauInput::LogTau(node) => {
            let neg = g.scale(node, -1.0)?;
            Some(g.exp(neg)?)
        }
    };
    let scaled = |g: &mut Graph<'_>, sims: NodeId| -> Result<NodeId, NumError> {
        match (tau, inv_tau) {
            (TauInput::Fixed(t), _) => g.scale(sims, 1.0 / t),
            (_, Some(inv)) => g.scale_by(sims, inv, 1.0),
            _ => unreachable!(),
        }
    };
    let sims = g.matmul_nt(queries, satellites)?;
    let logits = scaled(g, sims)?;
    let t2i = diagonal_nll(g, logits, b)?;
    match direction {
        Direction::T2i => Ok(t2i),
        Direction::Symmetric => {
            let sims_t = g.matmul_nt(satellites, queries)?;
            let logits_t = scaled(g, sims_t)?;
            let i2t = diagonal_nll(g, logits_t, b)?;
            let both = g.add(t2i, i2t)?;
            Ok(g.scale(both, 0.5)?)
        }
    }
}

/// Unit-row query/satellite matrices, row `i` of each forming a positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    queries: Matrix,
    satellites: Matrix,
}

impl Batch {
    pub fn new(queries: Matrix, satellites: Matrix) -> Result<Self, LossError> {
        if queries.rows() == 0 {
            return Err(LossError::EmptyBatch);
        }
        if queries.shape() != satellites.shape() {
            return Err(LossError::Shape {
                queries: queries.shape(),
                satellites: satellites.shape(),
            });
        }
        check_rows(&queries, "queries")?;
        check_rows(&satellites, "satellites")?;
        Ok(Self { queries, satellites })
    }

    pub fn queries(&self) -> &Matrix {
        &self.queries
    }

    pub fn satellites(&self) -> &Matrix {
        &self.satellites
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.rows() == 0
    }
}

/// Loss value for a batch (no gradients).
pub fn info_nce_value(batch: &Batch, temp: &TemperatureConfig, direction: Direction) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let q = g.constant(&batch.queries)?;
    let s = g.constant(&batch.satellites)?;
    let tau = match *temp {
        TemperatureConfig::Fixed(t) => TauInput::Fixed(t),
        TemperatureConfig::Learnable { log_tau } => TauInput::LogTau(g.constant(Matrix::scalar(log_tau))?),
    };
    let loss = info_nce(&mut g, q, s, tau, direction)?;
    Ok(g.value(loss).item())
}
