//! Exact nearest-candidate retrieval over unit-norm embeddings.
//!
//! On unit vectors `‖q − s‖² = 2 − 2 q·s`, so ranking by descending dot
//! product is ranking by ascending L2 distance.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::embedding::{l2_norm, Embedding, EmbeddingError};
use crate::geoeval::{GeoError, GeoPoint};
use crate::numcore::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"NGCGEMB1";

/// Rows loaded from the `f32` file format are accepted within this distance of unit norm.
pub const F32_UNIT_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("index needs at least one entry")]
    Empty,
    #[error("duplicate candidate id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Best first.
    pub ids: Vec<String>,
    /// Cosine similarity per ranked id, non-increasing.
    pub scores: Vec<f64>,
}

/// Immutable candidate database.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Matrix,
    geo: Vec<GeoPoint>,
    by_id: HashMap<String, usize>,
}

pub fn build_index(entries: Vec<(String, Embedding, GeoPoint)>) -> Result<EmbeddingIndex, RetrievalError> {
    let dim = entries.first().ok_or(RetrievalError::Empty)?.1.dim();
    let mut data = Vec::with_capacity(entries.len() * dim);
    let mut ids = Vec::with_capacity(entries.len());
    let mut geo = Vec::with_capacity(entries.len());
    for (id, emb, point) in entries {
        if emb.dim() != dim {
            return Err(RetrievalError::Dim {
                expected: dim,
                got: emb.dim(),
            });
        }
        // Re-normalize: callers may hand over vectors that drifted in transit.
        let emb = Embedding::new(emb.into_vec())?;
        data.extend_from_slice(emb.as_slice());
        ids.push(id);
        geo.push(point);
    }
    let vectors = Matrix::new(ids.len(), dim, data).expect("row-major layout");
    EmbeddingIndex::from_parts(ids, vectors, geo)
}

impl EmbeddingIndex {
    fn from_parts(ids: Vec<String>, vectors: Matrix, geo: Vec<GeoPoint>) -> Result<Self, RetrievalError> {
        if ids.is_empty() {
            return Err(RetrievalError::Empty);
        }
        let mut by_id = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            vectors,
            geo,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn geo(&self) -> &[GeoPoint] {
        &self.geo
    }

    pub fn geo_of(&self, id: &str) -> Option<GeoPoint> {
        self.by_id.get(id).map(|&i| self.geo[i])
    }

    /// Row `i` as an embedding (re-normalized in `f64`).
    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding::new(self.vectors.row(i).to_vec()).expect("index rows are unit norm")
    }

    /// Exhaustive top-`k` by cosine similarity; ties go to the smaller id.
    pub fn query_topk(&self, q: &Embedding, k: usize) -> Result<RetrievalResult, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if q.dim() != self.dim() {
            return Err(RetrievalError::Dim {
                expected: self.dim(),
                got: q.dim(),
            });
        }
        let scores: Vec<f64> = (0..self.len())
            .map(|i| {
                self.vectors
                    .row(i)
                    .iter()
                    .zip(q.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let cmp = |a: &usize, b: &usize| -> Ordering {
            scores[*b]
                .total_cmp(&scores[*a])
                .then_with(|| self.ids[*a].cmp(&self.ids[*b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        let k = k.min(self.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(RetrievalResult {
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        })
    }

    /// Writes the `NGCGEMB1` binary format (vectors as `f32`).
    pub fn write_to(&self, mut w: impl Write) -> Result<(), RetrievalError> {
        let n = u32::try_from(self.len()).map_err(|_| RetrievalError::Format("too many rows".into()))?;
        let d = u32::try_from(self.dim()).map_err(|_| RetrievalError::Format("dimension too large".into()))?;
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.vectors.data().len() * 4);
        for &v in self.vectors.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        for (id, g) in self.ids.iter().zip(&self.geo) {
            let len = u16::try_from(id.len())
                .map_err(|_| RetrievalError::Format(format!("id {id:?} longer than 65535 bytes")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&g.lat().to_le_bytes())?;
            w.write_all(&g.lon().to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the `NGCGEMB1` format. The `f32` values are kept exactly, so a
    /// read/write cycle is byte-identical; rows must be unit norm within
    /// [`F32_UNIT_TOL`].
    pub fn read_from(mut r: impl Read) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let n = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let mut raw = vec![0u8; n * d * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let vectors = Matrix::new(n, d, data).expect("sized from header");
        for i in 0..n {
            let norm = l2_norm(vectors.row(i));
            if !norm.is_finite() || (norm - 1.0).abs() > F32_UNIT_TOL {
                return Err(RetrievalError::Embedding(EmbeddingError::NotUnit {
                    norm,
                    tol: F32_UNIT_TOL,
                }));
            }
        }
        let mut ids = Vec::with_capacity(n);
        let mut geo = Vec::with_capacity(n);
        for _ in 0..n {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| RetrievalError::Format("id is not UTF-8".into()))?;
            let lat = read_f64(&mut r)?;
            let lon = read_f64(&mut r)?;
            ids.push(id);
            geo.push(GeoPoint::new(lat, lon)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(RetrievalError::Format("trailing bytes".into()));
        }
        Self::from_parts(ids, vectors, geo)
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
