//! Encoder weights, adapters, pooling and temperature bundled together, plus
//! the binary checkpoint format.
//!
//! Checkpoint layout: magic `NGCGCKPT`, `u32` format version, then named
//! tensors until end of file, each as `u32` name length, UTF-8 name, `u32`
//! rows, `u32` cols and row-major little-endian `f64` values.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::encoder::{
    bind, image_states, text_states, EncoderConfig, EncoderError, EncoderNodes, EncoderParams, SceneGrid,
    TokenSequence, Trainability,
};
use crate::lora::{LoraAdapter, LoraError, LoraSet};
use crate::numcore::{Graph, Matrix, NodeId, NumError};
use crate::objective::{LossError, TemperatureConfig, LOG_TAU_PARAM};
use crate::pooling::{pool_node, PoolError, PoolingConfig, PoolingStrategy, QUERY_PARAM};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NGCGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: EncoderParams,
    pub lora: Option<LoraSet>,
    pub pooling: PoolingConfig,
    pub temperature: TemperatureConfig,
}

/// Graph handles for a bound model.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub encoder: EncoderNodes,
    pub query: Option<NodeId>,
}

impl ModelNodes {
    /// Parameter name -> node, including the pooling query.
    pub fn named(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.encoder
            .by_name
            .iter()
            .map(|(n, &id)| (n.as_str(), id))
            .chain(self.query.map(|q| (QUERY_PARAM, q)))
    }
}

impl Model {
    pub fn config(&self) -> &EncoderConfig {
        self.params.config()
    }

    /// Binds every weight into `g`. `train_query` makes the pooling query trainable.
    pub fn bind<'a>(
        &'a self,
        g: &mut Graph<'a>,
        train: Trainability,
        train_query: bool,
    ) -> Result<ModelNodes, ModelError> {
        let encoder = bind(g, &self.params, self.lora.as_ref(), train)?;
        let query = match self.pooling.query() {
            Some(q) if train_query => Some(g.param(q)?),
            Some(q) => Some(g.frozen(q)?),
            None => None,
        };
        Ok(ModelNodes { encoder, query })
    }

    /// Unit-norm `1 x d` text embedding node.
    pub fn text_embedding_node(
        &self,
        g: &mut Graph<'_>,
        nodes: &ModelNodes,
        seq: &TokenSequence,
    ) -> Result<NodeId, ModelError> {
        let states = text_states(g, &nodes.encoder, seq)?;
        let strategy = self.pooling.strategy();
        Ok(pool_node(g, states, &seq.mask(), seq.eos_index(), strategy, nodes.query)?)
    }

    /// Unit-norm `1 x d` satellite embedding node.
    pub fn image_embedding_node(
        &self,
        g: &mut Graph<'_>,
        nodes: &ModelNodes,
        patches: &Matrix,
    ) -> Result<NodeId, ModelError> {
        let states = image_states(g, &nodes.encoder, patches)?;
        let rows = self.config().patches + 1;
        let strategy = self.pooling.strategy();
        Ok(pool_node(g, states, &vec![true; rows], rows - 1, strategy, nodes.query)?)
    }

    pub fn embed_text(&self, seq: &TokenSequence) -> Result<Embedding, ModelError> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, Trainability::FROZEN, false)?;
        let out = self.text_embedding_node(&mut g, &nodes, seq)?;
        Ok(Embedding::from_unit(g.value(out).data().to_vec(), 1e-12).expect("pooled output is unit norm"))
    }

    pub fn embed_image(&self, grid: &SceneGrid) -> Result<Embedding, ModelError> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, Trainability::FROZEN, false)?;
        let out = self.image_embedding_node(&mut g, &nodes, &grid.patches)?;
        Ok(Embedding::from_unit(g.value(out).data().to_vec(), 1e-12).expect("pooled output is unit norm"))
    }

    /// Looks up any named parameter: encoder weights, `lora.*`, pooling query, `log τ`.
    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        if name == QUERY_PARAM {
            return self.pooling.query();
        }
        if name.starts_with("lora.") {
            return self.lora.as_ref()?.matrix(name);
        }
        self.params.get(name)
    }

    pub fn matrix_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if name == QUERY_PARAM {
            return self.pooling.query_mut();
        }
        if name.starts_with("lora.") {
            return self.lora.as_mut()?.matrix_mut(name);
        }
        self.params.get_mut(name)
    }

    /// SHA-256 over every encoder (base) weight, names included.
    pub fn base_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.params.iter() {
            h.update(name.as_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn tensors(&self, config_hash: Option<&str>) -> BTreeMap<String, Matrix> {
        let mut t: BTreeMap<String, Matrix> = self.params.iter().map(|(n, m)| (n.clone(), m.clone())).collect();
        let cfg = self.config();
        for (field, v) in [
            ("d_model", cfg.d_model),
            ("layers", cfg.layers),
            ("heads", cfg.heads),
            ("vocab", cfg.vocab),
            ("max_len", cfg.max_len),
            ("patches", cfg.patches),
            ("patch_features", cfg.patch_features),
            ("mlp_ratio", cfg.mlp_ratio),
        ] {
            t.insert(format!("meta.encoder.{field}"), Matrix::scalar(v as f64));
        }
        let code = PoolingStrategy::ALL
            .iter()
            .position(|&s| s == self.pooling.strategy())
            .expect("known strategy");
        t.insert("meta.pooling".into(), Matrix::scalar(code as f64));
        if let Some(q) = self.pooling.query() {
            t.insert(QUERY_PARAM.into(), q.clone());
        }
        match self.temperature {
            TemperatureConfig::Fixed(tau) => {
                t.insert("loss.tau".into(), Matrix::scalar(tau));
            }
            TemperatureConfig::Learnable { log_tau } => {
                t.insert(LOG_TAU_PARAM.into(), Matrix::scalar(log_tau));
            }
        }
        if let Some(set) = &self.lora {
            if let Some(first) = set.adapters().next() {
                t.insert("lora.alpha".into(), Matrix::scalar(first.alpha()));
                t.insert("lora.rank".into(), Matrix::scalar(first.rank() as f64));
            }
            for a in set.adapters() {
                t.insert(format!("lora.{}.A", a.target), a.a().clone());
                t.insert(format!("lora.{}.B", a.target), a.b().clone());
            }
        }
        if let Some(hash) = config_hash {
            let bytes: Vec<f64> = hash.bytes().map(f64::from).collect();
            t.insert("meta.config_hash".into(), Matrix::row_vector(&bytes));
        }
        t
    }

    pub fn write_checkpoint(&self, mut w: impl Write, config_hash: Option<&str>) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, m) in self.tensors(config_hash) {
            let as_u32 = |v: usize| u32::try_from(v).map_err(|_| ModelError::Format(format!("{name} too large")));
            w.write_all(&as_u32(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&as_u32(m.rows())?.to_le_bytes())?;
            w.write_all(&as_u32(m.cols())?.to_le_bytes())?;
            let mut buf = Vec::with_capacity(m.data().len() * 8);
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Returns the model and the embedded config hash, if any.
    pub fn read_checkpoint(mut r: impl Read) -> Result<(Model, Option<String>), ModelError> {
        let mut tensors = read_tensors(&mut r)?;
        let fmt = |m: &str| ModelError::Format(m.to_string());
        let field = |t: &mut BTreeMap<String, Matrix>, f: &str| take_scalar(t, &format!("meta.encoder.{f}")).map(|v| v as usize);
        let config = EncoderConfig {
            d_model: field(&mut tensors, "d_model")?,
            layers: field(&mut tensors, "layers")?,
            heads: field(&mut tensors, "heads")?,
            vocab: field(&mut tensors, "vocab")?,
            max_len: field(&mut tensors, "max_len")?,
            patches: field(&mut tensors, "patches")?,
            patch_features: field(&mut tensors, "patch_features")?,
            mlp_ratio: field(&mut tensors, "mlp_ratio")?,
        };
        let strategy = *PoolingStrategy::ALL
            .get(take_scalar(&mut tensors, "meta.pooling")? as usize)
            .ok_or_else(|| fmt("unknown pooling code"))?;
        let pooling = match strategy {
            PoolingStrategy::Query => PoolingConfig::with_query(
                tensors.remove(QUERY_PARAM).ok_or_else(|| fmt("missing pooling.query"))?,
            )?,
            other => PoolingConfig::new(other, config.d_model, 0),
        };
        let temperature = if tensors.contains_key(LOG_TAU_PARAM) {
            TemperatureConfig::Learnable {
                log_tau: take_scalar(&mut tensors, LOG_TAU_PARAM)?,
            }
        } else {
            TemperatureConfig::fixed(take_scalar(&mut tensors, "loss.tau")?)?
        };
        let config_hash = match tensors.remove("meta.config_hash") {
            Some(m) => Some(
                String::from_utf8(m.data().iter().map(|&b| b as u8).collect())
                    .map_err(|_| fmt("config hash is not UTF-8"))?,
            ),
            None => None,
        };
        let lora = if tensors.contains_key("lora.alpha") {
            let alpha = take_scalar(&mut tensors, "lora.alpha")?;
            let _rank = take_scalar(&mut tensors, "lora.rank")?;
            let mut adapters = Vec::new();
            for target in config.adapted_matrix_names() {
                let a = tensors.remove(&format!("lora.{target}.A"));
                let b = tensors.remove(&format!("lora.{target}.B"));
                match (a, b) {
                    (Some(a), Some(b)) => adapters.push(LoraAdapter::new(target, a, b, alpha)?),
                    (None, None) => {}
                    _ => return Err(fmt(&format!("incomplete adapter for {target}"))),
                }
            }
            Some(LoraSet::from_adapters(adapters))
        } else {
            None
        };
        let params = EncoderParams::from_tensors(config, tensors)?;
        Ok((
            Model {
                params,
                lora,
                pooling,
                temperature,
            },
            config_hash,
        ))
    }
}

fn take_scalar(tensors: &mut BTreeMap<String, Matrix>, name: &str) -> Result<f64, ModelError> {
    let m = tensors
        .remove(name)
        .ok_or_else(|| ModelError::Format(format!("missing {name}")))?;
    if m.shape() != (1, 1) {
        return Err(ModelError::Format(format!("{name} must be 1x1")));
    }
    Ok(m.item())
}

fn read_tensors(r: &mut impl Read) -> Result<BTreeMap<String, Matrix>, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = read_u32(r)?.ok_or_else(|| ModelError::Format("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let mut tensors = BTreeMap::new();
    while let Some(len) = read_u32(r)? {
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u32(r)?.ok_or_else(|| ModelError::Format("truncated".into()))? as usize;
        let cols = read_u32(r)?.ok_or_else(|| ModelError::Format("truncated".into()))? as usize;
        let mut raw = vec![0u8; rows * cols * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Matrix::new(rows, cols, data)?;
        if tensors.insert(name.clone(), m).is_some() {
            return Err(ModelError::Format(format!("duplicate tensor {name}")));
        }
    }
    Ok(tensors)
}

/// `None` at a clean end of input.
fn read_u32(r: &mut impl Read) -> Result<Option<u32>, ModelError> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut b[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(ModelError::Format("truncated".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}
