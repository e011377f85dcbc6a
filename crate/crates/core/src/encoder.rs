//! Small unified transformer encoder. Text tokens and satellite patch grids
//! go through different input embedders and then the same trunk
//! (pre-layernorm, bidirectional masked attention, GELU MLP).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geoeval::GeoPoint;
use crate::lora::{adapted_linear, LoraSet};
use crate::numcore::{Graph, Matrix, NodeId, NumError};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

/// Additive attention bias for masked keys; `exp` of it underflows to exactly 0.
pub(crate) const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("token id {id} outside vocabulary of {vocab}")]
    Vocab { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid token sequence: {0}")]
    Sequence(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub patches: usize,
    pub patch_features: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            vocab: 256,
            max_len: 64,
            patches: 16,
            patch_features: 8,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return err("d_model, layers, heads and mlp_ratio must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return err("d_model must be divisible by heads");
        }
        if self.vocab <= EOS_ID as usize {
            return err("vocabulary must contain PAD and EOS");
        }
        if self.patches + 1 > self.max_len {
            return err("patch count plus EOS must fit in max_len");
        }
        if self.patches == 0 || self.patch_features == 0 {
            return err("patch grid must be non-empty");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Names of every attention and MLP matrix in the trunk.
    pub fn adapted_matrix_names(&self) -> Vec<String> {
        (0..self.layers)
            .flat_map(|l| {
                ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"]
                    .into_iter()
                    .map(move |m| format!("layers.{l}.{m}"))
            })
            .collect()
    }
}

/// Tokenized text query. Positions after `eos_index` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    eos_index: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, eos_index: usize) -> Result<Self, EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::Sequence("empty".into()));
        }
        if eos_index >= tokens.len() {
            return Err(EncoderError::Sequence(format!(
                "eos_index {eos_index} outside length {}",
                tokens.len()
            )));
        }
        if tokens[eos_index] != EOS_ID {
            return Err(EncoderError::Sequence("token at eos_index is not EOS".into()));
        }
        Ok(Self { tokens, eos_index })
    }

    /// `content` followed by EOS.
    pub fn from_content(content: &[u32]) -> Self {
        let mut tokens = content.to_vec();
        tokens.push(EOS_ID);
        let eos_index = content.len();
        Self { tokens, eos_index }
    }

    /// Pads with `PAD_ID` up to `len` positions.
    pub fn padded(&self, len: usize) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.resize(len.max(tokens.len()), PAD_ID);
        Self {
            tokens,
            eos_index: self.eos_index,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Overwrites a padded position; positions up to EOS are rejected.
    pub fn set_padding_token(&mut self, pos: usize, id: u32) -> Result<(), EncoderError> {
        if pos <= self.eos_index || pos >= self.tokens.len() {
            return Err(EncoderError::Sequence(format!("{pos} is not a padded position")));
        }
        self.tokens[pos] = id;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_index(&self) -> usize {
        self.eos_index
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|i| i <= self.eos_index).collect()
    }
}

/// Satellite stand-in: `P x F` patch features plus location.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGrid {
    pub patches: Matrix,
    pub geo: GeoPoint,
}

/// Final-layer hidden states, one row per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub states: Matrix,
    pub mask: Vec<bool>,
    pub eos_index: usize,
}

/// Named encoder weights. Trainability is decided by whoever binds them
/// into a graph, not stored here.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: BTreeMap<String, Matrix>,
}

impl EncoderParams {
    /// Trunk matrices ~ N(0, 1/d), patch projection ~ N(0, 1/F), embedding
    /// tables ~ N(0, 0.02²), layernorm gain 1 and bias 0.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut sample = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::new(rows, cols, data).expect("sized")
        };
        let trunk_std = 1.0 / (d as f64).sqrt();
        let mut tensors = BTreeMap::new();
        tensors.insert("embed.token".into(), sample(config.vocab, d, 0.02));
        tensors.insert("embed.pos".into(), sample(config.max_len, d, 0.02));
        tensors.insert(
            "embed.patch".into(),
            sample(config.patch_features, d, 1.0 / (config.patch_features as f64).sqrt()),
        );
        for l in 0..config.layers {
            for m in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                tensors.insert(format!("layers.{l}.{m}"), sample(d, d, trunk_std));
            }
            tensors.insert(format!("layers.{l}.mlp.w1"), sample(d, config.hidden(), trunk_std));
            tensors.insert(format!("layers.{l}.mlp.w2"), sample(config.hidden(), d, trunk_std));
            for ln in ["ln1", "ln2"] {
                tensors.insert(format!("layers.{l}.{ln}.gain"), Matrix::filled(1, d, 1.0));
                tensors.insert(format!("layers.{l}.{ln}.bias"), Matrix::zeros(1, d));
            }
        }
        tensors.insert("final_ln.gain".into(), Matrix::filled(1, d, 1.0));
        tensors.insert("final_ln.bias".into(), Matrix::zeros(1, d));
        Ok(Self { config, tensors })
    }

    /// Rebuilds from named tensors, checking every expected name and shape.
    pub fn from_tensors(config: EncoderConfig, tensors: BTreeMap<String, Matrix>) -> Result<Self, EncoderError> {
        let reference = Self::init(config, 0)?;
        for (name, m) in &reference.tensors {
            let got = tensors
                .get(name)
                .ok_or_else(|| EncoderError::MissingParam(name.clone()))?;
            if got.shape() != m.shape() {
                return Err(EncoderError::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    m.shape(),
                    got.shape()
                )));
            }
        }
        if tensors.len() != reference.tensors.len() {
            return Err(EncoderError::Shape("unexpected extra tensors".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    /// Name-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }
}

/// A weight matrix bound into a graph, optionally with its low-rank adapter.
#[derive(Clone, Copy, Debug)]
pub struct LinearNodes {
    pub base: NodeId,
    pub lora: Option<LoraNodes>,
}

#[derive(Clone, Copy, Debug)]
pub struct LoraNodes {
    pub a: NodeId,
    pub b: NodeId,
    pub scaling: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNodes {
    pub ln1: (NodeId, NodeId),
    pub wq: LinearNodes,
    pub wk: LinearNodes,
    pub wv: LinearNodes,
    pub wo: LinearNodes,
    pub ln2: (NodeId, NodeId),
    pub w1: LinearNodes,
    pub w2: LinearNodes,
}

/// Graph handles for every encoder weight. Both modalities use the same handles.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub config: EncoderConfig,
    pub token: NodeId,
    pub pos: NodeId,
    pub patch: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_ln: (NodeId, NodeId),
    /// Parameter name -> node, for mapping gradients back.
    pub by_name: BTreeMap<String, NodeId>,
}

/// Which weight groups receive gradients when bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainability {
    pub base: bool,
    pub adapters: bool,
}

impl Trainability {
    pub const FROZEN: Self = Self {
        base: false,
        adapters: false,
    };
}

/// Inserts the encoder weights (and adapters, if any) as leaves of `g`.
pub fn bind<'a>(
    g: &mut Graph<'a>,
    params: &'a EncoderParams,
    adapters: Option<&'a LoraSet>,
    train: Trainability,
) -> Result<EncoderNodes, EncoderError> {
    let mut by_name = BTreeMap::new();
    for (name, m) in params.iter() {
        let id = if train.base { g.param(m)? } else { g.frozen(m)? };
        by_name.insert(name.clone(), id);
    }
    if let Some(set) = adapters {
        for adapter in set.adapters() {
            if params.get(&adapter.target).is_none() {
                return Err(EncoderError::MissingParam(adapter.target.clone()));
            }
            let (a, b) = if train.adapters {
                (g.param(adapter.a())?, g.param(adapter.b())?)
            } else {
                (g.frozen(adapter.a())?, g.frozen(adapter.b())?)
            };
            by_name.insert(format!("lora.{}.A", adapter.target), a);
            by_name.insert(format!("lora.{}.B", adapter.target), b);
        }
    }
    let node = |name: &str| -> Result<NodeId, EncoderError> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| EncoderError::MissingParam(name.to_string()))
    };
    let linear = |name: &str| -> Result<LinearNodes, EncoderError> {
        let lora = match adapters.and_then(|s| s.get(name)) {
            Some(adapter) => Some(LoraNodes {
                a: node(&format!("lora.{name}.A"))?,
                b: node(&format!("lora.{name}.B"))?,
                scaling: adapter.scaling(),
            }),
            None => None,
        };
        Ok(LinearNodes {
            base: node(name)?,
            lora,
        })
    };
    let cfg = *params.config();
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerNodes {
            ln1: (node(&p("ln1.gain"))?, node(&p("ln1.bias"))?),
            wq: linear(&p("attn.wq"))?,
            wk: linear(&p("attn.wk"))?,
            wv: linear(&p("attn.wv"))?,
            wo: linear(&p("attn.wo"))?,
            ln2: (node(&p("ln2.gain"))?, node(&p("ln2.bias"))?),
            w1: linear(&p("mlp.w1"))?,
            w2: linear(&p("mlp.w2"))?,
        });
    }
    Ok(EncoderNodes {
        config: cfg,
        token: node("embed.token")?,
        pos: node("embed.pos")?,
        patch: node("embed.patch")?,
        layers,
        final_ln: (node("final_ln.gain")?, node("final_ln.bias")?),
        by_name,
    })
}

/// Text input embedding followed by the shared trunk.
pub fn text_states(g: &mut Graph<'_>, enc: &EncoderNodes, seq: &TokenSequence) -> Result<NodeId, EncoderError> {
    let cfg = &enc.config;
    if seq.len() > cfg.max_len {
        return Err(EncoderError::Length {
            len: seq.len(),
            max: cfg.max_len,
        });
    }
    if let Some(&id) = seq.tokens().iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(EncoderError::Vocab { id, vocab: cfg.vocab });
    }
    let ids = seq.tokens().iter().map(|&t| t as usize).collect();
    let tok = g.embedding(enc.token, ids)?;
    let pos = g.embedding(enc.pos, (0..seq.len()).collect())?;
    let x = g.add(tok, pos)?;
    trunk(g, enc, x, &seq.mask())
}

/// Patch projection plus an appended EOS row, followed by the shared trunk.
/// The EOS row is the last position.
pub fn image_states(g: &mut Graph<'_>, enc: &EncoderNodes, patches: &Matrix) -> Result<NodeId, EncoderError> {
    let cfg = &enc.config;
    if patches.shape() != (cfg.patches, cfg.patch_features) {
        return Err(EncoderError::Shape(format!(
            "grid is {:?}, expected {:?}",
            patches.shape(),
            (cfg.patches, cfg.patch_features)
        )));
    }
    let raw = g.constant(patches.clone())?;
    let proj = g.matmul(raw, enc.patch)?;
    let eos = g.embedding(enc.token, vec![EOS_ID as usize])?;
    let rows = g.concat_rows(&[proj, eos])?;
    let pos = g.embedding(enc.pos, (0..cfg.patches + 1).collect())?;
    let x = g.add(rows, pos)?;
    trunk(g, enc, x, &vec![true; cfg.patches + 1])
}

fn trunk(g: &mut Graph<'_>, enc: &EncoderNodes, mut x: NodeId, mask: &[bool]) -> Result<NodeId, EncoderError> {
    let cfg = &enc.config;
    let t = mask.len();
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    // Per-head column selectors: Q masked to head h gives Q_h K_hᵀ against full K,
    // and P_h (V masked to head h) lands in head h's columns, so summing heads concatenates.
    let mut selectors = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let mut m = Matrix::zeros(t, d);
        for r in 0..t {
            m.row_mut(r)[h * dh..(h + 1) * dh].fill(1.0);
        }
        selectors.push(g.constant(m)?);
    }
    let key_bias = if mask.iter().all(|&m| m) {
        None
    } else {
        let mut b = Matrix::zeros(t, t);
        for r in 0..t {
            for (c, &valid) in mask.iter().enumerate() {
                if !valid {
                    b.set(r, c, MASK_BIAS);
                }
            }
        }
        Some(g.constant(b)?)
    };
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    for layer in &enc.layers {
        let h = g.layernorm(x, layer.ln1.0, layer.ln1.1)?;
        let q = adapted_linear(g, h, &layer.wq)?;
        let k = adapted_linear(g, h, &layer.wk)?;
        let v = adapted_linear(g, h, &layer.wv)?;
        let mut ctx: Option<NodeId> = None;
        for &sel in &selectors {
            let qh = g.mul(q, sel)?;
            let scores = g.matmul_nt(qh, k)?;
            let mut scores = g.scale(scores, inv_sqrt_dh)?;
            if let Some(bias) = key_bias {
                scores = g.add(scores, bias)?;
            }
            let weights = g.softmax_rows(scores)?;
            let vh = g.mul(v, sel)?;
            let head = g.matmul(weights, vh)?;
            ctx = Some(match ctx {
                Some(acc) => g.add(acc, head)?,
                None => head,
            });
        }
        let attn = adapted_linear(g, ctx.expect("at least one head"), &layer.wo)?;
        x = g.add(x, attn)?;
        let h2 = g.layernorm(x, layer.ln2.0, layer.ln2.1)?;
        let up = adapted_linear(g, h2, &layer.w1)?;
        let act = g.gelu(up)?;
        let down = adapted_linear(g, act, &layer.w2)?;
        x = g.add(x, down)?;
    }
    Ok(g.layernorm(x, enc.final_ln.0, enc.final_ln.1)?)
}

/// Final-layer hidden states for a text query.
pub fn encode_text(
    params: &EncoderParams,
    adapters: Option<&LoraSet>,
    seq: &TokenSequence,
) -> Result<HiddenStates, EncoderError> {
    let mut g = Graph::new();
    let enc = bind(&mut g, params, adapters, Trainability::FROZEN)?;
    let out = text_states(&mut g, &enc, seq)?;
    Ok(HiddenStates {
        states: g.value(out).clone(),
        mask: seq.mask(),
        eos_index: seq.eos_index(),
    })
}

/// Final-layer hidden states for a satellite grid; shape `(P + 1) x d`.
pub fn encode_image(
    params: &EncoderParams,
    adapters: Option<&LoraSet>,
    grid: &SceneGrid,
) -> Result<HiddenStates, EncoderError> {
    let mut g = Graph::new();
    let enc = bind(&mut g, params, adapters, Trainability::FROZEN)?;
    let out = image_states(&mut g, &enc, &grid.patches)?;
    let rows = params.config().patches + 1;
    Ok(HiddenStates {
        states: g.value(out).clone(),
        mask: vec![true; rows],
        eos_index: rows - 1,
    })
}
