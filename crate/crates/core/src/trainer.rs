//! Contrastive training loop for LoRA or full fine-tuning.
//!
//! One step binds the model into a fresh graph, pools a text and an image
//! embedding per batch item, stacks them and backpropagates InfoNCE through
//! both towers. Parameters are then updated by Adam with decoupled weight
//! decay. Batches come from a seeded shuffle of the train split, without
//! replacement within an epoch.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Corpus, CorpusRecord, Split};
use crate::encoder::{EncoderConfig, EncoderError, EncoderParams, Trainability};
use crate::geoeval::{evaluate, EvalReport, GeoError, GeoPoint};
use crate::lora::{attach, trainable_parameters, LoraError};
use crate::model::{Model, ModelError, ModelNodes};
use crate::numcore::{Graph, Matrix, NodeId, NumError};
use crate::objective::{info_nce, Direction, LossError, TauInput, TemperatureConfig, LOG_TAU_PARAM};
use crate::pooling::{PoolError, PoolingConfig, PoolingStrategy};
use crate::retrieval::{build_index, RetrievalError, RetrievalResult};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Ranks retained per query during evaluation; covers every reported K.
const EVAL_TOPK: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("loss diverged at step {step} (epoch {epoch}): {detail}")]
    Diverged { step: usize, epoch: usize, detail: String },
    #[error("frozen base weights changed during lora training")]
    FrozenBaseChanged,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Model(ModelError::Num(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Lora,
    Full,
}

impl TrainMode {
    pub const ALL: [TrainMode; 2] = [TrainMode::Lora, TrainMode::Full];
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Lora => "lora",
            TrainMode::Full => "full",
        })
    }
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lora" => Ok(TrainMode::Lora),
            "full" => Ok(TrainMode::Full),
            other => Err(TrainError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub pooling: PoolingStrategy,
    pub temperature: TemperatureConfig,
    pub direction: Direction,
    /// Held-out R@1 after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Lora,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 7,
            lora_rank: 16,
            lora_alpha: 128.0,
            pooling: PoolingStrategy::Eos,
            temperature: TemperatureConfig::Fixed(0.03),
            direction: Direction::Symmetric,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    /// Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.mode == TrainMode::Lora {
            if self.lora_rank == 0 {
                return err("lora rank must be positive".into());
            }
            if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
                return err(format!("lora alpha must be positive, got {}", self.lora_alpha));
            }
        }
        match self.temperature {
            TemperatureConfig::Fixed(t) if !(t > 0.0 && t.is_finite()) => {
                return err(format!("temperature must be positive, got {t}"))
            }
            TemperatureConfig::Learnable { log_tau } if !log_tau.is_finite() => {
                return err("log temperature must be finite".into())
            }
            _ => {}
        }
        let mut warnings = Vec::new();
        if self.batch_size == 1 {
            warnings.push("batch_size 1 has no in-batch negatives; the loss is identically 0".into());
        }
        Ok(warnings)
    }
}

/// Fresh model for `cfg`: encoder from `cfg.seed`, adapters (lora mode only)
/// and the pooling query from derived seeds.
pub fn init_model(encoder: EncoderConfig, cfg: &TrainConfig) -> Result<Model, TrainError> {
    let params = EncoderParams::init(encoder, cfg.seed).map_err(ModelError::from)?;
    let lora = match cfg.mode {
        TrainMode::Lora => Some(
            attach(&params, cfg.lora_rank, cfg.lora_alpha, cfg.seed.wrapping_add(1)).map_err(ModelError::from)?,
        ),
        TrainMode::Full => None,
    };
    Ok(Model {
        params,
        lora,
        pooling: PoolingConfig::new(cfg.pooling, encoder.d_model, cfg.seed.wrapping_add(2)),
        temperature: cfg.temperature,
    })
}

/// Splits parameter names into (trainable, frozen). Lora mode trains the
/// adapters, the pooling query and a learnable temperature; full mode trains
/// everything.
pub fn param_partition(mode: TrainMode, model: &Model) -> (Vec<String>, Vec<String>) {
    let encoder: Vec<String> = model.params.names().cloned().collect();
    let mut trainable = match (mode, &model.lora) {
        (TrainMode::Lora, Some(set)) => trainable_parameters(set, &model.pooling),
        (TrainMode::Lora, None) => model
            .pooling
            .query()
            .map(|_| crate::pooling::QUERY_PARAM.to_string())
            .into_iter()
            .collect(),
        (TrainMode::Full, lora) => {
            let mut all = encoder.clone();
            if let Some(set) = lora {
                all.extend(trainable_parameters(set, &model.pooling));
            } else if model.pooling.query().is_some() {
                all.push(crate::pooling::QUERY_PARAM.to_string());
            }
            all
        }
    };
    if model.temperature.is_learnable() {
        trainable.push(LOG_TAU_PARAM.to_string());
    }
    let frozen = match mode {
        TrainMode::Lora => encoder,
        TrainMode::Full => Vec::new(),
    };
    (trainable, frozen)
}

/// One JSON-lines log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        heldout_r1: Option<f64>,
        tau: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<(usize, usize, f64)>,
    /// `(epoch, held-out R@1)`.
    pub heldout_r1: Vec<(usize, f64)>,
    pub wall_clock_s: f64,
    pub base_digest_before: String,
    pub base_digest_after: String,
    pub trainable: Vec<String>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    pub fn final_r1(&self) -> Option<f64> {
        self.heldout_r1.last().map(|r| r.1)
    }

    /// Mean loss over the steps of `epoch`.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self.steps.iter().filter(|s| s.1 == epoch).map(|s| s.2).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

struct Adam {
    lr: f64,
    weight_decay: f64,
    t: i32,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Matrix>) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (name, grad) in grads {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(grad.rows(), grad.cols()), Matrix::zeros(grad.rows(), grad.cols())));
            let decay = if name == LOG_TAU_PARAM { 0.0 } else { self.weight_decay };
            let param: &mut [f64] = if name == LOG_TAU_PARAM {
                match &mut model.temperature {
                    TemperatureConfig::Learnable { log_tau } => std::slice::from_mut(log_tau),
                    TemperatureConfig::Fixed(_) => unreachable!("fixed temperature has no gradient"),
                }
            } else {
                model.matrix_mut(name).expect("gradient for a known parameter").data_mut()
            };
            for (((p, &g), m), v) in param
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *p -= self.lr * (update + decay * *p);
            }
        }
    }
}

fn numeric_cause(e: &TrainError) -> Option<&NumError> {
    match e {
        TrainError::Model(
            ModelError::Num(n)
            | ModelError::Encoder(EncoderError::Num(n))
            | ModelError::Pool(PoolError::Num(n))
            | ModelError::Loss(LossError::Num(n))
            | ModelError::Lora(LoraError::Num(n)),
        )
        | TrainError::Loss(LossError::Num(n)) => Some(n),
        _ => None,
    }
}

/// Which weights receive gradients in `mode`.
pub(crate) fn trainability(mode: TrainMode) -> Trainability {
    match mode {
        TrainMode::Lora => Trainability {
            base: false,
            adapters: true,
        },
        TrainMode::Full => Trainability {
            base: true,
            adapters: true,
        },
    }
}

/// Batch InfoNCE in `g`: row i of the text stack pairs with row i of the
/// image stack. Returns the loss and, when `train_log_tau`, the log-temperature
/// parameter node.
pub(crate) fn batch_loss(
    g: &mut Graph<'_>,
    model: &Model,
    nodes: &ModelNodes,
    batch: &[&CorpusRecord],
    direction: Direction,
    train_log_tau: bool,
) -> Result<(NodeId, Option<NodeId>), TrainError> {
    let mut texts = Vec::with_capacity(batch.len());
    let mut images = Vec::with_capacity(batch.len());
    for rec in batch {
        texts.push(model.text_embedding_node(g, nodes, &rec.text)?);
        images.push(model.image_embedding_node(g, nodes, &rec.grid.patches)?);
    }
    let q = g.concat_rows(&texts)?;
    let s = g.concat_rows(&images)?;
    let (tau, log_tau_node) = match model.temperature {
        TemperatureConfig::Fixed(t) => (TauInput::Fixed(t), None),
        TemperatureConfig::Learnable { log_tau } => {
            let node = if train_log_tau {
                g.param(Matrix::scalar(log_tau))?
            } else {
                g.constant(Matrix::scalar(log_tau))?
            };
            (TauInput::LogTau(node), train_log_tau.then_some(node))
        }
    };
    Ok((info_nce(g, q, s, tau, direction)?, log_tau_node))
}

/// Loss and gradients of every `trainable` parameter for one batch.
fn batch_gradients(
    model: &Model,
    batch: &[&CorpusRecord],
    mode: TrainMode,
    trainable: &HashSet<&str>,
    direction: Direction,
) -> Result<(f64, BTreeMap<String, Matrix>), TrainError> {
    let mut g = Graph::new();
    let nodes = model.bind(&mut g, trainability(mode), trainable.contains(crate::pooling::QUERY_PARAM))?;
    let (loss, log_tau_node) = batch_loss(&mut g, model, &nodes, batch, direction, trainable.contains(LOG_TAU_PARAM))?;
    let value = g.value(loss).item();
    let mut grads_by_node = g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, id) in nodes.named() {
        if trainable.contains(name) {
            let grad = grads_by_node
                .take(id)
                .unwrap_or_else(|| Matrix::zeros(g.value(id).rows(), g.value(id).cols()));
            grads.insert(name.to_string(), grad);
        }
    }
    if let Some(node) = log_tau_node {
        grads.insert(
            LOG_TAU_PARAM.to_string(),
            grads_by_node.take(node).unwrap_or_else(|| Matrix::scalar(0.0)),
        );
    }
    Ok((value, grads))
}

/// Text-to-image retrieval over `records`: texts query an index of the same
/// records' grids.
pub fn evaluate_records(model: &Model, records: &[&CorpusRecord], strict_loc: bool) -> Result<EvalReport, TrainError> {
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        entries.push((rec.id.clone(), model.embed_image(&rec.grid)?, rec.grid.geo));
    }
    let index = build_index(entries)?;
    let mut results: Vec<RetrievalResult> = Vec::with_capacity(records.len());
    for rec in records {
        results.push(index.query_topk(&model.embed_text(&rec.text)?, EVAL_TOPK)?);
    }
    let truth: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let truth_geo: Vec<GeoPoint> = records.iter().map(|r| r.grid.geo).collect();
    Ok(evaluate(&results, &truth, &truth_geo, &index, strict_loc)?)
}

/// Trains `model` in place on the train split. `sink` sees every log record
/// as it is produced.
pub fn train(
    corpus: &Corpus,
    model: &mut Model,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&LogRecord),
) -> Result<TrainLog, TrainError> {
    let started = Instant::now();
    let warnings = cfg.validate()?;
    if cfg.mode == TrainMode::Lora && model.lora.is_none() {
        return Err(TrainError::Config("lora mode needs adapters attached".into()));
    }
    let train_set: Vec<&CorpusRecord> = corpus.split(Split::Train).collect();
    let test_set: Vec<&CorpusRecord> = corpus.split(Split::Test).collect();
    if train_set.len() < cfg.batch_size {
        return Err(TrainError::Data(format!(
            "{} training pairs are fewer than batch size {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let (trainable, _frozen) = param_partition(cfg.mode, model);
    let trainable_set: HashSet<&str> = trainable.iter().map(String::as_str).collect();
    let base_digest_before = model.base_digest();
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let min_batch = cfg.batch_size.min(2);
    let mut steps = Vec::new();
    let mut heldout_r1 = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<&CorpusRecord> = chunk.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, cfg.mode, &trainable_set, cfg.direction).map_err(
                |e| match numeric_cause(&e) {
                    Some(n @ NumError::NonFinite(_)) => TrainError::Diverged {
                        step,
                        epoch,
                        detail: n.to_string(),
                    },
                    _ => e,
                },
            )?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    step,
                    epoch,
                    detail: format!("loss {loss}"),
                });
            }
            adam.step(model, &grads);
            sink(&LogRecord::Step { step, epoch, loss });
            steps.push((step, epoch, loss));
            epoch_losses.push(loss);
            step += 1;
        }
        let r1 = if cfg.eval_each_epoch && !test_set.is_empty() {
            let report = evaluate_records(model, &test_set, false)?;
            let r1 = report.recall_at(1).expect("R@1 is always reported");
            heldout_r1.push((epoch, r1));
            Some(r1)
        } else {
            None
        };
        sink(&LogRecord::Epoch {
            epoch,
            mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64,
            heldout_r1: r1,
            tau: crate::objective::temperature_value(&model.temperature),
        });
    }
    let base_digest_after = model.base_digest();
    if cfg.mode == TrainMode::Lora && base_digest_after != base_digest_before {
        return Err(TrainError::FrozenBaseChanged);
    }
    Ok(TrainLog {
        steps,
        heldout_r1,
        wall_clock_s: started.elapsed().as_secs_f64(),
        base_digest_before,
        base_digest_after,
        trainable,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DataConfig};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            vocab: 256,
            max_len: 32,
            patches: 4,
            patch_features: 4,
            mlp_ratio: 2,
        }
    }

    fn tiny_corpus() -> Corpus {
        generate(&DataConfig {
            scenes: 40,
            factors: 4,
            buckets: 4,
            patches: 4,
            patch_features: 4,
            ..DataConfig::default()
        })
        .unwrap()
    }

    fn cfg(mode: TrainMode, epochs: usize) -> TrainConfig {
        TrainConfig {
            mode,
            epochs,
            batch_size: 8,
            lora_rank: 4,
            lora_alpha: 8.0,
            eval_each_epoch: false,
            ..TrainConfig::default()
        }
    }

    fn checkpoint(model: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        model.write_checkpoint(&mut out, None).unwrap();
        out
    }

    #[test]
    fn zero_epochs_leaves_the_model_untouched() {
        let c = cfg(TrainMode::Lora, 0);
        let mut model = init_model(tiny_encoder(), &c).unwrap();
        let before = checkpoint(&model);
        let log = train(&tiny_corpus(), &mut model, &c, |_| {}).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(checkpoint(&model), before);
    }

    #[test]
    fn lora_keeps_base_bit_identical() {
        let c = cfg(TrainMode::Lora, 1);
        let mut model = init_model(tiny_encoder(), &c).unwrap();
        let base = model.params.clone();
        let adapters = model.lora.clone();
        let log = train(&tiny_corpus(), &mut model, &c, |_| {}).unwrap();
        assert_eq!(log.steps.len(), 4);
        assert_eq!(log.base_digest_before, log.base_digest_after);
        assert_eq!(model.params, base);
        assert_ne!(model.lora, adapters);
    }

    #[test]
    fn full_mode_updates_every_encoder_weight() {
        let c = cfg(TrainMode::Full, 1);
        let mut model = init_model(tiny_encoder(), &c).unwrap();
        let before = model.params.clone();
        let log = train(&tiny_corpus(), &mut model, &c, |_| {}).unwrap();
        assert_ne!(log.base_digest_before, log.base_digest_after);
        for (name, m) in before.iter() {
            assert!(model.params.get(name).unwrap() != m, "{name} unchanged");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let c = TrainConfig {
            pooling: PoolingStrategy::Query,
            temperature: TemperatureConfig::learnable(0.07).unwrap(),
            ..cfg(TrainMode::Lora, 1)
        };
        let run = || {
            let mut model = init_model(tiny_encoder(), &c).unwrap();
            let mut records = Vec::new();
            train(&tiny_corpus(), &mut model, &c, |r| records.push(r.clone())).unwrap();
            (checkpoint(&model), records)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn learnable_temperature_moves_without_decay() {
        let c = TrainConfig {
            temperature: TemperatureConfig::learnable(0.07).unwrap(),
            ..cfg(TrainMode::Lora, 1)
        };
        let mut model = init_model(tiny_encoder(), &c).unwrap();
        train(&tiny_corpus(), &mut model, &c, |_| {}).unwrap();
        assert_ne!(model.temperature, c.temperature);
    }

    #[test]
    fn partitions() {
        let lora_eos = cfg(TrainMode::Lora, 0);
        let model = init_model(tiny_encoder(), &lora_eos).unwrap();
        let (trainable, frozen) = param_partition(TrainMode::Lora, &model);
        assert_eq!(trainable.len(), 2 * 6);
        assert!(trainable.iter().all(|n| n.starts_with("lora.")));
        assert_eq!(frozen.len(), model.params.names().count());

        let lora_query = TrainConfig {
            pooling: PoolingStrategy::Query,
            temperature: TemperatureConfig::learnable(0.07).unwrap(),
            ..lora_eos.clone()
        };
        let model = init_model(tiny_encoder(), &lora_query).unwrap();
        let (trainable, _) = param_partition(TrainMode::Lora, &model);
        assert_eq!(trainable.len(), 2 * 6 + 2);
        assert!(trainable.contains(&crate::pooling::QUERY_PARAM.to_string()));
        assert!(trainable.contains(&LOG_TAU_PARAM.to_string()));

        let full = cfg(TrainMode::Full, 0);
        let model = init_model(tiny_encoder(), &full).unwrap();
        let (trainable, frozen) = param_partition(TrainMode::Full, &model);
        assert!(frozen.is_empty());
        assert_eq!(trainable.len(), model.params.names().count());
    }

    #[test]
    fn bad_inputs() {
        let corpus = tiny_corpus();
        let big = TrainConfig {
            batch_size: 64,
            ..cfg(TrainMode::Lora, 1)
        };
        let mut model = init_model(tiny_encoder(), &big).unwrap();
        assert!(matches!(train(&corpus, &mut model, &big, |_| {}), Err(TrainError::Data(_))));
        let lr = TrainConfig {
            learning_rate: 0.0,
            ..cfg(TrainMode::Lora, 1)
        };
        assert!(matches!(lr.validate(), Err(TrainError::Config(_))));
        let one = TrainConfig {
            batch_size: 1,
            ..cfg(TrainMode::Lora, 1)
        };
        assert_eq!(one.validate().unwrap().len(), 1);
    }

    #[test]
    fn divergence_aborts() {
        let c = TrainConfig {
            learning_rate: 1e200,
            ..cfg(TrainMode::Full, 2)
        };
        let mut model = init_model(tiny_encoder(), &c).unwrap();
        let err = train(&tiny_corpus(), &mut model, &c, |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }
}
