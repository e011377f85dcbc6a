use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context};
use ngcg::datagen::{generate, Corpus, DataConfig, DataError, Split};
use ngcg::geoeval::{evaluate, EvalReport, GeoPoint};
use ngcg::gradsuite::{self, SuiteOptions};
use ngcg::retrieval::{build_index, EmbeddingIndex, RetrievalResult};
use ngcg::trainer::{init_model, train as train_model, LogRecord, TrainError, TrainLog, TrainMode};
use ngcg::Model;
use serde::Serialize;

use crate::artifacts::{read_meta, write_eval_reports, write_meta, EvalDocument, Meta};
use crate::config::ExperimentConfig;
use crate::{CliError, Side};

/// Retrieval depth; covers every reported K.
pub const EVAL_TOPK: usize = 10;

fn data_error(e: DataError) -> CliError {
    match e {
        DataError::Config(m) => CliError::Usage(m),
        other => CliError::runtime(other),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Usage(m),
        other => CliError::runtime(other),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(CliError::Runtime)
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(CliError::Runtime)
}

pub fn read_corpus(path: &Path) -> Result<Corpus, CliError> {
    Corpus::read_jsonl(open(path)?)
        .with_context(|| format!("reading corpus {}", path.display()))
        .map_err(CliError::Runtime)
}

pub fn gen_data(out: &Path, scenes: usize, seed: u64, noise: f64) -> Result<(), CliError> {
    let cfg = DataConfig {
        scenes,
        seed,
        noise,
        ..DataConfig::default()
    };
    let corpus = generate(&cfg).map_err(data_error)?;
    let mut w = create(out)?;
    corpus.write_jsonl(&mut w).map_err(data_error)?;
    w.flush().map_err(CliError::runtime)?;
    let hash = ExperimentConfig {
        data: cfg,
        ..ExperimentConfig::default()
    }
    .hash();
    write_meta(
        out,
        &Meta {
            config_hash: hash,
            command: "gen-data".into(),
            split: None,
            side: None,
            count: Some(corpus.len()),
        },
    )?;
    println!("wrote {} scenes to {}", corpus.len(), out.display());
    Ok(())
}

/// Trained model plus its corpus and log, with the log records streamed to `sink`.
pub fn train_experiment(
    cfg: &ExperimentConfig,
    sink: impl FnMut(&LogRecord),
) -> Result<(Model, Corpus, TrainLog), CliError> {
    cfg.validate()?;
    let corpus = generate(&cfg.data).map_err(data_error)?;
    let train_cfg = cfg.train_config()?;
    let mut model = init_model(cfg.model, &train_cfg).map_err(train_error)?;
    let log = train_model(&corpus, &mut model, &train_cfg, sink).map_err(train_error)?;
    Ok((model, corpus, log))
}

#[derive(Serialize)]
#[serde(tag = "kind", rename = "summary")]
struct Summary<'a> {
    config_hash: &'a str,
    mode: TrainMode,
    frozen_base_check: &'static str,
    base_digest_before: &'a str,
    base_digest_after: &'a str,
    trainable_params: usize,
    final_heldout_r1: Option<f64>,
    wall_clock_s: f64,
    checkpoint: String,
    warnings: &'a [String],
}

pub fn train(config: Option<&Path>, out_ckpt: &Path, log_path: &Path) -> Result<TrainLog, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let hash = cfg.hash();
    let mut log_w = create(log_path)?;
    let mut write_err = None;
    let (model, _corpus, log) = train_experiment(&cfg, |rec| {
        let line = serde_json::to_string(rec).expect("log record serializes");
        if let Err(e) = writeln!(log_w, "{line}") {
            write_err.get_or_insert(e);
        }
        if let LogRecord::Epoch {
            epoch,
            mean_loss,
            heldout_r1,
            ..
        } = rec
        {
            match heldout_r1 {
                Some(r1) => println!("epoch {epoch:>3}  loss {mean_loss:.4}  held-out R@1 {r1:.4}"),
                None => println!("epoch {epoch:>3}  loss {mean_loss:.4}"),
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::runtime(e));
    }
    let mut ckpt = create(out_ckpt)?;
    model.write_checkpoint(&mut ckpt, Some(&hash)).map_err(CliError::runtime)?;
    ckpt.flush().map_err(CliError::runtime)?;
    let frozen_base_check = match cfg.train.mode {
        // `train` already fails on a changed base; reaching here means it held.
        TrainMode::Lora if log.base_digest_before == log.base_digest_after => "pass",
        TrainMode::Lora => "fail",
        TrainMode::Full => "not-applicable",
    };
    let summary = Summary {
        config_hash: &hash,
        mode: cfg.train.mode,
        frozen_base_check,
        base_digest_before: &log.base_digest_before,
        base_digest_after: &log.base_digest_after,
        trainable_params: log.trainable.len(),
        final_heldout_r1: log.final_r1(),
        wall_clock_s: log.wall_clock_s,
        checkpoint: out_ckpt.display().to_string(),
        warnings: &log.warnings,
    };
    writeln!(log_w, "{}", serde_json::to_string(&summary).expect("summary serializes")).map_err(CliError::runtime)?;
    log_w.flush().map_err(CliError::runtime)?;
    println!(
        "frozen-base check: {frozen_base_check}; final held-out R@1 {}; {:.1}s; config {hash}",
        log.final_r1().map_or("n/a".into(), |r| format!("{r:.4}")),
        log.wall_clock_s
    );
    Ok(log)
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, Option<String>), CliError> {
    Model::read_checkpoint(open(path)?)
        .with_context(|| format!("reading checkpoint {}", path.display()))
        .map_err(CliError::Runtime)
}

pub fn embed(ckpt: &Path, corpus_path: &Path, split: Split, side: Side, out: &Path) -> Result<(), CliError> {
    let (model, hash) = read_checkpoint(ckpt)?;
    let corpus = read_corpus(corpus_path)?;
    let mut entries = Vec::new();
    for rec in corpus.split(split) {
        let e = match side {
            Side::Text => model.embed_text(&rec.text),
            Side::Image => model.embed_image(&rec.grid),
        }
        .with_context(|| format!("embedding {}", rec.id))?;
        entries.push((rec.id.clone(), e, rec.grid.geo));
    }
    if entries.is_empty() {
        return Err(CliError::Usage(format!("split {split} of {} is empty", corpus_path.display())));
    }
    let count = entries.len();
    let index = build_index(entries).map_err(CliError::runtime)?;
    let mut w = create(out)?;
    index.write_to(&mut w).map_err(CliError::runtime)?;
    w.flush().map_err(CliError::runtime)?;
    let side = match side {
        Side::Text => "text",
        Side::Image => "image",
    };
    write_meta(
        out,
        &Meta {
            config_hash: hash.unwrap_or_else(|| "unknown".into()),
            command: "embed".into(),
            split: Some(split.to_string()),
            side: Some(side.into()),
            count: Some(count),
        },
    )?;
    println!("wrote {count} {side} embeddings to {}", out.display());
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingIndex, CliError> {
    EmbeddingIndex::read_from(open(path)?)
        .with_context(|| format!("reading embeddings {}", path.display()))
        .map_err(CliError::Runtime)
}

/// Query id -> (truth id, truth location).
pub fn read_truth(path: &Path) -> Result<HashMap<String, (String, GeoPoint)>, CliError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        let corpus = read_corpus(path)?;
        return Ok(corpus
            .records()
            .iter()
            .map(|r| (r.id.clone(), (r.id.clone(), r.grid.geo)))
            .collect());
    }
    let mut truth = HashMap::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(CliError::runtime)?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || CliError::runtime(anyhow!("{}:{}: expected query_id,truth_id,lat,lon", path.display(), n + 1));
        let [query, truth_id, lat, lon] = fields.as_slice() else {
            return Err(bad());
        };
        let lat: f64 = lat.parse().map_err(|_| bad())?;
        let lon: f64 = lon.parse().map_err(|_| bad())?;
        let geo = GeoPoint::new(lat, lon).map_err(CliError::runtime)?;
        truth.insert(query.to_string(), (truth_id.to_string(), geo));
    }
    Ok(truth)
}

/// Ranks every query against `index` and scores against `truth`.
pub fn evaluate_files(
    queries: &EmbeddingIndex,
    index: &EmbeddingIndex,
    truth: &HashMap<String, (String, GeoPoint)>,
    strict_loc: bool,
) -> Result<EvalReport, CliError> {
    let mut results: Vec<RetrievalResult> = Vec::with_capacity(queries.len());
    let mut truth_ids = Vec::with_capacity(queries.len());
    let mut truth_geo = Vec::with_capacity(queries.len());
    for (i, id) in queries.ids().iter().enumerate() {
        let (tid, geo) = truth
            .get(id)
            .ok_or_else(|| CliError::runtime(anyhow!("no ground truth for query {id}")))?;
        results.push(index.query_topk(&queries.embedding(i), EVAL_TOPK).map_err(CliError::runtime)?);
        truth_ids.push(tid.clone());
        truth_geo.push(*geo);
    }
    evaluate(&results, &truth_ids, &truth_geo, index, strict_loc).map_err(CliError::runtime)
}

pub fn eval(
    query_emb: &Path,
    index_emb: &Path,
    truth_path: &Path,
    out: &Path,
    strict_loc: bool,
) -> Result<EvalReport, CliError> {
    let queries = read_embeddings(query_emb)?;
    let index = read_embeddings(index_emb)?;
    let truth = read_truth(truth_path)?;
    let report = evaluate_files(&queries, &index, &truth, strict_loc)?;
    let meta = match read_meta(query_emb)? {
        Some(m) => Some(m),
        None => read_meta(index_emb)?,
    };
    let doc = EvalDocument {
        config_hash: meta.as_ref().map_or("unknown".into(), |m| m.config_hash.clone()),
        split: meta.and_then(|m| m.split).unwrap_or_else(|| "unknown".into()),
        strict_loc,
        queries: report.queries,
        recall: report.recall.clone(),
        localization: report.localization.clone(),
    };
    let (json_path, csv_path) = write_eval_reports(out, &doc, &report)?;
    for (k, v) in &report.recall {
        println!("R@{k:<4} {v:.4}");
    }
    for (d, v) in &report.localization {
        println!("L@{d:<4} {v:.4}");
    }
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(report)
}

pub fn gradcheck(seed: u64, inject_bug: bool) -> Result<(), CliError> {
    let mut opts = SuiteOptions::new(seed);
    if inject_bug {
        opts = opts.with_injected_bug();
    }
    let report = gradsuite::run(&opts).map_err(CliError::runtime)?;
    for c in &report.cases {
        println!(
            "{:<4} {:<52} seed {:<4} max rel err {:.2e} ({})",
            if c.passed { "PASS" } else { "FAIL" },
            c.case,
            c.seed,
            c.max_rel_err,
            c.worst_param
        );
    }
    for f in &report.frozen {
        println!(
            "{:<4} frozen params of {:<38} seed {:<4} {} matrices, max |grad| {:e}",
            if f.max_abs_grad == 0.0 { "PASS" } else { "FAIL" },
            f.case,
            f.seed,
            f.frozen_params,
            f.max_abs_grad
        );
    }
    println!(
        "{} cases, {} failed, step {:e}, tol {:e}, {:.1}s",
        report.cases.len(),
        report.failures().len(),
        report.step,
        report.tol,
        report.elapsed_s
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::runtime(anyhow!("gradient check failed")))
    }
}
