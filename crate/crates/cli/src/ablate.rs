//! Ablation grids. Each cell overrides one field of the base config, trains
//! from scratch with the config's seed, and scores the held-out split.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use clap::ValueEnum;
use ngcg::pooling::PoolingStrategy;
use ngcg::trainer::{evaluate_records, TrainMode};
use ngcg::datagen::Split;

use crate::commands::train_experiment;
use crate::config::ExperimentConfig;
use crate::CliError;

pub const CSV_HEADER: &str = "axis_value,R@1,R@5,R@10,L@50,L@100,L@150,seed,config_hash";

/// Initial temperature of the learnable cell.
pub const LEARNABLE_TAU_INIT: f64 = 0.07;
pub const FIXED_TAUS: [f64; 5] = [0.02, 0.03, 0.05, 0.07, 0.1];
pub const ALPHAS: [f64; 4] = [16.0, 32.0, 64.0, 128.0];
pub const ALPHA_RANK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Tau,
    Alpha,
    Pooling,
    Mode,
}

/// `(axis_value label, cell config)` in table order.
pub fn ablation_cells(axis: Axis, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Tau => FIXED_TAUS
            .iter()
            .map(|&t| {
                (
                    t.to_string(),
                    with(&|c| {
                        c.loss.tau = t;
                        c.loss.learnable = false;
                    }),
                )
            })
            .chain(std::iter::once((
                "learnable".to_string(),
                with(&|c| {
                    c.loss.tau = LEARNABLE_TAU_INIT;
                    c.loss.learnable = true;
                }),
            )))
            .collect(),
        Axis::Alpha => ALPHAS
            .iter()
            .map(|&a| {
                (
                    a.to_string(),
                    with(&|c| {
                        c.lora.rank = ALPHA_RANK;
                        c.lora.alpha = a;
                        c.train.mode = TrainMode::Lora;
                    }),
                )
            })
            .collect(),
        Axis::Pooling => PoolingStrategy::ALL
            .iter()
            .map(|&s| (s.to_string(), with(&|c| c.pooling.strategy = s)))
            .collect(),
        Axis::Mode => TrainMode::ALL
            .iter()
            .map(|&m| (m.to_string(), with(&|c| c.train.mode = m)))
            .collect(),
    }
}

/// One CSV row for a trained and evaluated cell.
pub fn run_cell(label: &str, cfg: &ExperimentConfig) -> Result<String, CliError> {
    let (model, corpus, _log) = train_experiment(cfg, |_| {})?;
    let test: Vec<_> = corpus.split(Split::Test).collect();
    let report = evaluate_records(&model, &test, cfg.eval.strict_loc).map_err(CliError::runtime)?;
    let mut row = label.to_string();
    let values = report.recall.iter().map(|r| r.1).chain(report.localization.iter().map(|l| l.1));
    for v in values {
        write!(row, ",{v}").expect("string write");
    }
    write!(row, ",{},{}", cfg.train.seed, cfg.hash()).expect("string write");
    Ok(row)
}

pub fn run(axis: Axis, config: Option<&Path>, out_csv: &Path) -> Result<(), CliError> {
    let base = ExperimentConfig::load(config)?;
    let cells = ablation_cells(axis, &base);
    for (_, cfg) in &cells {
        cfg.validate()?;
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for (label, cfg) in &cells {
        let row = run_cell(label, cfg)?;
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    std::fs::write(out_csv, csv)
        .with_context(|| format!("writing {}", out_csv.display()))
        .map_err(CliError::Runtime)
}
