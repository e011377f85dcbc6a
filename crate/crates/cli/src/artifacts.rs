//! Provenance sidecars and report files.
//!
//! Corpus and embedding files have fixed formats with no room for metadata,
//! so each gets a `<file>.meta.json` sidecar carrying the config hash.
//! Checkpoints embed the hash directly; CSV and JSON reports carry it inline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ngcg::geoeval::EvalReport;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const EVAL_CSV_HEADER: &str = "metric,value,K-or-D,split,config-hash";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

pub fn meta_path(file: &Path) -> PathBuf {
    let mut name = file.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_meta(file: &Path, meta: &Meta) -> Result<(), CliError> {
    let path = meta_path(file);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Runtime)
}

/// `None` when the sidecar is absent; a malformed sidecar is an error.
pub fn read_meta(file: &Path) -> Result<Option<Meta>, CliError> {
    let path = meta_path(file);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map(Some)
            .map_err(CliError::Runtime),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::runtime(e)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub config_hash: String,
    pub split: String,
    pub strict_loc: bool,
    pub queries: usize,
    pub recall: Vec<(usize, f64)>,
    pub localization: Vec<(f64, f64)>,
}

pub fn eval_csv(report: &EvalReport, split: &str, config_hash: &str) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for &(k, v) in &report.recall {
        writeln!(out, "R@{k},{v},{k},{split},{config_hash}").expect("string write");
    }
    for &(d, v) in &report.localization {
        writeln!(out, "L@{d},{v},{d},{split},{config_hash}").expect("string write");
    }
    out
}

/// Writes `<stem>.json` and `<stem>.csv` next to `out`; returns both paths.
pub fn write_eval_reports(out: &Path, doc: &EvalDocument, report: &EvalReport) -> Result<(PathBuf, PathBuf), CliError> {
    let json_path = out.with_extension("json");
    let csv_path = out.with_extension("csv");
    let json = serde_json::to_string_pretty(doc).expect("report serializes");
    fs::write(&json_path, json + "\n").with_context(|| format!("writing {}", json_path.display()))?;
    fs::write(&csv_path, eval_csv(report, &doc.split, &doc.config_hash))
        .with_context(|| format!("writing {}", csv_path.display()))?;
    Ok((json_path, csv_path))
}
