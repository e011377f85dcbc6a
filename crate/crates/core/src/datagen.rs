//! Deterministic synthetic corpus of paired token sequences and patch grids.
//!
//! Each scene draws a distinct bucket code over `m` factors; its latent `z`
//! holds the bucket centers. The text lists one bucket token per factor
//! (`FACTOR_BASE + j·buckets + bucket`), then a shuffled tail of duplicate
//! factor tokens and filler tokens, then EOS. Patch `p` of the grid is a fixed
//! smooth function of factor `p mod m` alone, shared by every corpus, plus
//! Gaussian noise. Scenes sit on a jittered lat/lon lattice.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, SceneGrid, TokenSequence};
use crate::geoeval::{GeoError, GeoPoint, EARTH_RADIUS_M};
use crate::numcore::Matrix;

/// First factor token id; ids below it are reserved (PAD, EOS).
pub const FACTOR_BASE: u32 = 16;
/// Filler tokens occupy `FILLER_BASE..FILLER_BASE + FILLER_KINDS`.
pub const FILLER_BASE: u32 = 240;
pub const FILLER_KINDS: u32 = 16;
pub const FILLER_COUNT: usize = 4;
/// Seed of the latent-to-grid map; fixed so every corpus shares it.
const MAP_SEED: u64 = 0x0005_eed0_f9e0;
const MIN_GAIN: f64 = 0.5;
const MAX_GAIN: f64 = 2.0;
const ORIGIN: (f64, f64) = (40.70, -74.00);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("corpus line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub seed: u64,
    pub noise: f64,
    pub factors: usize,
    pub buckets: usize,
    /// Upper bound on extra duplicate factor tokens per text.
    pub max_duplicates: usize,
    pub test_fraction: f64,
    /// Guaranteed minimum great-circle distance between scenes.
    pub spacing_m: f64,
    pub patches: usize,
    pub patch_features: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 1024,
            seed: 7,
            noise: 0.05,
            factors: 8,
            buckets: 8,
            max_duplicates: 12,
            test_fraction: 0.2,
            spacing_m: 200.0,
            patches: 16,
            patch_features: 8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.scenes < 2 {
            return err(format!("need at least 2 scenes, got {}", self.scenes));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if self.factors == 0 || self.buckets < 2 {
            return err("need at least 1 factor and 2 buckets".into());
        }
        if FACTOR_BASE as usize + self.factors * self.buckets > FILLER_BASE as usize {
            return err(format!(
                "{} factors x {} buckets overflow the factor token range",
                self.factors, self.buckets
            ));
        }
        let codes = (self.buckets as f64).powi(self.factors as i32);
        if codes < 2.0 * self.scenes as f64 {
            return err(format!("{codes} bucket codes are too few for {} scenes", self.scenes));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return err(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(self.spacing_m > 0.0 && self.spacing_m.is_finite()) {
            return err(format!("spacing must be positive, got {}", self.spacing_m));
        }
        if self.patches == 0 || self.patch_features == 0 {
            return err("grid must be non-empty".into());
        }
        if self.patches < self.factors {
            return err("grid has fewer patches than latent factors; the map cannot be injective".into());
        }
        Ok(())
    }

    /// Longest sequence produced, EOS included.
    pub fn max_text_len(&self) -> usize {
        self.factors + FILLER_COUNT + self.max_duplicates + 1
    }

    /// Checks the corpus fits an encoder's vocabulary, length and grid shape.
    pub fn check_encoder(&self, enc: &EncoderConfig) -> Result<(), DataError> {
        if enc.vocab < (FILLER_BASE + FILLER_KINDS) as usize {
            return Err(DataError::Config(format!("encoder vocabulary {} is below 256", enc.vocab)));
        }
        if enc.max_len < self.max_text_len() {
            return Err(DataError::Config(format!(
                "texts reach {} tokens but encoder max_len is {}",
                self.max_text_len(),
                enc.max_len
            )));
        }
        if (enc.patches, enc.patch_features) != (self.patches, self.patch_features) {
            return Err(DataError::Config("grid shape differs from the encoder's".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub split: Split,
    pub text: TokenSequence,
    pub grid: SceneGrid,
    /// Generating latent; absent for records read back from a file.
    pub latent: Option<Vec<f64>>,
}

/// Invariants: unique ids, one text and one grid per scene, all grids of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    records: Vec<CorpusRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    id: String,
    split: Split,
    lat: f64,
    lon: f64,
    tokens: Vec<u32>,
    eos_index: usize,
    grid: Vec<Vec<f64>>,
}

impl Corpus {
    pub fn from_records(records: Vec<CorpusRecord>) -> Result<Self, DataError> {
        let bad = |line: usize, msg: String| DataError::Parse { line, msg };
        if records.is_empty() {
            return Err(bad(0, "corpus is empty".into()));
        }
        let shape = records[0].grid.patches.shape();
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(bad(i + 1, format!("duplicate id {:?}", r.id)));
            }
            if r.grid.patches.shape() != shape {
                return Err(bad(i + 1, "grid shape differs from the first record".into()));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), DataError> {
        for r in &self.records {
            let rec = RecordJson {
                id: r.id.clone(),
                split: r.split,
                lat: r.grid.geo.lat(),
                lon: r.grid.geo.lon(),
                tokens: r.text.tokens().to_vec(),
                eos_index: r.text.eos_index(),
                grid: (0..r.grid.patches.rows()).map(|p| r.grid.patches.row(p).to_vec()).collect(),
            };
            serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, DataError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| DataError::Parse { line: i + 1, msg };
            let rec: RecordJson = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let text = TokenSequence::new(rec.tokens, rec.eos_index).map_err(|e| bad(e.to_string()))?;
            let width = rec.grid.first().map_or(0, Vec::len);
            if width == 0 || rec.grid.iter().any(|row| row.len() != width) {
                return Err(bad("grid rows must be non-empty and equal length".into()));
            }
            let patches = Matrix::from_rows(&rec.grid);
            let geo = GeoPoint::new(rec.lat, rec.lon).map_err(|e| bad(e.to_string()))?;
            records.push(CorpusRecord {
                id: rec.id,
                split: rec.split,
                text,
                grid: SceneGrid { patches, geo },
                latent: None,
            });
        }
        Self::from_records(records)
    }
}

/// Fixed patch-local map: patch `p` shows factor `j = p mod m` as
/// `tanh(a_pk·z_j + b_pk)` over its features `k`, with fixed gains
/// `|a_pk| ≥ MIN_GAIN` so every feature is strictly monotone in `z_j`.
struct LatentMap {
    patches: usize,
    features: usize,
    gains: Vec<f64>,
    offsets: Vec<f64>,
}

impl LatentMap {
    fn new(patches: usize, features: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(MAP_SEED);
        let n = patches * features;
        let gains = (0..n)
            .map(|_| {
                let g: f64 = rng.random_range(MIN_GAIN..MAX_GAIN);
                if rng.random_bool(0.5) {
                    g
                } else {
                    -g
                }
            })
            .collect();
        let offsets = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        Self {
            patches,
            features,
            gains,
            offsets,
        }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.patches * self.features)
            .map(|i| {
                let factor = z[(i / self.features) % z.len()];
                (self.gains[i] * factor + self.offsets[i]).tanh()
            })
            .collect()
    }
}

fn bucket_center(b: usize, buckets: usize) -> f64 {
    -1.0 + (2 * b + 1) as f64 / buckets as f64
}

fn bucket_of(v: f64, buckets: usize) -> usize {
    (((v + 1.0) / 2.0 * buckets as f64) as usize).min(buckets - 1)
}

/// Jittered lattice around a fixed origin. Pitch is twice the spacing and each
/// axis jitters by at most a quarter of it, so neighbours stay at least
/// `2s − 2·(s/4)·√2 > s` apart.
fn lattice_points(n: usize, spacing: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GeoPoint>, DataError> {
    let side = (n as f64).sqrt().ceil() as usize;
    let pitch = 2.0 * spacing;
    let jitter = spacing / 4.0;
    let m_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    (0..n)
        .map(|i| {
            let (row, col) = ((i / side) as f64, (i % side) as f64);
            let north = row * pitch + rng.random_range(-jitter..=jitter);
            let east = col * pitch + rng.random_range(-jitter..=jitter);
            let lat = ORIGIN.0 + north / m_per_deg_lat;
            let lon = ORIGIN.1 + east / (m_per_deg_lat * lat.to_radians().cos());
            Ok(GeoPoint::new(lat, lon)?)
        })
        .collect()
}

/// Deterministic in `cfg` (including the seed).
pub fn generate(cfg: &DataConfig) -> Result<Corpus, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let map = LatentMap::new(cfg.patches, cfg.patch_features);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("non-negative std");

    let mut codes = HashSet::new();
    let mut latents = Vec::with_capacity(cfg.scenes);
    while latents.len() < cfg.scenes {
        let code: Vec<usize> = (0..cfg.factors).map(|_| rng.random_range(0..cfg.buckets)).collect();
        if codes.insert(code.clone()) {
            latents.push(code.iter().map(|&b| bucket_center(b, cfg.buckets)).collect::<Vec<f64>>());
        }
    }

    let geos = lattice_points(cfg.scenes, cfg.spacing_m, &mut rng)?;

    let n_test = ((cfg.scenes as f64 * cfg.test_fraction).round() as usize).clamp(1, cfg.scenes - 1);
    let mut order: Vec<usize> = (0..cfg.scenes).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; cfg.scenes];
    for &i in &order[..n_test] {
        splits[i] = Split::Test;
    }

    let records = latents
        .into_iter()
        .zip(geos)
        .enumerate()
        .map(|(i, (z, geo))| {
            let factor_tokens: Vec<u32> = z
                .iter()
                .enumerate()
                .map(|(j, &v)| FACTOR_BASE + (j * cfg.buckets + bucket_of(v, cfg.buckets)) as u32)
                .collect();
            let duplicates = rng.random_range(0..=cfg.max_duplicates);
            let mut tail = Vec::with_capacity(duplicates + FILLER_COUNT);
            for _ in 0..duplicates {
                tail.push(factor_tokens[rng.random_range(0..factor_tokens.len())]);
            }
            for _ in 0..FILLER_COUNT {
                tail.push(FILLER_BASE + rng.random_range(0..FILLER_KINDS));
            }
            tail.shuffle(&mut rng);
            let mut content = factor_tokens.clone();
            content.extend(tail);
            let mut features = map.apply(&z);
            if cfg.noise > 0.0 {
                for f in &mut features {
                    *f += noise.sample(&mut rng);
                }
            }
            let patches = Matrix::new(cfg.patches, cfg.patch_features, features).expect("sized");
            CorpusRecord {
                id: format!("scene-{i:05}"),
                split: splits[i],
                text: TokenSequence::from_content(&content),
                grid: SceneGrid { patches, geo },
                latent: Some(z),
            }
        })
        .collect();
    Corpus::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EOS_ID;
    use crate::geoeval::haversine;

    fn small(scenes: usize, noise: f64) -> DataConfig {
        DataConfig {
            scenes,
            noise,
            ..DataConfig::default()
        }
    }

    fn bytes(c: &Corpus) -> Vec<u8> {
        let mut out = Vec::new();
        c.write_jsonl(&mut out).unwrap();
        out
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = small(64, 0.1);
        assert_eq!(bytes(&generate(&cfg).unwrap()), bytes(&generate(&cfg).unwrap()));
        let other = DataConfig { seed: 8, ..cfg };
        assert_ne!(bytes(&generate(&other).unwrap()), bytes(&generate(&small(64, 0.1)).unwrap()));
    }

    #[test]
    fn ten_scenes_ten_unique_ids() {
        let c = generate(&small(10, 0.1)).unwrap();
        assert_eq!(c.len(), 10);
        let ids: HashSet<_> = c.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), 10);
        assert_eq!(c.split(Split::Test).count(), 2);
        assert_eq!(c.split(Split::Train).count(), 8);
    }

    #[test]
    fn noiseless_grids_and_texts_are_pairwise_distinct() {
        let c = generate(&small(300, 0.0)).unwrap();
        let recs = c.records();
        for i in 0..recs.len() {
            for j in i + 1..recs.len() {
                assert!(recs[i].grid.patches.max_abs_diff(&recs[j].grid.patches) > 0.0, "{i} {j}");
                let (mut a, mut b) = (recs[i].text.tokens().to_vec(), recs[j].text.tokens().to_vec());
                a.retain(|&t| t < FILLER_BASE);
                b.retain(|&t| t < FILLER_BASE);
                a.sort_unstable();
                a.dedup();
                b.sort_unstable();
                b.dedup();
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn lattice_respects_minimum_spacing() {
        let cfg = small(400, 0.1);
        let c = generate(&cfg).unwrap();
        let geos: Vec<_> = c.records().iter().map(|r| r.grid.geo).collect();
        let mut min = f64::INFINITY;
        for i in 0..geos.len() {
            for j in i + 1..geos.len() {
                min = min.min(haversine(geos[i], geos[j]));
            }
        }
        assert!(min >= cfg.spacing_m, "min spacing {min}");
    }

    #[test]
    fn texts_follow_the_token_layout() {
        let cfg = small(50, 0.1);
        for r in generate(&cfg).unwrap().records() {
            let toks = r.text.tokens();
            assert!((13..=cfg.max_text_len()).contains(&toks.len()));
            assert_eq!(toks[r.text.eos_index()], EOS_ID);
            assert_eq!(r.text.eos_index(), toks.len() - 1);
            let fillers = toks.iter().filter(|&&t| t >= FILLER_BASE).count();
            assert_eq!(fillers, FILLER_COUNT);
            let z = r.latent.as_ref().unwrap();
            for (j, &v) in z.iter().enumerate() {
                assert!((-1.0..=1.0).contains(&v));
                let tok = FACTOR_BASE + (j * cfg.buckets + bucket_of(v, cfg.buckets)) as u32;
                assert!(toks.contains(&tok));
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate(&small(20, 0.3)).unwrap();
        let raw = bytes(&c);
        let back = Corpus::read_jsonl(raw.as_slice()).unwrap();
        assert_eq!(bytes(&back), raw);
        let first = std::str::from_utf8(&raw).unwrap().lines().next().unwrap();
        let keys: Vec<_> = ["\"id\"", "\"split\"", "\"lat\"", "\"lon\"", "\"tokens\"", "\"eos_index\"", "\"grid\""]
            .iter()
            .map(|k| first.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(generate(&small(1, 0.1)), Err(DataError::Config(_))));
        assert!(matches!(generate(&small(10, -0.1)), Err(DataError::Config(_))));
        let too_many = DataConfig {
            factors: 29,
            ..small(10, 0.1)
        };
        assert!(matches!(generate(&too_many), Err(DataError::Config(_))));
        let dup = "{\"id\":\"a\",\"split\":\"train\",\"lat\":0.0,\"lon\":0.0,\"tokens\":[1],\"eos_index\":0,\"grid\":[[0.0]]}\n";
        let twice = format!("{dup}{dup}");
        assert!(matches!(Corpus::read_jsonl(twice.as_bytes()), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn default_corpus_fits_default_encoder() {
        DataConfig::default().check_encoder(&EncoderConfig::default()).unwrap();
    }
}
