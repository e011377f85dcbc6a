//! Top-K recall (R@K) and localization recall (L@D) over retrieval results.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::{EmbeddingIndex, RetrievalResult};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const LOC_DISTANCES_M: [f64; 3] = [50.0, 100.0, 150.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside (-180, 180]")]
    Longitude(f64),
    #[error("ground-truth id {0:?} is not in the index")]
    MissingTruth(String),
    #[error("{queries} results but {truths} ground-truth entries")]
    Length { queries: usize, truths: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("no location for candidate {0:?}")]
    MissingGeo(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(lon > -180.0 && lon <= 180.0) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

fn check_lengths(results: &[RetrievalResult], truths: usize) -> Result<(), GeoError> {
    if results.len() != truths {
        return Err(GeoError::Length {
            queries: results.len(),
            truths,
        });
    }
    Ok(())
}

/// Fraction of queries whose ground-truth id is among the first `k` ranked ids.
/// `universe` is the set of ids held by the index the results came from.
pub fn recall_at_k(
    results: &[RetrievalResult],
    truth: &[String],
    universe: &HashSet<&str>,
    k: usize,
) -> Result<f64, GeoError> {
    if k == 0 {
        return Err(GeoError::ZeroK);
    }
    check_lengths(results, truth.len())?;
    if let Some(missing) = truth.iter().find(|t| !universe.contains(t.as_str())) {
        return Err(GeoError::MissingTruth(missing.clone()));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.ids.iter().take(k).any(|id| id == *t))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Fraction of queries whose top-1 candidate lies strictly within `d` meters
/// of the ground-truth location. With `require_correct`, the top-1 must also
/// be the ground-truth candidate.
pub fn loc_at_d(
    results: &[RetrievalResult],
    truth_geo: &[GeoPoint],
    index: &EmbeddingIndex,
    d: f64,
    require_correct: Option<&[String]>,
) -> Result<f64, GeoError> {
    check_lengths(results, truth_geo.len())?;
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (q, (r, truth)) in results.iter().zip(truth_geo).enumerate() {
        let Some(top) = r.ids.first() else { continue };
        let geo = index
            .geo_of(top)
            .ok_or_else(|| GeoError::MissingGeo(top.clone()))?;
        let correct = require_correct.is_none_or(|ids| ids[q] == *top);
        if correct && haversine(*truth, geo) < d {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(K, R@K)` for K in [`RECALL_KS`].
    pub recall: Vec<(usize, f64)>,
    /// `(D, L@D)` for D in [`LOC_DISTANCES_M`].
    pub localization: Vec<(f64, f64)>,
    pub queries: usize,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|r| r.1)
    }

    pub fn loc_at(&self, d: f64) -> Option<f64> {
        self.localization.iter().find(|(dd, _)| *dd == d).map(|r| r.1)
    }

    /// R@K non-decreasing in K, L@D non-decreasing in D, all in [0, 1].
    pub fn is_monotone(&self) -> bool {
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        let rec = self.recall.windows(2).all(|w| w[0].1 <= w[1].1);
        let loc = self.localization.windows(2).all(|w| w[0].1 <= w[1].1);
        rec && loc
            && self.recall.iter().all(|r| in_range(r.1))
            && self.localization.iter().all(|l| in_range(l.1))
    }
}

/// Computes the full report. `strict_loc` switches L@D to the conjunctive
/// reading (top-1 correct and within D).
pub fn evaluate(
    results: &[RetrievalResult],
    truth: &[String],
    truth_geo: &[GeoPoint],
    index: &EmbeddingIndex,
    strict_loc: bool,
) -> Result<EvalReport, GeoError> {
    let universe: HashSet<&str> = index.ids().iter().map(String::as_str).collect();
    let recall = RECALL_KS
        .iter()
        .map(|&k| recall_at_k(results, truth, &universe, k).map(|v| (k, v)))
        .collect::<Result<_, _>>()?;
    let strict = strict_loc.then_some(truth);
    let localization = LOC_DISTANCES_M
        .iter()
        .map(|&d| loc_at_d(results, truth_geo, index, d, strict).map(|v| (d, v)))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        recall,
        localization,
        queries: results.len(),
    })
}
