//! Neighbourhood datasets around the observation being explained.
//!
//! The balanced variant takes the nearest pool points from each of three
//! target-class probability bands, `(0, b1]`, `(b1, b2]` and `(b2, 1]`, so
//! the regression sees a dense cloud between x and the far side of the
//! decision boundary.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cf_search::BPerturbation;
use crate::dataset::{Dataset, FeatureKind, Observation};
use crate::error::{Error, Result};
use crate::models::ClassifierHandle;
use crate::synthgen::SyntheticPool;

pub const DEFAULT_SIZE: usize = 200;
pub const DEFAULT_B1: f64 = 0.4;
pub const DEFAULT_B2: f64 = 0.6;
pub const DEFAULT_COUNTERFACTUAL_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighbourhoodDataset {
    pub target_class: usize,
    pub b1: f64,
    pub b2: f64,
    pub points: Vec<Observation>,
    /// Target-class probability from the model.
    pub responses: Vec<f64>,
    pub weights: Vec<f64>,
    /// 0, 1 or 2 for the low, middle and high band; `None` when the response
    /// falls in no band (exactly zero).
    pub band_of: Vec<Option<usize>>,
    pub is_counterfactual: Vec<bool>,
    pub balanced: bool,
    /// Points requested but unavailable, per band (balanced only).
    pub shortfall: [usize; 3],
}

impl NeighbourhoodDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn band_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for (band, cf) in self.band_of.iter().zip(&self.is_counterfactual) {
            if let (Some(b), false) = (band, cf) {
                counts[*b] += 1;
            }
        }
        counts
    }

    fn push(&mut self, point: Observation, response: f64, weight: f64, counterfactual: bool) {
        self.band_of.push(band_index(response, self.b1, self.b2));
        self.points.push(point);
        self.responses.push(response);
        self.weights.push(weight);
        self.is_counterfactual.push(counterfactual);
    }

    pub fn write_csv<W: Write>(&self, ds: &Dataset, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = ds.feature_names();
        header.extend(["response", "weight", "band", "counterfactual"].map(String::from));
        w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        for i in 0..self.len() {
            let mut record = ds.observation_to_strings(&self.points[i]);
            record.push(format!("{}", self.responses[i]));
            record.push(format!("{}", self.weights[i]));
            record.push(self.band_of[i].map(|b| b.to_string()).unwrap_or_default());
            record.push(self.is_counterfactual[i].to_string());
            w.write_record(&record).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

pub fn band_index(response: f64, b1: f64, b2: f64) -> Option<usize> {
    if response > 0.0 && response <= b1 {
        Some(0)
    } else if response > b1 && response <= b2 {
        Some(1)
    } else if response > b2 && response <= 1.0 {
        Some(2)
    } else {
        None
    }
}

fn band_label(band: usize, b1: f64, b2: f64) -> String {
    match band {
        0 => format!("(0, {b1}]"),
        1 => format!("({b1}, {b2}]"),
        _ => format!("({b2}, 1]"),
    }
}

/// Euclidean distance in analysis space; each categorical mismatch adds 1.
pub fn analysis_distance(ds: &Dataset, a: &[f64], b: &[f64]) -> f64 {
    ds.features
        .iter()
        .zip(a.iter().zip(b))
        .map(|(spec, (x, y))| match spec.kind {
            FeatureKind::Numeric => (x - y) * (x - y),
            FeatureKind::Categorical => {
                if x == y {
                    0.0
                } else {
                    1.0
                }
            }
        })
        .sum::<f64>()
        .sqrt()
}

fn pool_distances(pool: &SyntheticPool, ds: &Dataset, x: &Observation) -> Vec<f64> {
    let center = ds.to_analysis(x);
    pool.analysis
        .iter()
        .map(|p| analysis_distance(ds, p, &center))
        .collect()
}

fn by_distance(d: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| d[*a].total_cmp(&d[*b]).then(a.cmp(b))
}

/// The `k` nearest of `candidates`, nearest first; ties go to the lower pool
/// index.
fn nearest(mut candidates: Vec<usize>, distances: &[f64], k: usize) -> Vec<usize> {
    let cmp = by_distance(distances);
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, &cmp);
        candidates.truncate(k);
    }
    candidates.sort_by(&cmp);
    candidates
}

fn empty(target_class: usize, b1: f64, b2: f64, balanced: bool) -> NeighbourhoodDataset {
    NeighbourhoodDataset {
        target_class,
        b1,
        b2,
        points: Vec::new(),
        responses: Vec::new(),
        weights: Vec::new(),
        band_of: Vec::new(),
        is_counterfactual: Vec::new(),
        balanced,
        shortfall: [0; 3],
    }
}

/// Per-band quotas: `n / 3` each, remainder to the low band first.
pub fn band_quotas(n: usize) -> [usize; 3] {
    let base = n / 3;
    let rem = n % 3;
    [0, 1, 2].map(|k| base + usize::from(k < rem))
}

pub fn balanced_neighbourhood(
    pool: &SyntheticPool,
    ds: &Dataset,
    x: &Observation,
    target_class: usize,
    b1: f64,
    b2: f64,
    n: usize,
) -> Result<NeighbourhoodDataset> {
    if !(0.0 < b1 && b1 < b2 && b2 < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "band margins must satisfy 0 < b1 < b2 < 1 (got {b1}, {b2})"
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument("neighbourhood size must be at least 3".into()));
    }
    ds.check_arity(x)?;
    let distances = pool_distances(pool, ds, x);
    let mut members: [Vec<usize>; 3] = Default::default();
    for (i, probs) in pool.probabilities.iter().enumerate() {
        if let Some(b) = band_index(probs[target_class], b1, b2) {
            members[b].push(i);
        }
    }
    let quotas = band_quotas(n);
    let mut out = empty(target_class, b1, b2, true);
    for (band, idx) in members.into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::BandStarvation {
                band: band_label(band, b1, b2),
                pool_size: pool.len(),
            });
        }
        out.shortfall[band] = quotas[band].saturating_sub(idx.len());
        for i in nearest(idx, &distances, quotas[band]) {
            let y = pool.probabilities[i][target_class];
            out.push(pool.observations[i].clone(), y, 1.0, false);
        }
    }
    Ok(out)
}

/// The `n` pool points nearest to `x`, ignoring bands.
pub fn imbalanced_neighbourhood(
    pool: &SyntheticPool,
    ds: &Dataset,
    x: &Observation,
    target_class: usize,
    n: usize,
) -> Result<NeighbourhoodDataset> {
    if n > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "neighbourhood size {n} exceeds pool size {}",
            pool.len()
        )));
    }
    ds.check_arity(x)?;
    let distances = pool_distances(pool, ds, x);
    let mut out = empty(target_class, DEFAULT_B1, DEFAULT_B2, false);
    for i in nearest((0..pool.len()).collect(), &distances, n) {
        let y = pool.probabilities[i][target_class];
        out.push(pool.observations[i].clone(), y, 1.0, false);
    }
    Ok(out)
}

/// Append each b-counterfactual point with `weight` and its model response.
pub fn augment_with_counterfactuals(
    mut nbd: NeighbourhoodDataset,
    perturbations: &[BPerturbation],
    m: &ClassifierHandle,
    weight: f64,
) -> Result<NeighbourhoodDataset> {
    if perturbations.is_empty() {
        return Ok(nbd);
    }
    if let Some(bp) = perturbations.iter().find(|bp| bp.target_class != nbd.target_class) {
        return Err(Error::InvalidArgument(format!(
            "perturbation for class {} added to a class {} neighbourhood",
            bp.target_class, nbd.target_class
        )));
    }
    let points: Vec<Observation> = perturbations
        .iter()
        .map(|bp| bp.counterfactual_point.clone())
        .collect();
    let responses = m.class_probability(&points, nbd.target_class)?;
    for (p, y) in points.into_iter().zip(responses) {
        nbd.push(p, y, weight, true);
    }
    Ok(nbd)
}
