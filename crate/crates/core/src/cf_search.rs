//! Actual b-perturbations: for each feature, the smallest single-feature
//! change that moves the target-class probability across the boundary.
//!
//! Each numeric feature is scanned on a regular grid moving outward from the
//! observation in both directions, clipped to the training range. The first
//! grid point that flips is refined by bisection against the last point that
//! did not.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::models::{argmax, ClassifierHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Grid resolution: spacing is `(train_max - train_min) / steps`.
    pub steps: usize,
    /// Bisection stops once the bracket is below `refine_tol * range`.
    pub refine_tol: f64,
    /// Target-class probability that counts as crossing the boundary.
    pub threshold: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            steps: 200,
            refine_tol: 1e-4,
            threshold: 0.5,
        }
    }
}

/// Values are in analysis units (standardized); `*_raw` fields keep the
/// original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BPerturbation {
    pub feature: usize,
    pub feature_name: String,
    pub target_class: usize,
    pub original_value: f64,
    pub boundary_value: f64,
    pub delta: f64,
    pub feasible: bool,
    pub counterfactual_point: Observation,
    pub original_raw: f64,
    pub boundary_raw: f64,
}

/// A categorical level change that flips the prediction. These carry no
/// numeric delta and take no part in % fidelity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSwap {
    pub feature: usize,
    pub feature_name: String,
    pub target_class: usize,
    pub from_level: String,
    pub to_level: String,
    pub target_probability: f64,
}

/// Candidate values for `feature`, alternating down/up from x's value.
pub fn search_grid(x: &Observation, feature: usize, ds: &Dataset, steps: usize) -> Result<Vec<f64>> {
    let (down, up) = directional_grid(x, feature, ds, steps)?;
    let mut out = Vec::with_capacity(down.len() + up.len());
    for i in 0..down.len().max(up.len()) {
        if let Some(&v) = down.get(i) {
            out.push(v);
        }
        if let Some(&v) = up.get(i) {
            out.push(v);
        }
    }
    Ok(out)
}

fn directional_grid(
    x: &Observation,
    feature: usize,
    ds: &Dataset,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = ds
        .features
        .get(feature)
        .ok_or_else(|| Error::UnknownFeature(format!("#{feature}")))?;
    if !spec.is_numeric() {
        return Err(Error::NotNumeric(spec.name.clone()));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument("grid needs at least 2 steps".into()));
    }
    ds.check_arity(x)?;
    let (lo, hi) = (spec.train_min, spec.train_max);
    let h = (hi - lo) / steps as f64;
    if h <= 0.0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let origin = x.values[feature];
    let walk = |sign: f64| {
        let mut out = Vec::new();
        let mut k = 1usize;
        loop {
            let v = origin + sign * k as f64 * h;
            k += 1;
            let beyond_far = if sign < 0.0 { v < lo } else { v > hi };
            if beyond_far {
                let edge = if sign < 0.0 { lo } else { hi };
                let moves_away = if sign < 0.0 { edge < origin } else { edge > origin };
                if moves_away && out.last() != Some(&edge) {
                    out.push(edge);
                }
                break;
            }
            // still outside the range on the near side (x itself out of range)
            if v < lo || v > hi {
                continue;
            }
            out.push(v);
        }
        out
    };
    Ok((walk(-1.0), walk(1.0)))
}

/// Actual b-perturbations of `x` towards `target_class`, one per numeric
/// feature for which a flip exists inside the training range.
pub fn find_b_perturbations(
    x: &Observation,
    m: &ClassifierHandle,
    ds: &Dataset,
    target_class: usize,
    cfg: &SearchConfig,
) -> Result<Vec<BPerturbation>> {
    check_target(x, m, target_class, cfg)?;
    let mut out = Vec::new();
    for feature in ds.numeric_features().collect::<Vec<_>>() {
        if let Some(bp) = search_feature(x, m, ds, feature, target_class, cfg)? {
            out.push(bp);
        }
    }
    Ok(out)
}

fn check_target(x: &Observation, m: &ClassifierHandle, target: usize, cfg: &SearchConfig) -> Result<()> {
    if target >= m.class_count() {
        return Err(Error::InvalidArgument(format!("no class {target}")));
    }
    let p = m.predict_one(x)?;
    if argmax(&p) == target || p[target] > cfg.threshold {
        return Err(Error::AlreadyTarget(target));
    }
    Ok(())
}

fn search_feature(
    x: &Observation,
    m: &ClassifierHandle,
    ds: &Dataset,
    feature: usize,
    target: usize,
    cfg: &SearchConfig,
) -> Result<Option<BPerturbation>> {
    let (down, up) = directional_grid(x, feature, ds, cfg.steps)?;
    if down.is_empty() && up.is_empty() {
        return Ok(None);
    }
    let origin = x.values[feature];
    let candidates: Vec<Observation> = down
        .iter()
        .chain(&up)
        .map(|&v| x.with_value(feature, v))
        .collect();
    let probs = m.class_probability(&candidates, target)?;
    let (p_down, p_up) = probs.split_at(down.len());
    let flips = |p: f64| p > cfg.threshold;

    let tol = cfg.refine_tol * ds.features[feature].range();
    let mut best: Option<f64> = None;
    for (grid, p) in [(&down, p_down), (&up, p_up)] {
        let Some(k) = p.iter().position(|&v| flips(v)) else {
            continue;
        };
        let mut lo = if k == 0 { origin } else { grid[k - 1] };
        let mut hi = grid[k];
        while (hi - lo).abs() > tol {
            let mid = 0.5 * (lo + hi);
            let pm = m.class_probability(&[x.with_value(feature, mid)], target)?[0];
            if flips(pm) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if best.map_or(true, |b| (hi - origin).abs() < (b - origin).abs()) {
            best = Some(hi);
        }
    }

    Ok(best.map(|boundary_raw| {
        let spec = &ds.features[feature];
        let original_value = ds.feature_to_analysis(feature, origin);
        let boundary_value = ds.feature_to_analysis(feature, boundary_raw);
        BPerturbation {
            feature,
            feature_name: spec.name.clone(),
            target_class: target,
            original_value,
            boundary_value,
            delta: boundary_value - original_value,
            feasible: spec.contains(boundary_raw),
            counterfactual_point: x.with_value(feature, boundary_raw),
            original_raw: origin,
            boundary_raw,
        }
    }))
}

/// Categorical counterfactuals: every alternative level that flips `x`.
pub fn find_level_swaps(
    x: &Observation,
    m: &ClassifierHandle,
    ds: &Dataset,
    target_class: usize,
    cfg: &SearchConfig,
) -> Result<Vec<LevelSwap>> {
    check_target(x, m, target_class, cfg)?;
    let mut out = Vec::new();
    for (feature, spec) in ds.features.iter().enumerate() {
        if spec.is_numeric() {
            continue;
        }
        let current = x.values[feature] as usize;
        let alternatives: Vec<usize> = (0..spec.levels.len()).filter(|&l| l != current).collect();
        let batch: Vec<Observation> = alternatives
            .iter()
            .map(|&l| x.with_value(feature, l as f64))
            .collect();
        let probs = m.class_probability(&batch, target_class)?;
        for (&level, &p) in alternatives.iter().zip(&probs) {
            if p > cfg.threshold {
                out.push(LevelSwap {
                    feature,
                    feature_name: spec.name.clone(),
                    target_class,
                    from_level: spec.levels[current].clone(),
                    to_level: spec.levels[level].clone(),
                    target_probability: p,
                });
            }
        }
    }
    Ok(out)
}
