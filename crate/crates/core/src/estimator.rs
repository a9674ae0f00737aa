//! Estimated b-perturbations read off a surrogate, and fidelity scoring.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cf_search::BPerturbation;
use crate::error::{Error, Result};
use crate::surrogate::SurrogateModel;

/// Default fidelity threshold, in standardized units.
pub const DEFAULT_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateStatus {
    Ok,
    NoRealRoot,
    NoTermForFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedPerturbation {
    pub feature: usize,
    pub feature_name: String,
    pub target_class: usize,
    pub original_value: f64,
    pub estimated_boundary_value: Option<f64>,
    pub estimated_delta: Option<f64>,
    /// Number of distinct real roots of the boundary equation.
    pub root_count: usize,
    pub status: EstimateStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub feature: usize,
    pub feature_name: String,
    pub target_class: usize,
    pub actual_delta: f64,
    pub estimated_delta: Option<f64>,
    /// Infinite when estimation failed; serialized as `null`.
    #[serde(serialize_with = "ser_error", deserialize_with = "de_error")]
    pub error: f64,
    pub feasible: bool,
    pub within_threshold: bool,
    pub status: EstimateStatus,
}

fn ser_error<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_error<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// Real roots of `a t² + b t + c = 0`, ascending. Treated as linear when
/// `|a| < 1e-12`.
pub fn real_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a.abs() < 1e-12 {
        if b == 0.0 {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    if disc == 0.0 {
        return vec![-b / (2.0 * a)];
    }
    // avoids cancellation between b and sqrt(disc)
    let sign = if b < 0.0 { -1.0 } else { 1.0 };
    let q = -0.5 * (b + sign * disc.sqrt());
    let mut roots = vec![q / a, c / q];
    roots.sort_by(f64::total_cmp);
    roots
}

/// Solve the surrogate for the value of `bp.feature` at which the response
/// equals `boundary`, other features held at `bp.counterfactual_point`.
pub fn estimate_b_perturbation(s: &SurrogateModel, bp: &BPerturbation, boundary: f64) -> EstimatedPerturbation {
    let mut est = EstimatedPerturbation {
        feature: bp.feature,
        feature_name: bp.feature_name.clone(),
        target_class: bp.target_class,
        original_value: bp.original_value,
        estimated_boundary_value: None,
        estimated_delta: None,
        root_count: 0,
        status: EstimateStatus::NoTermForFeature,
    };
    if !s.mentions(bp.feature) {
        return est;
    }
    let z = s.space.to_analysis(&bp.counterfactual_point);
    let [c0, c1, c2] = s.univariate(bp.feature, &z);
    let roots = real_roots(c2, c1, c0 - s.score_at_probability(boundary));
    est.root_count = roots.len();
    let origin = bp.original_value;
    match roots
        .into_iter()
        .min_by(|a, b| (a - origin).abs().total_cmp(&(b - origin).abs()))
    {
        Some(root) => {
            est.estimated_boundary_value = Some(root);
            est.estimated_delta = Some(root - origin);
            est.status = EstimateStatus::Ok;
        }
        None => est.status = EstimateStatus::NoRealRoot,
    }
    est
}

/// Compare an estimate with the actual b-perturbation. Failed estimates
/// get an infinite error.
pub fn fidelity_error(actual: &BPerturbation, estimated: &EstimatedPerturbation, threshold: f64) -> FidelityRecord {
    let error = match estimated.estimated_delta {
        Some(d) => (d - actual.delta).abs(),
        None => f64::INFINITY,
    };
    FidelityRecord {
        feature: actual.feature,
        feature_name: actual.feature_name.clone(),
        target_class: actual.target_class,
        actual_delta: actual.delta,
        estimated_delta: estimated.estimated_delta,
        error,
        feasible: actual.feasible,
        within_threshold: error < threshold,
        status: estimated.status,
    }
}

/// Share of feasible records with error below `threshold`.
pub fn percent_fidelity(records: &[FidelityRecord], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument("threshold must be positive".into()));
    }
    let feasible: Vec<&FidelityRecord> = records.iter().filter(|r| r.feasible).collect();
    if feasible.is_empty() {
        return Err(Error::NoFeasibleRecords);
    }
    let hits = feasible.iter().filter(|r| r.error < threshold).count();
    Ok(hits as f64 / feasible.len() as f64)
}
