//! LIME baseline: kernel-weighted linear regression over a Gaussian
//! synthetic sample, with no centering constraint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind, Observation};
use crate::error::{Error, Result};
use crate::models::ClassifierHandle;
use crate::neighbourhood::analysis_distance;
use crate::surrogate::{fit_analysis, Family, FitOptions, SurrogateModel, TermPool};
use crate::synthgen::{level_samplers, SyntheticPool};

pub const DEFAULT_KERNEL_WIDTH: f64 = 2.0;
pub const DEFAULT_SAMPLE_COUNT: usize = 15_000;
pub const WIDTH_SWEEP: [f64; 4] = [1.5, 2.0, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub kernel_width: f64,
    pub sample_count: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kernel_width: DEFAULT_KERNEL_WIDTH,
            sample_count: DEFAULT_SAMPLE_COUNT,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_width > 0.0) {
            return Err(Error::InvalidArgument("kernel width must be positive".into()));
        }
        if self.sample_count < 1 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        Ok(())
    }
}

/// `sqrt(exp(-d² / width²))`
pub fn kernel_weight(d: f64, width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument("kernel width must be positive".into()));
    }
    if d < 0.0 {
        return Err(Error::InvalidArgument("distance must be non-negative".into()));
    }
    Ok((-(d * d) / (width * width)).exp().sqrt())
}

/// Numeric features drawn from `N(mean, stddev)` of the training data,
/// categorical features by training frequency. The sample does not depend
/// on the observation, so one pool serves a whole batch.
pub fn gaussian_pool(ds: &Dataset, m: &ClassifierHandle, count: usize, seed: u64) -> Result<SyntheticPool> {
    if count < 1 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samplers = level_samplers(ds)?;
    let normals = ds
        .features
        .iter()
        .map(|f| Normal::new(f.mean, f.stddev).map_err(|e| Error::InvalidArgument(format!("feature `{}`: {e}", f.name))))
        .collect::<Result<Vec<_>>>()?;
    let observations = (0..count)
        .map(|_| {
            let values = ds
                .features
                .iter()
                .enumerate()
                .map(|(j, f)| match f.kind {
                    FeatureKind::Numeric => normals[j].sample(&mut rng),
                    FeatureKind::Categorical => samplers[j].as_ref().expect("categorical sampler").sample(&mut rng) as f64,
                })
                .collect();
            Observation::new(values)
        })
        .collect();
    SyntheticPool::label(ds, m, observations, seed)
}

/// Fit LIME's surrogate for `x` over every point of `pool`, kernel weighted
/// by standardized distance to `x`.
pub fn lime_fit(
    pool: &SyntheticPool,
    ds: &Dataset,
    x: &Observation,
    y_x: f64,
    target_class: usize,
    kernel_width: f64,
    max_terms: usize,
) -> Result<SurrogateModel> {
    ds.check_arity(x)?;
    let zx = ds.to_analysis(x);
    let weights = pool
        .analysis
        .iter()
        .map(|z| kernel_weight(analysis_distance(ds, z, &zx), kernel_width))
        .collect::<Result<Vec<_>>>()?;
    let responses: Vec<f64> = pool.probabilities.iter().map(|p| p[target_class]).collect();
    let opts = FitOptions {
        family: Family::Multiple,
        max_terms,
        pool: TermPool::linear_only(),
        centering: false,
        ..Default::default()
    };
    fit_analysis(&pool.analysis, &responses, &weights, x, y_x, &ds.analysis_space(), &opts)
}

/// Sample a fresh pool and fit, as a one-shot explanation.
pub fn lime_explain(
    x: &Observation,
    m: &ClassifierHandle,
    ds: &Dataset,
    cfg: &KernelConfig,
    target_class: usize,
    max_terms: usize,
    seed: u64,
) -> Result<SurrogateModel> {
    cfg.validate()?;
    let pool = gaussian_pool(ds, m, cfg.sample_count, seed)?;
    let y_x = m.class_probability(std::slice::from_ref(x), target_class)?[0];
    lime_fit(&pool, ds, x, y_x, target_class, cfg.kernel_width, max_terms)
}
