//! Explanations of a single observation.
//!
//! An explanation for one target class holds the actual b-perturbations
//! found against the model, the surrogate regression, the b-perturbations
//! estimated from it, and the fidelity errors between the two.
//!
//! Work is split so the expensive model-side parts can be cached: actual
//! b-perturbations depend only on x and the model, the synthetic pool only
//! on the seed. Everything regression-side is recomputed per request.

use serde::{Deserialize, Serialize};

use crate::cf_search::{find_b_perturbations, find_level_swaps, BPerturbation, LevelSwap, SearchConfig};
use crate::dataset::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::estimator::{estimate_b_perturbation, fidelity_error, percent_fidelity, EstimatedPerturbation, FidelityRecord, DEFAULT_THRESHOLD};
use crate::lime::{gaussian_pool, lime_fit, DEFAULT_KERNEL_WIDTH, DEFAULT_SAMPLE_COUNT};
use crate::models::{argmax, ClassifierHandle};
use crate::neighbourhood::{
    augment_with_counterfactuals, balanced_neighbourhood, imbalanced_neighbourhood, NeighbourhoodDataset,
    DEFAULT_B1, DEFAULT_B2, DEFAULT_COUNTERFACTUAL_WEIGHT, DEFAULT_SIZE,
};
use crate::surrogate::{fit, Family, FitOptions, SurrogateModel, TermPool, DEFAULT_MAX_TERMS};
use crate::synthgen::{generate, SyntheticPool, DEFAULT_POOL_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Clear,
    Lime,
}

/// Every knob of an explanation run. Unset keys in a config file take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub use_counterfactual_augmentation: bool,
    pub balanced: bool,
    pub centering: bool,
    pub quadratic: bool,
    pub interaction: bool,
    pub max_terms: usize,
    pub family: Family,
    /// Fidelity error threshold T, in standardized units.
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub test_count: usize,
    pub pool_size: usize,
    pub neighbourhood_size: usize,
    pub b1: f64,
    pub b2: f64,
    pub counterfactual_weight: f64,
    pub kernel_width: f64,
    pub lime_sample_count: usize,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Clear,
            use_counterfactual_augmentation: true,
            balanced: true,
            centering: true,
            quadratic: true,
            interaction: true,
            max_terms: DEFAULT_MAX_TERMS,
            family: Family::Multiple,
            threshold: DEFAULT_THRESHOLD,
            seeds: vec![0],
            test_count: 100,
            pool_size: DEFAULT_POOL_SIZE,
            neighbourhood_size: DEFAULT_SIZE,
            b1: DEFAULT_B1,
            b2: DEFAULT_B2,
            counterfactual_weight: DEFAULT_COUNTERFACTUAL_WEIGHT,
            kernel_width: DEFAULT_KERNEL_WIDTH,
            lime_sample_count: DEFAULT_SAMPLE_COUNT,
            search: SearchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.test_count < 1 {
            return bad("test_count must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.max_terms < 1 {
            return bad("max_terms must be at least 1");
        }
        if !(self.threshold > 0.0) {
            return bad("threshold must be positive");
        }
        if !(0.0 < self.b1 && self.b1 < self.b2 && self.b2 < 1.0) {
            return bad("band margins must satisfy 0 < b1 < b2 < 1");
        }
        if self.pool_size < 1 || self.lime_sample_count < 1 {
            return bad("pool sizes must be at least 1");
        }
        if self.neighbourhood_size < 3 {
            return bad("neighbourhood_size must be at least 3");
        }
        if !(self.counterfactual_weight > 0.0) {
            return bad("counterfactual_weight must be positive");
        }
        if !(self.kernel_width > 0.0) {
            return bad("kernel_width must be positive");
        }
        if self.search.steps < 1 || !(self.search.refine_tol > 0.0) {
            return bad("search steps and refine_tol must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn term_pool(&self) -> TermPool {
        match self.method {
            Method::Lime => TermPool::linear_only(),
            Method::Clear => TermPool {
                linear: true,
                quadratic: self.quadratic,
                interaction: self.interaction,
                indicators: true,
            },
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            family: self.family,
            max_terms: self.max_terms,
            pool: self.term_pool(),
            centering: self.centering,
            ..Default::default()
        }
    }

    /// Which pool a run draws from; runs with the same key share a pool.
    pub fn pool_key(&self, seed: u64) -> PoolKey {
        match self.method {
            Method::Clear => PoolKey {
                method: Method::Clear,
                seed,
                size: self.pool_size,
            },
            Method::Lime => PoolKey {
                method: Method::Lime,
                seed,
                size: self.lime_sample_count,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolKey {
    pub method: Method,
    pub seed: u64,
    pub size: usize,
}

/// Draw the synthetic pool a run with this key uses.
pub fn build_pool(key: PoolKey, ds: &Dataset, m: &ClassifierHandle) -> Result<SyntheticPool> {
    match key.method {
        Method::Clear => generate(ds, m, key.size, key.seed),
        Method::Lime => gaussian_pool(ds, m, key.size, key.seed),
    }
}

/// Model-side results for one target class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPerturbations {
    pub target_class: usize,
    pub b_perturbations: Vec<BPerturbation>,
    pub level_swaps: Vec<LevelSwap>,
}

/// Every class except the predicted one, one-vs-rest.
pub fn target_classes(probabilities: &[f64]) -> Vec<usize> {
    let predicted = argmax(probabilities);
    (0..probabilities.len()).filter(|&c| c != predicted).collect()
}

pub fn actual_perturbations(
    x: &Observation,
    m: &ClassifierHandle,
    ds: &Dataset,
    search: &SearchConfig,
) -> Result<Vec<TargetPerturbations>> {
    let probs = m.predict_one(x)?;
    target_classes(&probs)
        .into_iter()
        .map(|c| {
            Ok(TargetPerturbations {
                target_class: c,
                b_perturbations: find_b_perturbations(x, m, ds, c, search)?,
                level_swaps: find_level_swaps(x, m, ds, c, search)?,
            })
        })
        .collect()
}

/// One target class of an explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassExplanation {
    pub target_class: usize,
    pub class_name: String,
    pub target_probability: f64,
    /// The surrogate's response at x. Equal to `target_probability` when
    /// centered.
    pub surrogate_at_x: f64,
    pub b_perturbations: Vec<BPerturbation>,
    pub level_swaps: Vec<LevelSwap>,
    pub surrogate: SurrogateModel,
    pub equation: String,
    pub estimates: Vec<EstimatedPerturbation>,
    pub fidelity: Vec<FidelityRecord>,
    /// `None` when no record is feasible.
    pub percent_fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub method: Method,
    pub seed: u64,
    pub observation: Vec<String>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub classes: Vec<ClassExplanation>,
}

impl Explanation {
    pub fn fidelity_records(&self) -> impl Iterator<Item = &FidelityRecord> {
        self.classes.iter().flat_map(|c| c.fidelity.iter())
    }
}

/// Build the neighbourhood the CLEAR surrogate is fitted to.
pub fn clear_neighbourhood(
    pool: &SyntheticPool,
    ds: &Dataset,
    m: &ClassifierHandle,
    x: &Observation,
    actual: &TargetPerturbations,
    cfg: &RunConfig,
) -> Result<NeighbourhoodDataset> {
    let c = actual.target_class;
    let nbd = if cfg.balanced {
        balanced_neighbourhood(pool, ds, x, c, cfg.b1, cfg.b2, cfg.neighbourhood_size)?
    } else {
        imbalanced_neighbourhood(pool, ds, x, c, cfg.neighbourhood_size.min(pool.len()))?
    };
    if cfg.use_counterfactual_augmentation {
        augment_with_counterfactuals(nbd, &actual.b_perturbations, m, cfg.counterfactual_weight)
    } else {
        Ok(nbd)
    }
}

/// Explain `x` given the cached model-side results. Returns the
/// neighbourhoods alongside (empty for LIME, which uses the whole pool).
pub fn explain_with(
    x: &Observation,
    m: &ClassifierHandle,
    ds: &Dataset,
    cfg: &RunConfig,
    pool: &SyntheticPool,
    actuals: &[TargetPerturbations],
) -> Result<(Explanation, Vec<NeighbourhoodDataset>)> {
    cfg.validate()?;
    let probabilities = m.predict_one(x)?;
    let mut classes = Vec::new();
    let mut neighbourhoods = Vec::new();
    for actual in actuals {
        let c = actual.target_class;
        let y_x = probabilities[c];
        let surrogate = match cfg.method {
            Method::Clear => {
                let nbd = clear_neighbourhood(pool, ds, m, x, actual, cfg)?;
                let s = fit(&nbd, x, y_x, &ds.analysis_space(), &cfg.fit_options())?;
                neighbourhoods.push(nbd);
                s
            }
            Method::Lime => lime_fit(pool, ds, x, y_x, c, cfg.kernel_width, cfg.max_terms)?,
        };
        let estimates: Vec<EstimatedPerturbation> = actual
            .b_perturbations
            .iter()
            .map(|bp| estimate_b_perturbation(&surrogate, bp, cfg.search.threshold))
            .collect();
        let fidelity: Vec<FidelityRecord> = actual
            .b_perturbations
            .iter()
            .zip(&estimates)
            .map(|(bp, est)| fidelity_error(bp, est, cfg.threshold))
            .collect();
        classes.push(ClassExplanation {
            target_class: c,
            class_name: ds.class_names[c].clone(),
            target_probability: y_x,
            surrogate_at_x: surrogate.evaluate(x),
            b_perturbations: actual.b_perturbations.clone(),
            level_swaps: actual.level_swaps.clone(),
            equation: surrogate.equation(),
            surrogate,
            estimates,
            percent_fidelity: percent_fidelity(&fidelity, cfg.threshold).ok(),
            fidelity,
        });
    }
    let explanation = Explanation {
        method: cfg.method,
        seed: pool.seed,
        observation: ds.observation_to_strings(x),
        predicted_class: argmax(&probabilities),
        probabilities,
        classes,
    };
    Ok((explanation, neighbourhoods))
}

/// One-shot explanation with a freshly drawn pool.
pub fn explain(x: &Observation, m: &ClassifierHandle, ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Explanation> {
    cfg.validate()?;
    ds.check_arity(x)?;
    let actuals = actual_perturbations(x, m, ds, &cfg.search)?;
    let pool = build_pool(cfg.pool_key(seed), ds, m)?;
    Ok(explain_with(x, m, ds, cfg, &pool, &actuals)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureSpec;
    use crate::models::AnalyticModel;

    fn dataset() -> Dataset {
        let rows = (0..60)
            .map(|i| Observation::new(vec![(i % 12) as f64 - 5.5, ((i * 7) % 11) as f64 - 5.0]))
            .collect();
        Dataset::new(
            vec![FeatureSpec::numeric("a"), FeatureSpec::numeric("b")],
            rows,
            (0..60).map(|i| i % 2).collect(),
            vec!["neg".into(), "pos".into()],
        )
        .unwrap()
    }

    fn small() -> RunConfig {
        RunConfig {
            pool_size: 5_000,
            lime_sample_count: 2_000,
            ..Default::default()
        }
    }

    #[test]
    fn linear_model_is_explained_exactly() {
        let ds = dataset();
        let m = AnalyticModel::logistic(&ds, 0.3, vec![1.2, -0.7]).unwrap().into_handle();
        let x = Observation::new(vec![-2.0, 1.0]);
        let e = explain(&x, &m, &ds, &small(), 4).unwrap();
        assert_eq!(e.predicted_class, 0);
        assert_eq!(e.classes.len(), 1);
        let c = &e.classes[0];
        assert_eq!(c.class_name, "pos");
        assert!((c.surrogate_at_x - c.target_probability).abs() < 1e-9);
        assert_eq!(c.b_perturbations.len(), 2);
        for r in &c.fidelity {
            assert!(r.error < 0.05, "{r:?}");
        }
        assert_eq!(c.percent_fidelity, Some(1.0));
    }

    #[test]
    fn lime_is_uncentered() {
        let ds = dataset();
        let m = AnalyticModel::logistic(&ds, 0.3, vec![1.2, -0.7]).unwrap().into_handle();
        let x = Observation::new(vec![-2.0, 1.0]);
        let cfg = RunConfig {
            method: Method::Lime,
            ..small()
        };
        let e = explain(&x, &m, &ds, &cfg, 4).unwrap();
        let c = &e.classes[0];
        assert!(!c.surrogate.centered);
        assert!(c.surrogate.terms.iter().all(|t| matches!(t, crate::surrogate::Term::Linear { .. })));
    }

    #[test]
    fn config_toml_defaults_and_errors() {
        let cfg = RunConfig::from_toml("max_terms = 8\nseeds = [1, 2]\n[search]\nsteps = 100\n").unwrap();
        assert_eq!(cfg.max_terms, 8);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.search.steps, 100);
        assert_eq!(cfg.neighbourhood_size, 200);
        assert!(RunConfig::from_toml("max_terms = 0").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("b1 = 0.7").is_err());
        assert!(RunConfig::from_toml("seeds = []").is_err());
    }

    #[test]
    fn multiclass_targets_every_other_class() {
        assert_eq!(target_classes(&[0.2, 0.5, 0.3]), vec![0, 2]);
        assert_eq!(target_classes(&[0.9, 0.1]), vec![1]);
    }
}
