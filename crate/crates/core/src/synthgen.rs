//! Labelled synthetic observations drawn from the training ranges.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind, Observation};
use crate::error::{Error, Result};
use crate::models::{ClassifierHandle, ProbabilityMatrix};

pub const DEFAULT_POOL_SIZE: usize = 50_000;
pub const LABEL_CHUNK: usize = 1_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticPool {
    pub observations: Vec<Observation>,
    pub probabilities: ProbabilityMatrix,
    pub seed: u64,
    /// Analysis-space coordinates of each observation.
    #[serde(skip)]
    pub analysis: Vec<Vec<f64>>,
}

impl SyntheticPool {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Label `observations` with `m` and wrap them as a pool.
    pub fn label(
        ds: &Dataset,
        m: &ClassifierHandle,
        observations: Vec<Observation>,
        seed: u64,
    ) -> Result<SyntheticPool> {
        let mut probabilities = Vec::with_capacity(observations.len());
        for chunk in observations.chunks(LABEL_CHUNK) {
            probabilities.extend(m.predict_proba(chunk)?);
        }
        let analysis = observations.iter().map(|o| ds.to_analysis(o)).collect();
        Ok(SyntheticPool {
            observations,
            probabilities,
            seed,
            analysis,
        })
    }

    /// CSV with one column per feature and one `p_<class>` column per class.
    pub fn write_csv<W: Write>(&self, ds: &Dataset, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = ds.feature_names();
        header.extend(ds.class_names.iter().map(|c| format!("p_{c}")));
        w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        for (obs, probs) in self.observations.iter().zip(&self.probabilities) {
            let mut record = ds.observation_to_strings(obs);
            record.extend(probs.iter().map(|p| format!("{p}")));
            w.write_record(&record).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Numeric features uniform on the training range, categorical features in
/// proportion to their training frequencies.
pub fn generate(ds: &Dataset, m: &ClassifierHandle, count: usize, seed: u64) -> Result<SyntheticPool> {
    if count < 1 {
        return Err(Error::InvalidArgument("pool size must be at least 1".into()));
    }
    let observations = sample_uniform(ds, count, seed)?;
    SyntheticPool::label(ds, m, observations, seed)
}

pub fn sample_uniform(ds: &Dataset, count: usize, seed: u64) -> Result<Vec<Observation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samplers = level_samplers(ds)?;
    Ok((0..count)
        .map(|_| {
            let values = ds
                .features
                .iter()
                .zip(&samplers)
                .map(|(spec, sampler)| match spec.kind {
                    FeatureKind::Numeric => {
                        if spec.train_max > spec.train_min {
                            rng.gen_range(spec.train_min..=spec.train_max)
                        } else {
                            spec.train_min
                        }
                    }
                    FeatureKind::Categorical => {
                        sampler.as_ref().expect("categorical sampler").sample(&mut rng) as f64
                    }
                })
                .collect();
            Observation::new(values)
        })
        .collect())
}

pub(crate) fn level_samplers(ds: &Dataset) -> Result<Vec<Option<WeightedIndex<f64>>>> {
    ds.features
        .iter()
        .map(|spec| match spec.kind {
            FeatureKind::Numeric => Ok(None),
            FeatureKind::Categorical => WeightedIndex::new(&spec.level_frequencies)
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("feature `{}`: {e}", spec.name))),
        })
        .collect()
}
