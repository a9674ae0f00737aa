//! Loading a dataset and a model from a description, shared by the CLI,
//! the HTTP service and the C interface.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_csv, Dataset, Schema};
use crate::error::{Error, Result};
use crate::models::{train_builtin, wrap_external, BuiltinModelConfig, ClassifierHandle, ProcessSpec};

pub const DEFAULT_LABEL_COLUMN: &str = "label";

/// Where the data comes from: file paths or inline text.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub csv_text: Option<String>,
    #[serde(default)]
    pub schema_text: Option<String>,
}

impl DataSource {
    pub fn files(csv: impl Into<PathBuf>, schema: impl Into<PathBuf>) -> Self {
        DataSource {
            csv: Some(csv.into()),
            schema: Some(schema.into()),
            csv_text: None,
            schema_text: None,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let schema = match (&self.schema, &self.schema_text) {
            (Some(p), None) => Schema::load(p)?,
            (None, Some(t)) => Schema::parse(t)?,
            _ => return Err(Error::InvalidArgument("give exactly one of `schema` and `schema_text`".into())),
        };
        let label = schema.label_column.clone().unwrap_or_else(|| DEFAULT_LABEL_COLUMN.to_string());
        let specs = schema.feature_specs();
        let classes = schema.classes.as_deref();
        match (&self.csv, &self.csv_text) {
            (Some(p), None) => {
                let file = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
                read_csv(file, &specs, &label, classes)
            }
            (None, Some(t)) => read_csv(t.as_bytes(), &specs, &label, classes),
            _ => Err(Error::InvalidArgument("give exactly one of `csv` and `csv_text`".into())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Train the built-in classifier on the training partition.
    Builtin(BuiltinModelConfig),
    /// Talk to a separate process over the line protocol.
    External(ProcessSpec),
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Builtin(BuiltinModelConfig::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectSpec {
    pub dataset: DataSource,
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// A training partition with its statistics, a test partition, and the
/// model to explain.
pub struct Project {
    pub train: Dataset,
    pub test: Dataset,
    pub model: ClassifierHandle,
}

impl Project {
    pub fn open(spec: &ProjectSpec) -> Result<Project> {
        let full = spec.dataset.load()?;
        let (train, test) = full.split(spec.test_fraction, spec.split_seed)?;
        let model = match &spec.model {
            ModelSource::Builtin(cfg) => train_builtin(&train, cfg)?,
            ModelSource::External(p) => wrap_external(p, &train)?,
        };
        if model.class_count() != train.class_count() {
            return Err(Error::InvalidArgument(format!(
                "model reports {} classes but the dataset has {}",
                model.class_count(),
                train.class_count()
            )));
        }
        Ok(Project { train, test, model })
    }
}
