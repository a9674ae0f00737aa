//! Tabular data: feature schema, rows, labels and the training statistics
//! that bound sampling, boundary search and feasibility checks.
//!
//! Cells are stored as `f64`. Numeric cells hold the raw value; categorical
//! cells hold the index of the level in [`FeatureSpec::levels`].
//!
//! Most of the engine works in the *analysis space*: numeric features are
//! standardized with the training mean and stddev, categorical features keep
//! their level index. Fidelity errors and thresholds are expressed in that
//! space.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Declared levels (categorical only).
    #[serde(default)]
    pub levels: Vec<String>,
    #[serde(default)]
    pub train_min: f64,
    #[serde(default)]
    pub train_max: f64,
    /// Share of each level in the training rows, aligned with `levels`.
    #[serde(default)]
    pub level_frequencies: Vec<f64>,
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub stddev: f64,
}

impl FeatureSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Numeric,
            levels: Vec::new(),
            train_min: 0.0,
            train_max: 0.0,
            level_frequencies: Vec::new(),
            mean: 0.0,
            stddev: 0.0,
        }
    }

    pub fn categorical(name: impl Into<String>, levels: &[&str]) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical,
            levels: levels.iter().map(|s| s.to_string()).collect(),
            ..FeatureSpec::numeric("")
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.kind == FeatureKind::Numeric
    }

    pub fn range(&self) -> f64 {
        self.train_max - self.train_min
    }

    /// Scale used for the analysis space: the stddev, or 1 for constant
    /// features so that they map to zero instead of failing.
    pub fn scale(&self) -> f64 {
        if self.stddev > 0.0 {
            self.stddev
        } else {
            1.0
        }
    }

    pub fn level_index(&self, level: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == level)
    }

    /// Most frequent level; ties go to the first declared level.
    pub fn reference_level(&self) -> usize {
        let mut best = 0;
        for (i, &f) in self.level_frequencies.iter().enumerate() {
            if f > self.level_frequencies[best] {
                best = i;
            }
        }
        best
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.train_min && value <= self.train_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: Vec<f64>,
}

impl Observation {
    pub fn new(values: Vec<f64>) -> Self {
        Observation { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with one feature replaced.
    pub fn with_value(&self, feature: usize, value: f64) -> Self {
        let mut values = self.values.clone();
        values[feature] = value;
        Observation { values }
    }
}

impl From<Vec<f64>> for Observation {
    fn from(values: Vec<f64>) -> Self {
        Observation { values }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<FeatureSpec>,
    pub rows: Vec<Observation>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

/// Sidecar schema file (TOML).
///
/// ```toml
/// label_column = "type"          # optional when passed explicitly
/// classes = ["No", "Yes"]         # optional; default is sorted distinct labels
///
/// [[feature]]
/// name = "glu"
/// kind = "numeric"
///
/// [[feature]]
/// name = "sex"
/// kind = "categorical"
/// levels = ["F", "M"]
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(rename = "feature", default)]
    pub features: Vec<SchemaFeature>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaFeature {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub levels: Vec<String>,
}

impl Schema {
    pub fn load(path: impl AsRef<Path>) -> Result<Schema> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Schema::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Schema> {
        let schema: Schema = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        for f in &schema.features {
            if f.kind == FeatureKind::Categorical && f.levels.is_empty() {
                return Err(Error::Schema(format!(
                    "categorical feature `{}` declares no levels",
                    f.name
                )));
            }
        }
        if schema.features.is_empty() {
            return Err(Error::Schema("no features declared".into()));
        }
        Ok(schema)
    }

    pub fn feature_specs(&self) -> Vec<FeatureSpec> {
        self.features
            .iter()
            .map(|f| FeatureSpec {
                name: f.name.clone(),
                kind: f.kind,
                levels: f.levels.clone(),
                ..FeatureSpec::numeric("")
            })
            .collect()
    }
}

/// Load a CSV file whose header contains every schema feature plus the
/// label column. Extra columns are ignored.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &[FeatureSpec],
    label_column: &str,
) -> Result<Dataset> {
    load_csv_with_classes(path, schema, label_column, None)
}

pub fn load_csv_with_classes(
    path: impl AsRef<Path>,
    schema: &[FeatureSpec],
    label_column: &str,
    classes: Option<&[String]>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, label_column, classes)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: &[FeatureSpec],
    label_column: &str,
    classes: Option<&[String]>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let label_idx = column(label_column)?;
    let feature_idx = schema
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // 1-based data row numbers, header excluded
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let mut values = Vec::with_capacity(schema.len());
        for (spec, &col) in schema.iter().zip(&feature_idx) {
            let cell = record.get(col).unwrap_or("");
            values.push(parse_cell(spec, cell, row)?);
        }
        rows.push(Observation::new(values));
        raw_labels.push(record.get(label_idx).unwrap_or("").to_string());
    }
    if rows.is_empty() {
        return Err(Error::Csv("file contains no data rows".into()));
    }

    let class_names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut c: Vec<String> = raw_labels.clone();
            c.sort();
            c.dedup();
            c
        }
    };
    let labels = raw_labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            class_names
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::UnknownLevel {
                    row: i + 1,
                    column: label_column.to_string(),
                    value: l.clone(),
                })
        })
        .collect::<Result<Vec<_>>>()?;

    Dataset::new(schema.to_vec(), rows, labels, class_names)
}

fn parse_cell(spec: &FeatureSpec, cell: &str, row: usize) -> Result<f64> {
    match spec.kind {
        FeatureKind::Numeric => match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::UnparseableNumber {
                row,
                column: spec.name.clone(),
                value: cell.to_string(),
            }),
        },
        FeatureKind::Categorical => {
            spec.level_index(cell)
                .map(|i| i as f64)
                .ok_or_else(|| Error::UnknownLevel {
                    row,
                    column: spec.name.clone(),
                    value: cell.to_string(),
                })
        }
    }
}

impl Dataset {
    /// Build a dataset and compute training statistics from `rows`.
    pub fn new(
        features: Vec<FeatureSpec>,
        rows: Vec<Observation>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Dataset> {
        if rows.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for row in &rows {
            if row.len() != features.len() {
                return Err(Error::Arity {
                    expected: features.len(),
                    got: row.len(),
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!("label index {bad} has no class name")));
        }
        let mut ds = Dataset {
            features,
            rows,
            labels,
            class_names,
        };
        ds.recompute_statistics()?;
        Ok(ds)
    }

    fn recompute_statistics(&mut self) -> Result<()> {
        for (j, spec) in self.features.iter_mut().enumerate() {
            let column: Vec<f64> = self.rows.iter().map(|r| r.values[j]).collect();
            match spec.kind {
                FeatureKind::Numeric => {
                    let stats = ColumnStats::of(&column);
                    spec.train_min = stats.min;
                    spec.train_max = stats.max;
                    spec.mean = stats.mean;
                    spec.stddev = stats.stddev;
                    spec.level_frequencies.clear();
                }
                FeatureKind::Categorical => {
                    if spec.levels.is_empty() {
                        return Err(Error::Schema(format!(
                            "categorical feature `{}` declares no levels",
                            spec.name
                        )));
                    }
                    let mut counts = vec![0usize; spec.levels.len()];
                    for &v in &column {
                        let idx = v as usize;
                        if v < 0.0 || v.fract() != 0.0 || idx >= counts.len() {
                            return Err(Error::InvalidArgument(format!(
                                "feature `{}` has invalid level index {v}",
                                spec.name
                            )));
                        }
                        counts[idx] += 1;
                    }
                    let n = column.len().max(1) as f64;
                    spec.level_frequencies = counts.iter().map(|&c| c as f64 / n).collect();
                    spec.train_min = 0.0;
                    spec.train_max = (spec.levels.len() - 1) as f64;
                    spec.mean = 0.0;
                    spec.stddev = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn numeric_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_numeric())
            .map(|(i, _)| i)
    }

    pub fn check_arity(&self, obs: &Observation) -> Result<()> {
        if obs.len() != self.features.len() {
            return Err(Error::Arity {
                expected: self.features.len(),
                got: obs.len(),
            });
        }
        Ok(())
    }

    /// Strict standardization: numeric `v -> (v - mean) / stddev`,
    /// categorical values unchanged.
    pub fn standardize(&self, obs: &Observation) -> Result<Observation> {
        self.check_arity(obs)?;
        let mut out = obs.values.clone();
        for (v, spec) in out.iter_mut().zip(&self.features) {
            if spec.is_numeric() {
                if spec.stddev <= 0.0 {
                    return Err(Error::ConstantFeature(spec.name.clone()));
                }
                *v = (*v - spec.mean) / spec.stddev;
            }
        }
        Ok(Observation::new(out))
    }

    pub fn unstandardize(&self, obs: &Observation) -> Result<Observation> {
        self.check_arity(obs)?;
        let mut out = obs.values.clone();
        for (v, spec) in out.iter_mut().zip(&self.features) {
            if spec.is_numeric() {
                if spec.stddev <= 0.0 {
                    return Err(Error::ConstantFeature(spec.name.clone()));
                }
                *v = *v * spec.stddev + spec.mean;
            }
        }
        Ok(Observation::new(out))
    }

    /// Analysis-space coordinates (lenient: constant features map to 0).
    pub fn to_analysis(&self, obs: &Observation) -> Vec<f64> {
        obs.values
            .iter()
            .zip(&self.features)
            .map(|(&v, spec)| self.value_to_analysis(spec, v))
            .collect()
    }

    fn value_to_analysis(&self, spec: &FeatureSpec, v: f64) -> f64 {
        if spec.is_numeric() {
            (v - spec.mean) / spec.scale()
        } else {
            v
        }
    }

    pub fn feature_to_analysis(&self, feature: usize, v: f64) -> f64 {
        self.value_to_analysis(&self.features[feature], v)
    }

    pub fn feature_from_analysis(&self, feature: usize, z: f64) -> f64 {
        let spec = &self.features[feature];
        if spec.is_numeric() {
            z * spec.scale() + spec.mean
        } else {
            z
        }
    }

    /// Parse an observation from one string per feature (level names for
    /// categorical features).
    pub fn observation_from_strings<S: AsRef<str>>(&self, cells: &[S]) -> Result<Observation> {
        if cells.len() != self.features.len() {
            return Err(Error::Arity {
                expected: self.features.len(),
                got: cells.len(),
            });
        }
        let values = self
            .features
            .iter()
            .zip(cells)
            .map(|(spec, cell)| parse_cell(spec, cell.as_ref().trim(), 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Observation::new(values))
    }

    pub fn observation_to_strings(&self, obs: &Observation) -> Vec<String> {
        obs.values
            .iter()
            .zip(&self.features)
            .map(|(&v, spec)| match spec.kind {
                FeatureKind::Numeric => format!("{v}"),
                FeatureKind::Categorical => spec
                    .levels
                    .get(v as usize)
                    .cloned()
                    .unwrap_or_else(|| format!("{v}")),
            })
            .collect()
    }

    /// Seeded shuffle into (train, test). Both partitions carry the training
    /// partition's statistics.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        if self.rows.len() < 2 {
            return Err(Error::InvalidArgument("need at least two rows to split".into()));
        }
        let n = self.rows.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        let (test_idx, train_idx) = order.split_at(n_test);

        let take = |idx: &[usize]| -> (Vec<Observation>, Vec<usize>) {
            idx.iter()
                .map(|&i| (self.rows[i].clone(), self.labels[i]))
                .unzip()
        };
        let (train_rows, train_labels) = take(train_idx);
        let (test_rows, test_labels) = take(test_idx);
        let train = Dataset::new(
            self.features.clone(),
            train_rows,
            train_labels,
            self.class_names.clone(),
        )?;
        let test = Dataset {
            features: train.features.clone(),
            rows: test_rows,
            labels: test_labels,
            class_names: self.class_names.clone(),
        };
        Ok((train, test))
    }

    /// Same rows and labels, statistics taken from `stats_from`.
    pub fn with_statistics_of(mut self, stats_from: &Dataset) -> Dataset {
        self.features = stats_from.features.clone();
        self
    }

    pub fn analysis_space(&self) -> AnalysisSpace {
        AnalysisSpace::of(&self.features)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn level_frequency_map(&self, feature: usize) -> HashMap<String, f64> {
        let spec = &self.features[feature];
        spec.levels
            .iter()
            .cloned()
            .zip(spec.level_frequencies.iter().copied())
            .collect()
    }
}

/// Compact description of the analysis space: enough to map raw
/// observations to standardized coordinates and to label terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSpace {
    pub names: Vec<String>,
    pub kinds: Vec<FeatureKind>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub levels: Vec<Vec<String>>,
    /// Reference level per categorical feature (0 for numeric ones).
    pub reference_levels: Vec<usize>,
}

impl AnalysisSpace {
    pub fn of(features: &[FeatureSpec]) -> Self {
        AnalysisSpace {
            names: features.iter().map(|f| f.name.clone()).collect(),
            kinds: features.iter().map(|f| f.kind).collect(),
            means: features.iter().map(|f| f.mean).collect(),
            scales: features.iter().map(|f| f.scale()).collect(),
            levels: features.iter().map(|f| f.levels.clone()).collect(),
            reference_levels: features
                .iter()
                .map(|f| if f.is_numeric() { 0 } else { f.reference_level() })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn is_numeric(&self, feature: usize) -> bool {
        self.kinds[feature] == FeatureKind::Numeric
    }

    pub fn to_analysis(&self, obs: &Observation) -> Vec<f64> {
        obs.values
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.is_numeric(j) {
                    (v - self.means[j]) / self.scales[j]
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }
}

struct ColumnStats {
    min: f64,
    max: f64,
    mean: f64,
    stddev: f64,
}

impl ColumnStats {
    /// Population statistics. Values are sorted first so the result does not
    /// depend on row order.
    fn of(values: &[f64]) -> ColumnStats {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
        sq.sort_by(f64::total_cmp);
        let var = sq.iter().sum::<f64>() / n;
        ColumnStats {
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            mean,
            stddev: var.sqrt(),
        }
    }
}
