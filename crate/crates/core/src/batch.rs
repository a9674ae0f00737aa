//! Batch evaluation over a test set with repeated synthetic pools, config
//! ablations, and report rendering.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::estimator::{percent_fidelity, FidelityRecord};
use crate::explain::{actual_perturbations, build_pool, explain_with, Explanation, Method, PoolKey, RunConfig, TargetPerturbations};
use crate::models::ClassifierHandle;
use crate::synthgen::SyntheticPool;

/// Bumped whenever the shape of a serialized report changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Html,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "html" => Ok(ReportFormat::Html),
            other => Err(Error::InvalidArgument(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: Option<u64>,
    pub observation: usize,
    pub kind: String,
    pub message: String,
}

impl Failure {
    fn new(seed: Option<u64>, observation: usize, e: &Error) -> Self {
        Failure {
            seed,
            observation,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationResult {
    /// Row index in the test set.
    pub observation: usize,
    pub explanation: Explanation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub percent_fidelity: Option<f64>,
    pub feasible_records: usize,
    pub within_threshold: usize,
    pub observations: Vec<ObservationResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub boundary_search_seconds: f64,
    pub per_seed_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub schema_version: u32,
    pub name: String,
    pub config: RunConfig,
    pub seeds: Vec<SeedResult>,
    /// Mean of the per-seed % fidelity values.
    pub mean_percent_fidelity: Option<f64>,
    /// Standard error of that mean: sample standard deviation / sqrt(k).
    pub standard_error: Option<f64>,
    /// Mean |surrogate(x) - m(x)| over all explained target classes.
    pub mean_abs_error_at_x: Option<f64>,
    pub failures: Vec<Failure>,
    /// Wall-clock timings. The only field that differs between reruns.
    pub timing: Timing,
}

impl BatchResult {
    pub fn records(&self) -> impl Iterator<Item = (u64, usize, &Explanation, &FidelityRecord)> {
        self.seeds.iter().flat_map(|s| {
            s.observations.iter().flat_map(move |o| {
                o.explanation
                    .fidelity_records()
                    .map(move |r| (s.seed, o.observation, &o.explanation, r))
            })
        })
    }
}

/// Mean and standard error of `values`. The standard error of a single
/// value is 0.
pub fn mean_and_standard_error(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    Some((mean, (var / k).sqrt()))
}

/// Caches shared by every run over one (model, test set) pair: actual
/// b-perturbations per observation and synthetic pools per seed.
pub struct BatchContext<'a> {
    pub train: &'a Dataset,
    pub test: Vec<Observation>,
    pub m: &'a ClassifierHandle,
    actuals: HashMap<(usize, String), std::result::Result<Vec<TargetPerturbations>, Failure>>,
    pools: HashMap<PoolKey, SyntheticPool>,
    boundary_seconds: f64,
}

impl<'a> BatchContext<'a> {
    pub fn new(train: &'a Dataset, test: Vec<Observation>, m: &'a ClassifierHandle) -> Result<Self> {
        for x in &test {
            train.check_arity(x)?;
        }
        if m.feature_count() != train.feature_count() {
            return Err(Error::Arity {
                expected: train.feature_count(),
                got: m.feature_count(),
            });
        }
        Ok(BatchContext {
            train,
            test,
            m,
            actuals: HashMap::new(),
            pools: HashMap::new(),
            boundary_seconds: 0.0,
        })
    }

    fn actuals(&mut self, obs: usize, cfg: &RunConfig) -> std::result::Result<Vec<TargetPerturbations>, Failure> {
        let key = (obs, serde_json::to_string(&cfg.search).unwrap_or_default());
        if !self.actuals.contains_key(&key) {
            let start = Instant::now();
            let r = actual_perturbations(&self.test[obs], self.m, self.train, &cfg.search).map_err(|e| Failure::new(None, obs, &e));
            self.boundary_seconds += start.elapsed().as_secs_f64();
            self.actuals.insert(key.clone(), r);
        }
        self.actuals[&key].clone()
    }

    fn pool(&mut self, key: PoolKey) -> Result<&SyntheticPool> {
        if !self.pools.contains_key(&key) {
            let pool = build_pool(key, self.train, self.m)?;
            self.pools.insert(key, pool);
        }
        Ok(&self.pools[&key])
    }

    /// Drop cached pools, keeping the boundary-search results.
    pub fn clear_pools(&mut self) {
        self.pools.clear();
    }

    pub fn run(&mut self, name: &str, cfg: &RunConfig) -> Result<BatchResult> {
        cfg.validate()?;
        if self.test.len() < cfg.test_count {
            return Err(Error::InvalidArgument(format!(
                "test set has {} rows but test_count is {}",
                self.test.len(),
                cfg.test_count
            )));
        }
        let start = Instant::now();
        let boundary_before = self.boundary_seconds;
        let mut failures = Vec::new();
        let mut actuals = Vec::with_capacity(cfg.test_count);
        for obs in 0..cfg.test_count {
            match self.actuals(obs, cfg) {
                Ok(a) => actuals.push(Some(a)),
                Err(f) => {
                    failures.push(f);
                    actuals.push(None);
                }
            }
        }

        let mut seeds = Vec::new();
        let mut per_seed_seconds = Vec::new();
        for &seed in &cfg.seeds {
            let seed_start = Instant::now();
            let key = cfg.pool_key(seed);
            self.pool(key)?;
            let pool = &self.pools[&key];
            let mut observations = Vec::new();
            for (obs, actual) in actuals.iter().enumerate() {
                let Some(actual) = actual else { continue };
                match explain_with(&self.test[obs], self.m, self.train, cfg, pool, actual) {
                    Ok((explanation, _)) => observations.push(ObservationResult {
                        observation: obs,
                        explanation,
                    }),
                    Err(e) => failures.push(Failure::new(Some(seed), obs, &e)),
                }
            }
            let records: Vec<FidelityRecord> = observations
                .iter()
                .flat_map(|o| o.explanation.fidelity_records().cloned())
                .collect();
            let feasible: Vec<&FidelityRecord> = records.iter().filter(|r| r.feasible).collect();
            seeds.push(SeedResult {
                seed,
                percent_fidelity: percent_fidelity(&records, cfg.threshold).ok(),
                feasible_records: feasible.len(),
                within_threshold: feasible.iter().filter(|r| r.error < cfg.threshold).count(),
                observations,
            });
            per_seed_seconds.push(seed_start.elapsed().as_secs_f64());
        }

        let fidelities: Vec<f64> = seeds.iter().filter_map(|s| s.percent_fidelity).collect();
        let summary = mean_and_standard_error(&fidelities);
        let gaps: Vec<f64> = seeds
            .iter()
            .flat_map(|s| s.observations.iter())
            .flat_map(|o| o.explanation.classes.iter())
            .map(|c| (c.surrogate_at_x - c.target_probability).abs())
            .collect();
        Ok(BatchResult {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            config: cfg.clone(),
            seeds,
            mean_percent_fidelity: summary.map(|s| s.0),
            standard_error: summary.map(|s| s.1),
            mean_abs_error_at_x: mean_and_standard_error(&gaps).map(|s| s.0),
            failures,
            timing: Timing {
                total_seconds: start.elapsed().as_secs_f64(),
                boundary_search_seconds: self.boundary_seconds - boundary_before,
                per_seed_seconds,
            },
        })
    }
}

/// Evaluate `cfg` on the first `cfg.test_count` rows of `test`.
pub fn run_batch(cfg: &RunConfig, train: &Dataset, test: &Dataset, m: &ClassifierHandle) -> Result<BatchResult> {
    let mut ctx = BatchContext::new(train, test.rows.clone(), m)?;
    ctx.run("batch", cfg)
}

/// A named set of overrides applied on top of a base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: serde_json::Map<String, Value>,
}

impl Variant {
    pub fn new(name: impl Into<String>, overrides: Value) -> Self {
        Variant {
            name: name.into(),
            overrides: match overrides {
                Value::Object(map) => map,
                _ => serde_json::Map::new(),
            },
        }
    }
}

/// Apply `overrides` to `base`, recursing into nested tables. Unknown keys
/// and ill-typed values are errors.
pub fn apply_overrides(base: &RunConfig, overrides: &serde_json::Map<String, Value>) -> Result<RunConfig> {
    fn merge(into: &mut Value, from: &Value) {
        match (into, from) {
            (Value::Object(a), Value::Object(b)) => {
                for (k, v) in b {
                    merge(a.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
            (slot, v) => *slot = v.clone(),
        }
    }
    let mut value = serde_json::to_value(base).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    merge(&mut value, &Value::Object(overrides.clone()));
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The comparison grid: the full method, each component switched off in
/// turn, and LIME at each kernel width.
pub fn default_variants() -> Vec<Variant> {
    use serde_json::json;
    let mut v = vec![
        Variant::new("clear", json!({})),
        Variant::new("no_augmentation", json!({"use_counterfactual_augmentation": false})),
        Variant::new("imbalanced", json!({"balanced": false})),
        Variant::new("no_centering", json!({"centering": false})),
        Variant::new("no_quadratic_or_interaction", json!({"quadratic": false, "interaction": false})),
        Variant::new("logistic", json!({"family": "logistic"})),
    ];
    for w in crate::lime::WIDTH_SWEEP {
        v.push(Variant::new(format!("lime_width_{w}"), json!({"method": "lime", "kernel_width": w})));
    }
    v
}

pub fn max_terms_variants(values: &[usize]) -> Vec<Variant> {
    values
        .iter()
        .map(|&k| Variant::new(format!("max_terms_{k}"), serde_json::json!({ "max_terms": k })))
        .collect()
}

/// An ablation file: a `[base]` table plus `[[variant]]` tables, each with
/// a `name` and the keys it overrides.
pub fn parse_ablation_toml(text: &str) -> Result<(RunConfig, Vec<Variant>)> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("ablation file: {e}")))?;
    let as_json = |v: &toml::Value| serde_json::to_value(v).map_err(|e| Error::InvalidArgument(e.to_string()));
    let base = match table.get("base") {
        Some(b) => match as_json(b)? {
            Value::Object(map) => apply_overrides(&RunConfig::default(), &map)?,
            _ => return Err(Error::InvalidArgument("`base` must be a table".into())),
        },
        None => RunConfig::default(),
    };
    if let Some(k) = table.keys().find(|k| *k != "base" && *k != "variant") {
        return Err(Error::InvalidArgument(format!("unknown ablation key `{k}`")));
    }
    let variants = match table.get("variant") {
        None => default_variants(),
        Some(toml::Value::Array(items)) => items
            .iter()
            .map(|item| {
                let Value::Object(mut map) = as_json(item)? else {
                    return Err(Error::InvalidArgument("each variant must be a table".into()));
                };
                let name = match map.remove("name") {
                    Some(Value::String(s)) => s,
                    _ => return Err(Error::InvalidArgument("variant is missing a `name`".into())),
                };
                apply_overrides(&base, &map)?;
                Ok(Variant { name, overrides: map })
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::InvalidArgument("`variant` must be an array of tables".into())),
    };
    Ok((base, variants))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mean_percent_fidelity: Option<f64>,
    pub standard_error: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub schema_version: u32,
    pub rows: Vec<AblationRow>,
    pub results: Vec<BatchResult>,
}

pub fn run_ablation(ctx: &mut BatchContext, base: &RunConfig, variants: &[Variant]) -> Result<AblationResult> {
    let mut results = Vec::new();
    for v in variants {
        let cfg = apply_overrides(base, &v.overrides)?;
        results.push(ctx.run(&v.name, &cfg)?);
    }
    Ok(AblationResult {
        schema_version: SCHEMA_VERSION,
        rows: results
            .iter()
            .map(|r| AblationRow {
                name: r.name.clone(),
                mean_percent_fidelity: r.mean_percent_fidelity,
                standard_error: r.standard_error,
                failures: r.failures.len(),
            })
            .collect(),
        results,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

/// Render a batch report. Output is deterministic apart from the JSON
/// `timing` object.
pub fn render_report(result: &BatchResult, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(result).map_err(|e| Error::InvalidArgument(e.to_string())),
        ReportFormat::Csv => render_csv(result),
        ReportFormat::Html => Ok(render_html(result)),
    }
}

fn render_csv(result: &BatchResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record([
        "schema_version",
        "name",
        "method",
        "seed",
        "observation",
        "target_class",
        "feature",
        "actual_delta",
        "estimated_delta",
        "error",
        "feasible",
        "within_threshold",
        "status",
    ])
    .map_err(csv_err)?;
    for (seed, obs, e, r) in result.records() {
        let method = match e.method {
            Method::Clear => "clear",
            Method::Lime => "lime",
        };
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        w.write_record([
            SCHEMA_VERSION.to_string(),
            result.name.clone(),
            method.to_string(),
            seed.to_string(),
            obs.to_string(),
            r.target_class.to_string(),
            r.feature_name.clone(),
            format!("{}", r.actual_delta),
            fmt_opt(r.estimated_delta),
            if r.error.is_finite() { format!("{}", r.error) } else { String::new() },
            r.feasible.to_string(),
            r.within_threshold.to_string(),
            status,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_html(result: &BatchResult) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{0}</title>\n\
         <style>body{{font-family:sans-serif}}table{{border-collapse:collapse}}td,th{{border:1px solid #999;padding:2px 6px}}\
         .ok{{background:#dfd}}.bad{{background:#fdd}}</style></head><body>\n<h1>{0}</h1>\n",
        escape(&result.name)
    );
    let _ = writeln!(
        h,
        "<p>schema version {}; method {:?}; % fidelity {} &plusmn; {} (standard error over {} seeds, T = {})</p>",
        SCHEMA_VERSION,
        result.config.method,
        result.mean_percent_fidelity.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "n/a".into()),
        result.standard_error.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "n/a".into()),
        result.seeds.len(),
        result.config.threshold,
    );
    for s in &result.seeds {
        let _ = writeln!(h, "<h2>Seed {}</h2>", s.seed);
        for o in &s.observations {
            let e = &o.explanation;
            let _ = writeln!(h, "<h3>Observation {}: {}</h3>", o.observation, escape(&e.observation.join(", ")));
            for c in &e.classes {
                let _ = writeln!(
                    h,
                    "<p>Target class <b>{}</b> (probability {:.4}, surrogate {:.4})</p>\n<pre>{}</pre>",
                    escape(&c.class_name),
                    c.target_probability,
                    c.surrogate_at_x,
                    escape(&c.equation)
                );
                h.push_str("<table><tr><th>feature</th><th>value</th><th>b-counterfactual</th><th>actual delta</th><th>estimated delta</th><th>error</th><th>status</th></tr>\n");
                for (bp, r) in c.b_perturbations.iter().zip(&c.fidelity) {
                    let class = if !r.feasible {
                        ""
                    } else if r.within_threshold {
                        " class=\"ok\""
                    } else {
                        " class=\"bad\""
                    };
                    let _ = writeln!(
                        h,
                        "<tr{class}><td>{}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{}</td><td>{}</td><td>{:?}</td></tr>",
                        escape(&bp.feature_name),
                        bp.original_raw,
                        bp.boundary_raw,
                        r.actual_delta,
                        r.estimated_delta.map(|d| format!("{d:.4}")).unwrap_or_else(|| "none".into()),
                        if r.error.is_finite() { format!("{:.4}", r.error) } else { "inf".into() },
                        r.status,
                    );
                }
                h.push_str("</table>\n");
                for swap in &c.level_swaps {
                    let _ = writeln!(
                        h,
                        "<p>Changing {} from {} to {} gives probability {:.4}</p>",
                        escape(&swap.feature_name),
                        escape(&swap.from_level),
                        escape(&swap.to_level),
                        swap.target_probability
                    );
                }
            }
        }
    }
    if !result.failures.is_empty() {
        h.push_str("<h2>Failures</h2>\n<table><tr><th>seed</th><th>observation</th><th>kind</th><th>message</th></tr>\n");
        for f in &result.failures {
            let _ = writeln!(
                h,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                f.seed.map(|s| s.to_string()).unwrap_or_default(),
                f.observation,
                escape(&f.kind),
                escape(&f.message)
            );
        }
        h.push_str("</table>\n");
    }
    h.push_str("</body></html>\n");
    h
}

pub fn write_report(result: &BatchResult, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(result, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn render_ablation_csv(result: &AblationResult) -> String {
    let mut s = String::from("name,mean_percent_fidelity,standard_error,failures\n");
    for r in &result.rows {
        let _ = writeln!(s, "{},{},{},{}", r.name, fmt_opt(r.mean_percent_fidelity), fmt_opt(r.standard_error), r.failures);
    }
    s
}
