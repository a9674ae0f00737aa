//! The black-box contract: observations in, class-probability rows out.
//!
//! Three kinds of model sit behind [`ClassifierHandle`]:
//! * built-in desk-scale classifiers trained with full-batch Adam
//!   ([`train_builtin`]),
//! * analytic models with a known decision boundary, used as test oracles
//!   ([`AnalyticModel`]),
//! * external processes speaking the line protocol ([`wrap_external`]).

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind, FeatureSpec, Observation};
use crate::error::{Error, Result};

pub type ProbabilityMatrix = Vec<Vec<f64>>;

pub trait Classifier: Send + Sync {
    fn class_count(&self) -> usize;
    fn feature_count(&self) -> usize;
    fn predict_proba(&self, batch: &[Observation]) -> Result<ProbabilityMatrix>;
}

/// Shared, cheaply clonable reference to a classifier.
#[derive(Clone)]
pub struct ClassifierHandle {
    inner: Arc<dyn Classifier>,
    description: String,
}

impl fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("model", &self.description)
            .field("classes", &self.inner.class_count())
            .finish()
    }
}

impl ClassifierHandle {
    pub fn new<C: Classifier + 'static>(model: C, description: impl Into<String>) -> Self {
        ClassifierHandle {
            inner: Arc::new(model),
            description: description.into(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    pub fn feature_count(&self) -> usize {
        self.inner.feature_count()
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn predict_proba(&self, batch: &[Observation]) -> Result<ProbabilityMatrix> {
        let expected = self.inner.feature_count();
        if let Some(bad) = batch.iter().find(|o| o.len() != expected) {
            return Err(Error::Arity {
                expected,
                got: bad.len(),
            });
        }
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let probs = self.inner.predict_proba(batch)?;
        if probs.len() != batch.len() {
            return Err(Error::Protocol(format!(
                "expected {} probability rows, got {}",
                batch.len(),
                probs.len()
            )));
        }
        Ok(probs)
    }

    pub fn predict_one(&self, obs: &Observation) -> Result<Vec<f64>> {
        let mut rows = self.predict_proba(std::slice::from_ref(obs))?;
        Ok(rows.pop().unwrap_or_default())
    }

    /// Probability of `class` for each observation, labelled in chunks.
    pub fn class_probability(&self, batch: &[Observation], class: usize) -> Result<Vec<f64>> {
        Ok(self.predict_proba(batch)?.into_iter().map(|r| r[class]).collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Standardized numerics plus one-hot categoricals (all levels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureEncoder {
    specs: Vec<FeatureSpec>,
    width: usize,
}

impl FeatureEncoder {
    pub fn new(specs: &[FeatureSpec]) -> Self {
        let width = specs
            .iter()
            .map(|s| match s.kind {
                FeatureKind::Numeric => 1,
                FeatureKind::Categorical => s.levels.len(),
            })
            .sum();
        FeatureEncoder {
            specs: specs.to_vec(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn encode_into(&self, obs: &Observation, out: &mut Vec<f64>) {
        out.clear();
        for (spec, &v) in self.specs.iter().zip(&obs.values) {
            match spec.kind {
                FeatureKind::Numeric => out.push((v - spec.mean) / spec.scale()),
                FeatureKind::Categorical => {
                    let level = v as usize;
                    out.extend((0..spec.levels.len()).map(|l| if l == level { 1.0 } else { 0.0 }));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    LogisticLinear,
    MlpSoftmax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuiltinModelConfig {
    pub family: ModelFamily,
    pub hidden_units: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BuiltinModelConfig {
    fn default() -> Self {
        BuiltinModelConfig {
            family: ModelFamily::MlpSoftmax,
            hidden_units: 16,
            epochs: 2000,
            learning_rate: 0.01,
            l2: 0.03,
            seed: 0,
        }
    }
}

impl BuiltinModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.family == ModelFamily::MlpSoftmax && self.hidden_units < 1 {
            return Err(Error::InvalidArgument("hidden_units must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Dense parameters of a softmax network with zero or one tanh hidden layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftmaxNetwork {
    encoder: FeatureEncoder,
    classes: usize,
    hidden: usize,
    /// Row-major (hidden x input) when `hidden > 0`.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// Row-major (classes x last_width).
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl SoftmaxNetwork {
    fn last_width(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.encoder.width()
        }
    }

    fn params_len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn hidden_activations(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.hidden == 0 {
            out.extend_from_slice(input);
            return;
        }
        let d = input.len();
        for h in 0..self.hidden {
            let row = &self.w1[h * d..(h + 1) * d];
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.b1[h];
            out.push(z.tanh());
        }
    }

    fn output(&self, hidden: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = hidden.len();
        for c in 0..self.classes {
            let row = &self.w2[c * w..(c + 1) * w];
            out.push(row.iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>() + self.b2[c]);
        }
        softmax_in_place(out);
    }

    fn forward(&self, obs: &Observation) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.encoder.width());
        let mut hidden = Vec::new();
        let mut out = Vec::with_capacity(self.classes);
        self.encoder.encode_into(obs, &mut input);
        self.hidden_activations(&input, &mut hidden);
        self.output(&hidden, &mut out);
        out
    }

    /// Mean cross-entropy and its gradient (same layout as the parameters).
    fn loss_and_gradient(&self, inputs: &[Vec<f64>], labels: &[usize], l2: f64) -> (f64, Vec<f64>) {
        let d = self.encoder.width();
        let w = self.last_width();
        let n = inputs.len() as f64;
        let mut g_w1 = vec![0.0; self.w1.len()];
        let mut g_b1 = vec![0.0; self.b1.len()];
        let mut g_w2 = vec![0.0; self.w2.len()];
        let mut g_b2 = vec![0.0; self.b2.len()];
        let mut loss = 0.0;
        let mut hidden = Vec::with_capacity(w);
        let mut probs = Vec::with_capacity(self.classes);
        let mut delta_hidden = vec![0.0; w];
        for (input, &label) in inputs.iter().zip(labels) {
            self.hidden_activations(input, &mut hidden);
            self.output(&hidden, &mut probs);
            loss -= probs[label].max(1e-300).ln();
            delta_hidden.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..self.classes {
                let err = probs[c] - if c == label { 1.0 } else { 0.0 };
                g_b2[c] += err;
                let row = &self.w2[c * w..(c + 1) * w];
                for j in 0..w {
                    g_w2[c * w + j] += err * hidden[j];
                    delta_hidden[j] += err * row[j];
                }
            }
            if self.hidden > 0 {
                for h in 0..self.hidden {
                    let dz = delta_hidden[h] * (1.0 - hidden[h] * hidden[h]);
                    g_b1[h] += dz;
                    for k in 0..d {
                        g_w1[h * d + k] += dz * input[k];
                    }
                }
            }
        }
        loss /= n;
        let mut grad = Vec::with_capacity(self.params_len());
        for (g, p) in g_w1.iter().zip(&self.w1) {
            grad.push(g / n + l2 * p);
        }
        grad.extend(g_b1.iter().map(|g| g / n));
        for (g, p) in g_w2.iter().zip(&self.w2) {
            grad.push(g / n + l2 * p);
        }
        grad.extend(g_b2.iter().map(|g| g / n));
        let penalty: f64 = self.w1.iter().chain(&self.w2).map(|p| p * p).sum::<f64>() * l2 / 2.0;
        (loss + penalty, grad)
    }

    fn apply_step(&mut self, step: &[f64]) {
        let params = self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut());
        for (p, s) in params.zip(step) {
            *p -= s;
        }
    }
}

impl Classifier for SoftmaxNetwork {
    fn class_count(&self) -> usize {
        self.classes
    }

    fn feature_count(&self) -> usize {
        self.encoder.specs.len()
    }

    fn predict_proba(&self, batch: &[Observation]) -> Result<ProbabilityMatrix> {
        Ok(batch.iter().map(|o| self.forward(o)).collect())
    }
}

/// Train a built-in classifier with full-batch Adam on mean cross-entropy.
pub fn train_builtin(ds: &Dataset, cfg: &BuiltinModelConfig) -> Result<ClassifierHandle> {
    let net = train_network(ds, cfg)?;
    let description = match cfg.family {
        ModelFamily::LogisticLinear => "builtin:logistic_linear".to_string(),
        ModelFamily::MlpSoftmax => format!("builtin:mlp_softmax({})", cfg.hidden_units),
    };
    Ok(ClassifierHandle::new(net, description))
}

pub fn train_network(ds: &Dataset, cfg: &BuiltinModelConfig) -> Result<SoftmaxNetwork> {
    cfg.validate()?;
    let classes = ds.class_count();
    let mut seen = vec![false; classes];
    for &l in &ds.labels {
        seen[l] = true;
    }
    if classes < 2 || seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::SingleClass);
    }

    let encoder = FeatureEncoder::new(&ds.features);
    let d = encoder.width();
    let hidden = match cfg.family {
        ModelFamily::LogisticLinear => 0,
        ModelFamily::MlpSoftmax => cfg.hidden_units,
    };
    let last = if hidden > 0 { hidden } else { d };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut glorot = |fan_in: usize, fan_out: usize, count: usize| -> Vec<f64> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..count).map(|_| rng.gen_range(-limit..limit)).collect()
    };
    let w1 = if hidden > 0 { glorot(d, hidden, hidden * d) } else { Vec::new() };
    let w2 = if hidden > 0 {
        glorot(hidden, classes, classes * last)
    } else {
        vec![0.0; classes * last]
    };
    let mut net = SoftmaxNetwork {
        encoder,
        classes,
        hidden,
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: vec![0.0; classes],
    };

    let inputs: Vec<Vec<f64>> = ds
        .rows
        .iter()
        .map(|r| {
            let mut v = Vec::with_capacity(d);
            net.encoder.encode_into(r, &mut v);
            v
        })
        .collect();

    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; net.params_len()];
    let mut v = vec![0.0; net.params_len()];
    let mut step = vec![0.0; net.params_len()];
    for epoch in 1..=cfg.epochs {
        let (loss, grad) = net.loss_and_gradient(&inputs, &ds.labels, cfg.l2);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        let bc1 = 1.0 - beta1_pow(beta1, epoch);
        let bc2 = 1.0 - beta1_pow(beta2, epoch);
        for i in 0..grad.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            step[i] = cfg.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
        net.apply_step(&step);
    }
    Ok(net)
}

fn beta1_pow(beta: f64, t: usize) -> f64 {
    beta.powi(t.min(i32::MAX as usize) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticOutput {
    /// Class-1 probability is `sigmoid(score)`.
    Logistic,
    /// Class-1 probability is `score` clamped to [0, 1].
    LinearProbability,
}

/// Binary model with a closed-form boundary over standardized inputs:
/// `score(z) = bias + w·z + zᵀQz`, where `z` is the analysis-space vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyticModel {
    specs: Vec<FeatureSpec>,
    pub bias: f64,
    pub weights: Vec<f64>,
    pub quadratic: Option<Vec<Vec<f64>>>,
    pub output: AnalyticOutput,
}

impl AnalyticModel {
    pub fn logistic(ds: &Dataset, bias: f64, weights: Vec<f64>) -> Result<Self> {
        Self::build(ds, bias, weights, None, AnalyticOutput::Logistic)
    }

    pub fn quadratic(
        ds: &Dataset,
        bias: f64,
        weights: Vec<f64>,
        quadratic: Vec<Vec<f64>>,
    ) -> Result<Self> {
        Self::build(ds, bias, weights, Some(quadratic), AnalyticOutput::Logistic)
    }

    pub fn linear_probability(ds: &Dataset, intercept: f64, weights: Vec<f64>) -> Result<Self> {
        Self::build(ds, intercept, weights, None, AnalyticOutput::LinearProbability)
    }

    fn build(
        ds: &Dataset,
        bias: f64,
        weights: Vec<f64>,
        quadratic: Option<Vec<Vec<f64>>>,
        output: AnalyticOutput,
    ) -> Result<Self> {
        let p = ds.feature_count();
        if weights.len() != p {
            return Err(Error::Arity {
                expected: p,
                got: weights.len(),
            });
        }
        if let Some(q) = &quadratic {
            if q.len() != p || q.iter().any(|r| r.len() != p) {
                return Err(Error::InvalidArgument(format!("quadratic form must be {p}x{p}")));
            }
        }
        Ok(AnalyticModel {
            specs: ds.features.clone(),
            bias,
            weights,
            quadratic,
            output,
        })
    }

    pub fn score(&self, obs: &Observation) -> f64 {
        let z: Vec<f64> = obs
            .values
            .iter()
            .zip(&self.specs)
            .map(|(&v, s)| if s.is_numeric() { (v - s.mean) / s.scale() } else { v })
            .collect();
        let mut score = self.bias + self.weights.iter().zip(&z).map(|(w, v)| w * v).sum::<f64>();
        if let Some(q) = &self.quadratic {
            for (i, row) in q.iter().enumerate() {
                for (j, &c) in row.iter().enumerate() {
                    score += c * z[i] * z[j];
                }
            }
        }
        score
    }

    pub fn positive_probability(&self, obs: &Observation) -> f64 {
        let s = self.score(obs);
        match self.output {
            AnalyticOutput::Logistic => sigmoid(s),
            AnalyticOutput::LinearProbability => s.clamp(0.0, 1.0),
        }
    }

    pub fn into_handle(self) -> ClassifierHandle {
        ClassifierHandle::new(self, "analytic")
    }
}

impl Classifier for AnalyticModel {
    fn class_count(&self) -> usize {
        2
    }

    fn feature_count(&self) -> usize {
        self.specs.len()
    }

    fn predict_proba(&self, batch: &[Observation]) -> Result<ProbabilityMatrix> {
        Ok(batch
            .iter()
            .map(|o| {
                let p = self.positive_probability(o);
                vec![1.0 - p, p]
            })
            .collect())
    }
}

/// How to launch an external model process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ProcessSpec {
    /// Run `command` through `sh -c`.
    pub fn shell(command: impl Into<String>) -> Self {
        ProcessSpec {
            program: "sh".into(),
            args: vec!["-c".into(), command.into()],
        }
    }
}

struct ExternalProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Proxy to a model running in a child process. Calls are serialized.
pub struct ExternalModel {
    specs: Vec<FeatureSpec>,
    classes: usize,
    process: Mutex<ExternalProcess>,
}

impl Drop for ExternalModel {
    fn drop(&mut self) {
        if let Ok(p) = self.process.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

/// Launch `spec` and wrap it as a classifier over `ds`'s schema.
pub fn wrap_external(spec: &ProcessSpec, ds: &Dataset) -> Result<ClassifierHandle> {
    let mut child = Command::new(&spec.program)
        .args(&spec.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Transport(format!("cannot launch `{}`: {e}", spec.program)))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
    let model = ExternalModel {
        specs: ds.features.clone(),
        classes: ds.class_count(),
        process: Mutex::new(ExternalProcess {
            child,
            stdin,
            stdout,
        }),
    };
    let description = format!("external:{} {}", spec.program, spec.args.join(" "));
    Ok(ClassifierHandle::new(model, description))
}

impl ExternalModel {
    fn format_request(&self, batch: &[Observation]) -> String {
        let mut out = String::new();
        for obs in batch {
            let cells: Vec<String> = obs
                .values
                .iter()
                .zip(&self.specs)
                .map(|(&v, s)| match s.kind {
                    FeatureKind::Numeric => format!("{v}"),
                    FeatureKind::Categorical => s.levels[v as usize].clone(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out.push('\n');
        out
    }
}

pub(crate) fn parse_probability_line(line: &str, classes: usize, row: usize) -> Result<Vec<f64>> {
    let values = line
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Protocol(format!("row {row}: cannot parse `{line}`")))?;
    if values.len() != classes {
        return Err(Error::Protocol(format!(
            "row {row}: expected {classes} probabilities, got {}",
            values.len()
        )));
    }
    if values.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::Protocol(format!("row {row}: probability outside [0, 1]")));
    }
    normalize_row(values, row)
}

/// Accept rows summing to 1 within 1e-6; renormalize (with a warning) within
/// 1e-3; reject anything further off.
pub(crate) fn normalize_row(mut values: Vec<f64>, row: usize) -> Result<Vec<f64>> {
    let sum: f64 = values.iter().sum();
    let gap = (sum - 1.0).abs();
    if gap <= 1e-6 {
        return Ok(values);
    }
    if gap <= 1e-3 {
        log::warn!("external model row {row} sums to {sum}; renormalizing");
        values.iter_mut().for_each(|v| *v /= sum);
        return Ok(values);
    }
    Err(Error::NotNormalized { row, sum })
}

impl Classifier for ExternalModel {
    fn class_count(&self) -> usize {
        self.classes
    }

    fn feature_count(&self) -> usize {
        self.specs.len()
    }

    fn predict_proba(&self, batch: &[Observation]) -> Result<ProbabilityMatrix> {
        let request = self.format_request(batch);
        let mut guard = self
            .process
            .lock()
            .map_err(|_| Error::Transport("external model lock poisoned".into()))?;
        let proc = &mut *guard;
        proc.stdin
            .write_all(request.as_bytes())
            .and_then(|_| proc.stdin.flush())
            .map_err(|e| Error::Transport(format!("write failed: {e}")))?;

        let mut rows = Vec::with_capacity(batch.len());
        let mut line = String::new();
        for row in 0..batch.len() {
            line.clear();
            let read = proc
                .stdout
                .read_line(&mut line)
                .map_err(|e| Error::Transport(format!("read failed: {e}")))?;
            if read == 0 {
                return Err(Error::Transport(format!(
                    "process exited after {row} of {} rows",
                    batch.len()
                )));
            }
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if trimmed.is_empty() {
                return Err(Error::Protocol(format!(
                    "batch terminated after {row} of {} rows",
                    batch.len()
                )));
            }
            rows.push(parse_probability_line(trimmed, self.classes, row)?);
        }
        line.clear();
        let read = proc
            .stdout
            .read_line(&mut line)
            .map_err(|e| Error::Transport(format!("read failed: {e}")))?;
        if read == 0 {
            return Err(Error::Transport("process exited before batch terminator".into()));
        }
        if !line.trim_end_matches(['\n', '\r']).is_empty() {
            return Err(Error::Protocol("expected blank line after batch".into()));
        }
        Ok(rows)
    }
}
