//! Local surrogate regression.
//!
//! Terms are functions of the analysis-space vector `z`. Selection is
//! forward stepwise: at each step the candidate giving the largest drop in
//! weighted RSS (multiple family) or weighted deviance (logistic family) is
//! added, until `max_terms` is reached or the drop falls below
//! `min_improvement`.
//!
//! Centering is exact. Each design column is the term value minus its value
//! at x and the intercept is pinned so the linear predictor at x equals the
//! model's response there (its logit for the logistic family). The stored
//! model keeps the uncentered form `intercept + Σ coef·term(z)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{AnalysisSpace, Observation};
use crate::error::{Error, Result};
use crate::models::sigmoid;
use crate::neighbourhood::NeighbourhoodDataset;

pub const DEFAULT_MAX_TERMS: usize = 14;
const PROBABILITY_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Linear { feature: usize },
    Quadratic { feature: usize },
    Interaction { a: usize, b: usize },
    Indicator { feature: usize, level: usize },
}

impl Term {
    pub fn value(&self, z: &[f64]) -> f64 {
        match *self {
            Term::Linear { feature } => z[feature],
            Term::Quadratic { feature } => z[feature] * z[feature],
            Term::Interaction { a, b } => z[a] * z[b],
            Term::Indicator { feature, level } => {
                if z[feature] as usize == level && z[feature] >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn features(&self) -> Vec<usize> {
        match *self {
            Term::Linear { feature } | Term::Quadratic { feature } | Term::Indicator { feature, .. } => {
                vec![feature]
            }
            Term::Interaction { a, b } => vec![a, b],
        }
    }

    pub fn involves(&self, feature: usize) -> bool {
        self.features().contains(&feature)
    }

    pub fn label(&self, space: &AnalysisSpace) -> String {
        match *self {
            Term::Linear { feature } => space.names[feature].clone(),
            Term::Quadratic { feature } => format!("{}^2", space.names[feature]),
            Term::Interaction { a, b } => format!("{}*{}", space.names[a], space.names[b]),
            Term::Indicator { feature, level } => {
                format!("{}={}", space.names[feature], space.levels[feature][level])
            }
        }
    }

    pub fn parse(label: &str, space: &AnalysisSpace) -> Result<Term> {
        let label = label.trim();
        if let Some((name, level)) = label.split_once('=') {
            let feature = space.index_of(name)?;
            let level = space.levels[feature]
                .iter()
                .position(|l| l == level)
                .ok_or_else(|| Error::Schema(format!("unknown level `{level}` in `{label}`")))?;
            return Ok(Term::Indicator { feature, level });
        }
        if let Some(name) = label.strip_suffix("^2") {
            return Ok(Term::Quadratic {
                feature: space.index_of(name)?,
            });
        }
        if let Some((a, b)) = label.split_once('*') {
            return Ok(Term::Interaction {
                a: space.index_of(a)?,
                b: space.index_of(b)?,
            });
        }
        Ok(Term::Linear {
            feature: space.index_of(label)?,
        })
    }
}

/// Which kinds of term the stepwise search may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermPool {
    pub linear: bool,
    pub quadratic: bool,
    pub interaction: bool,
    pub indicators: bool,
}

impl Default for TermPool {
    fn default() -> Self {
        TermPool {
            linear: true,
            quadratic: true,
            interaction: true,
            indicators: true,
        }
    }
}

impl TermPool {
    pub fn linear_only() -> Self {
        TermPool {
            linear: true,
            quadratic: false,
            interaction: false,
            indicators: true,
        }
    }

    pub fn candidates(&self, space: &AnalysisSpace) -> Vec<Term> {
        let numeric: Vec<usize> = (0..space.len()).filter(|&j| space.is_numeric(j)).collect();
        let mut out = Vec::new();
        if self.linear {
            out.extend(numeric.iter().map(|&feature| Term::Linear { feature }));
        }
        if self.indicators {
            for j in (0..space.len()).filter(|&j| !space.is_numeric(j)) {
                for level in 0..space.levels[j].len() {
                    if level != space.reference_levels[j] {
                        out.push(Term::Indicator { feature: j, level });
                    }
                }
            }
        }
        if self.quadratic {
            out.extend(numeric.iter().map(|&feature| Term::Quadratic { feature }));
        }
        if self.interaction {
            for (i, &a) in numeric.iter().enumerate() {
                for &b in &numeric[i + 1..] {
                    out.push(Term::Interaction { a, b });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Multiple,
    Logistic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub family: Family,
    pub max_terms: usize,
    pub pool: TermPool,
    /// Force the fitted curve through (x, y_x).
    pub centering: bool,
    pub min_improvement: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            family: Family::Multiple,
            max_terms: DEFAULT_MAX_TERMS,
            pool: TermPool::default(),
            centering: true,
            min_improvement: 1e-6,
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub points: usize,
    pub r_squared: Option<f64>,
    pub adjusted_r_squared: Option<f64>,
    pub deviance: Option<f64>,
    /// `sqrt(Σ w (y - ŷ)²)` on the response scale.
    pub weighted_residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub family: Family,
    /// Terms in the order they were selected.
    pub terms: Vec<Term>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub centered: bool,
    pub center: Observation,
    pub center_response: f64,
    pub fit_stats: FitStats,
    pub space: AnalysisSpace,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn clip(p: f64) -> f64 {
    p.clamp(PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP)
}

impl SurrogateModel {
    /// Regression score: the linear predictor before any link function.
    pub fn score(&self, obs: &Observation) -> f64 {
        self.score_analysis(&self.space.to_analysis(obs))
    }

    pub fn score_analysis(&self, z: &[f64]) -> f64 {
        self.intercept
            + self
                .terms
                .iter()
                .zip(&self.coefficients)
                .map(|(t, c)| c * t.value(z))
                .sum::<f64>()
    }

    /// Multiple family: the (unbounded) regression score. Logistic family:
    /// `1 / (1 + exp(-score))`.
    pub fn evaluate(&self, obs: &Observation) -> f64 {
        self.link_inverse(self.score(obs))
    }

    pub fn evaluate_analysis(&self, z: &[f64]) -> f64 {
        self.link_inverse(self.score_analysis(z))
    }

    fn link_inverse(&self, score: f64) -> f64 {
        match self.family {
            Family::Multiple => score,
            Family::Logistic => sigmoid(score),
        }
    }

    /// Score value at which the response equals `probability`.
    pub fn score_at_probability(&self, probability: f64) -> f64 {
        match self.family {
            Family::Multiple => probability,
            Family::Logistic => logit(probability),
        }
    }

    /// Coefficients `[c0, c1, c2]` of the score as a polynomial in the
    /// analysis value of `feature`, other coordinates fixed at `z`.
    pub fn univariate(&self, feature: usize, z: &[f64]) -> [f64; 3] {
        let mut poly = [self.intercept, 0.0, 0.0];
        for (t, &c) in self.terms.iter().zip(&self.coefficients) {
            match *t {
                Term::Linear { feature: f } if f == feature => poly[1] += c,
                Term::Quadratic { feature: f } if f == feature => poly[2] += c,
                Term::Interaction { a, b } if a == feature && b == feature => poly[2] += c,
                Term::Interaction { a, b } if a == feature => poly[1] += c * z[b],
                Term::Interaction { a, b } if b == feature => poly[1] += c * z[a],
                _ => poly[0] += c * t.value(z),
            }
        }
        poly
    }

    pub fn mentions(&self, feature: usize) -> bool {
        self.terms.iter().any(|t| t.involves(feature))
    }

    /// Fold every feature outside `keep` into the remaining terms using x's
    /// values. Evaluations at points equal to x outside `keep` are unchanged.
    pub fn simplify<S: AsRef<str>>(&self, keep: &[S], x: &Observation) -> Result<SurrogateModel> {
        if keep.is_empty() {
            return Err(Error::InvalidArgument("keep set is empty".into()));
        }
        let kept = keep
            .iter()
            .map(|k| self.space.index_of(k.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let is_kept = |f: usize| kept.contains(&f);
        let z = self.space.to_analysis(x);

        let mut intercept = self.intercept;
        let mut order: Vec<Term> = Vec::new();
        let mut coef: BTreeMap<Term, f64> = BTreeMap::new();
        let mut add = |t: Term, c: f64, order: &mut Vec<Term>| {
            if !coef.contains_key(&t) {
                order.push(t);
            }
            *coef.entry(t).or_insert(0.0) += c;
        };
        for (t, &c) in self.terms.iter().zip(&self.coefficients) {
            match *t {
                Term::Interaction { a, b } if is_kept(a) && !is_kept(b) => {
                    add(Term::Linear { feature: a }, c * z[b], &mut order)
                }
                Term::Interaction { a, b } if !is_kept(a) && is_kept(b) => {
                    add(Term::Linear { feature: b }, c * z[a], &mut order)
                }
                _ if t.features().iter().all(|&f| is_kept(f)) => add(*t, c, &mut order),
                _ => intercept += c * t.value(&z),
            }
        }
        let coefficients = order.iter().map(|t| coef[t]).collect();
        Ok(SurrogateModel {
            terms: order,
            coefficients,
            intercept,
            ..self.clone()
        })
    }

    /// Human-readable equation, e.g. `y = 0.46 + 0.3 glu - 0.05 bmi^2`.
    pub fn equation(&self) -> String {
        let lhs = match self.family {
            Family::Multiple => "y",
            Family::Logistic => "logit(p)",
        };
        let mut s = format!("{lhs} = {}", round_for_display(self.intercept));
        for (t, &c) in self.terms.iter().zip(&self.coefficients) {
            let sign = if c < 0.0 { '-' } else { '+' };
            let _ = write!(s, " {sign} {} {}", round_for_display(c.abs()), t.label(&self.space));
        }
        s
    }

    /// Plain-text `term,coefficient` lines, intercept first. Coefficients are
    /// written with round-trip precision.
    pub fn to_pairs_text(&self) -> String {
        let mut s = format!("intercept,{}\n", self.intercept);
        for (t, c) in self.terms.iter().zip(&self.coefficients) {
            let _ = writeln!(s, "{},{c}", t.label(&self.space));
        }
        s
    }
}

fn round_for_display(v: f64) -> String {
    let r = (v * 1e4).round() / 1e4;
    format!("{r}")
}

/// Parse [`SurrogateModel::to_pairs_text`] output into the intercept and
/// the ordered `(term, coefficient)` list.
pub fn parse_pairs_text(text: &str, space: &AnalysisSpace) -> Result<(f64, Vec<(Term, f64)>)> {
    let mut intercept = None;
    let mut terms = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (label, value) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Schema(format!("malformed equation line `{line}`")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("bad coefficient in `{line}`")))?;
        if label.trim() == "intercept" {
            intercept = Some(value);
        } else {
            terms.push((Term::parse(label, space)?, value));
        }
    }
    let intercept = intercept.ok_or_else(|| Error::Schema("missing intercept line".into()))?;
    Ok((intercept, terms))
}

/// The weighted regression problem with term values precomputed.
struct Design {
    /// Column per candidate (centered on x when centering).
    columns: Vec<Vec<f64>>,
    /// Always-present columns (the free intercept when not centering).
    base: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// Response (multiple) or soft target (logistic).
    response: Vec<f64>,
    /// Fixed part of the linear predictor.
    offset: f64,
}

impl Design {
    fn n(&self) -> usize {
        self.weights.len()
    }

    fn column<'a>(&'a self, selected: &'a [usize], k: usize) -> &'a [f64] {
        if k < self.base.len() {
            &self.base[k]
        } else {
            &self.columns[selected[k - self.base.len()]]
        }
    }
}

/// Fit a surrogate to a neighbourhood, passing through `(x, y_x)` when
/// `opts.centering` is set.
pub fn fit(
    nbd: &NeighbourhoodDataset,
    x: &Observation,
    y_x: f64,
    space: &AnalysisSpace,
    opts: &FitOptions,
) -> Result<SurrogateModel> {
    let z: Vec<Vec<f64>> = nbd.points.iter().map(|p| space.to_analysis(p)).collect();
    fit_analysis(&z, &nbd.responses, &nbd.weights, x, y_x, space, opts)
}

/// [`fit`] on points already mapped to analysis space.
pub fn fit_analysis(
    points: &[Vec<f64>],
    responses: &[f64],
    weights: &[f64],
    x: &Observation,
    y_x: f64,
    space: &AnalysisSpace,
    opts: &FitOptions,
) -> Result<SurrogateModel> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("neighbourhood is empty".into()));
    }
    if opts.max_terms < 1 {
        return Err(Error::InvalidArgument("max_terms must be at least 1".into()));
    }
    if points.len() != responses.len() || points.len() != weights.len() {
        return Err(Error::InvalidArgument("points, responses and weights differ in length".into()));
    }
    if opts.family == Family::Logistic && responses.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
        return Err(Error::InvalidArgument("logistic responses must lie in [0, 1]".into()));
    }
    let zx = space.to_analysis(x);
    let center_response = match opts.family {
        Family::Multiple => y_x,
        Family::Logistic => clip(y_x),
    };

    let total_weight: f64 = weights.iter().sum();
    let candidates: Vec<Term> = opts
        .pool
        .candidates(space)
        .into_iter()
        .filter(|t| {
            // drop columns that are constant over the neighbourhood
            let vals: Vec<f64> = points.iter().map(|p| t.value(p)).collect();
            let mean = vals.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total_weight;
            let var = vals
                .iter()
                .zip(weights)
                .map(|(v, w)| w * (v - mean) * (v - mean))
                .sum::<f64>()
                / total_weight;
            var > 1e-12
        })
        .collect();

    let columns: Vec<Vec<f64>> = candidates
        .iter()
        .map(|t| {
            let at_x = if opts.centering { t.value(&zx) } else { 0.0 };
            points.iter().map(|p| t.value(p) - at_x).collect()
        })
        .collect();
    let base = if opts.centering {
        Vec::new()
    } else {
        vec![vec![1.0; points.len()]]
    };
    let (response, offset) = match (opts.family, opts.centering) {
        (Family::Multiple, true) => (responses.iter().map(|y| y - y_x).collect(), y_x),
        (Family::Multiple, false) => (responses.to_vec(), 0.0),
        (Family::Logistic, true) => (responses.iter().map(|&y| clip(y)).collect(), logit(center_response)),
        (Family::Logistic, false) => (responses.iter().map(|&y| clip(y)).collect(), 0.0),
    };
    let design = Design {
        columns,
        base,
        weights: weights.to_vec(),
        response,
        offset,
    };

    let (selected, beta) = match opts.family {
        Family::Multiple => {
            let selected = stepwise_least_squares(&design, opts)?;
            let beta = solve_least_squares(&design, &selected).ok_or_else(|| singular(&candidates, &selected, space))?;
            (selected, beta)
        }
        Family::Logistic => stepwise_logistic(&design, opts, &candidates, space)?,
    };

    let nb = design.base.len();
    let terms: Vec<Term> = selected.iter().map(|&j| candidates[j]).collect();
    let coefficients: Vec<f64> = beta[nb..].to_vec();
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(singular(&candidates, &selected, space));
    }
    let intercept = if opts.centering {
        design.offset - terms.iter().zip(&coefficients).map(|(t, c)| c * t.value(&zx)).sum::<f64>()
    } else {
        beta[0]
    };

    let mut model = SurrogateModel {
        family: opts.family,
        terms,
        coefficients,
        intercept,
        centered: opts.centering,
        center: x.clone(),
        center_response,
        fit_stats: FitStats {
            points: points.len(),
            r_squared: None,
            adjusted_r_squared: None,
            deviance: None,
            weighted_residual_norm: 0.0,
        },
        space: space.clone(),
    };
    model.fit_stats = fit_statistics(&model, points, responses, weights);
    Ok(model)
}

fn singular(candidates: &[Term], selected: &[usize], space: &AnalysisSpace) -> Error {
    let labels: Vec<String> = selected.iter().map(|&j| candidates[j].label(space)).collect();
    Error::SingularDesign(labels.join(", "))
}

fn fit_statistics(model: &SurrogateModel, points: &[Vec<f64>], responses: &[f64], weights: &[f64]) -> FitStats {
    let n = points.len();
    let fitted: Vec<f64> = points.iter().map(|p| model.evaluate_analysis(p)).collect();
    let wsum: f64 = weights.iter().sum();
    let ybar = responses.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let rss: f64 = responses
        .iter()
        .zip(&fitted)
        .zip(weights)
        .map(|((y, f), w)| w * (y - f) * (y - f))
        .sum();
    let tss: f64 = responses.iter().zip(weights).map(|(y, w)| w * (y - ybar) * (y - ybar)).sum();
    let mut stats = FitStats {
        points: n,
        r_squared: None,
        adjusted_r_squared: None,
        deviance: None,
        weighted_residual_norm: rss.sqrt(),
    };
    match model.family {
        Family::Multiple => {
            if tss > 0.0 {
                let r2 = 1.0 - rss / tss;
                stats.r_squared = Some(r2);
                let k = model.terms.len();
                if n > k + 1 {
                    stats.adjusted_r_squared = Some(1.0 - (1.0 - r2) * (n - 1) as f64 / (n - k - 1) as f64);
                }
            }
        }
        Family::Logistic => {
            let d = responses
                .iter()
                .zip(&fitted)
                .zip(weights)
                .map(|((&y, &mu), &w)| w * binomial_deviance(clip(y), mu))
                .sum();
            stats.deviance = Some(d);
        }
    }
    stats
}

fn binomial_deviance(y: f64, mu: f64) -> f64 {
    let mu = mu.clamp(1e-300, 1.0 - 1e-16);
    let mut d = 0.0;
    if y > 0.0 {
        d += y * (y / mu).ln();
    }
    if y < 1.0 {
        d += (1.0 - y) * ((1.0 - y) / (1.0 - mu)).ln();
    }
    2.0 * d
}

fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

/// Forward selection on the weighted Gram matrix. Adding column j to the
/// current set S reduces RSS by `(r_j)^2 / s_j`, where `s_j` is the Schur
/// complement of `G_S` in `G_{S+j}` and `r_j = g_jy - g_jS·β_S`.
fn stepwise_least_squares(design: &Design, opts: &FitOptions) -> Result<Vec<usize>> {
    let w = &design.weights;
    let y = &design.response;
    let nb = design.base.len();
    let ncand = design.columns.len();
    let all: Vec<&[f64]> = design
        .base
        .iter()
        .chain(&design.columns)
        .map(|c| c.as_slice())
        .collect();
    let m = all.len();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut gy = DVector::<f64>::zeros(m);
    for i in 0..m {
        gy[i] = weighted_dot(w, all[i], y);
        for j in i..m {
            let v = weighted_dot(w, all[i], all[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }

    // indices into `all`
    let mut active: Vec<usize> = (0..nb).collect();
    let mut selected: Vec<usize> = Vec::new();
    while selected.len() < opts.max_terms {
        let (inv, beta) = if active.is_empty() {
            (DMatrix::zeros(0, 0), DVector::zeros(0))
        } else {
            let g = gram.select_rows(&active).select_columns(&active);
            let Some(chol) = g.cholesky() else { break };
            let rhs = DVector::from_iterator(active.len(), active.iter().map(|&i| gy[i]));
            (chol.inverse(), chol.solve(&rhs))
        };
        let mut best: Option<(usize, f64)> = None;
        for j in 0..ncand {
            let col = nb + j;
            if active.contains(&col) {
                continue;
            }
            let gj = DVector::from_iterator(active.len(), active.iter().map(|&i| gram[(i, col)]));
            let v = &inv * &gj;
            let schur = gram[(col, col)] - gj.dot(&v);
            if !(schur > 1e-10 * gram[(col, col)]) {
                continue;
            }
            let r = gy[col] - gj.dot(&beta);
            let reduction = r * r / schur;
            if best.map_or(true, |(_, b)| reduction > b) {
                best = Some((j, reduction));
            }
        }
        match best {
            Some((j, reduction)) if reduction >= opts.min_improvement => {
                selected.push(j);
                active.push(nb + j);
            }
            _ => break,
        }
    }
    Ok(selected)
}

/// Weighted least squares on the base columns plus `selected`, solved by QR
/// on the square-root-weighted design.
fn solve_least_squares(design: &Design, selected: &[usize]) -> Option<Vec<f64>> {
    let k = design.base.len() + selected.len();
    if k == 0 {
        return Some(Vec::new());
    }
    let n = design.n();
    let sw: Vec<f64> = design.weights.iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(n, k, |i, j| sw[i] * design.column(selected, j)[i]);
    let b = DVector::from_fn(n, |i, _| sw[i] * design.response[i]);
    solve_qr(a, b)
}

fn solve_qr(a: DMatrix<f64>, b: DVector<f64>) -> Option<Vec<f64>> {
    let k = a.ncols();
    let qr = a.qr();
    let r = qr.r();
    let max_diag = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-12 * max_diag.max(1e-300)) {
        return None;
    }
    let qtb = qr.q().transpose() * b;
    let sol = r.solve_upper_triangular(&qtb.rows(0, k).into_owned())?;
    Some(sol.iter().copied().collect())
}

struct LogisticFit {
    beta: Vec<f64>,
    deviance: f64,
}

/// IRLS for soft targets with a fixed offset and step halving.
fn irls(design: &Design, selected: &[usize], start: &[f64], opts: &FitOptions) -> Option<LogisticFit> {
    let n = design.n();
    let k = design.base.len() + selected.len();
    let cols: Vec<&[f64]> = (0..k).map(|j| design.column(selected, j)).collect();
    let eta_of = |beta: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| design.offset + cols.iter().zip(beta).map(|(c, b)| c[i] * b).sum::<f64>())
            .collect()
    };
    let deviance_of = |eta: &[f64]| -> f64 {
        eta.iter()
            .zip(&design.response)
            .zip(&design.weights)
            .map(|((&e, &y), &w)| w * binomial_deviance(y, sigmoid(e)))
            .sum()
    };

    let mut beta = start.to_vec();
    let mut eta = eta_of(&beta);
    let mut dev = deviance_of(&eta);
    for _ in 0..opts.max_iterations {
        let mut xtwx = DMatrix::<f64>::zeros(k, k);
        let mut xtwz = DVector::<f64>::zeros(k);
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            let var = (mu * (1.0 - mu)).max(1e-12);
            let wi = design.weights[i] * var;
            // w·var·(η - offset) + w·(y - μ), avoiding division by var
            let wz = wi * (eta[i] - design.offset) + design.weights[i] * (design.response[i] - mu);
            for a in 0..k {
                let ca = cols[a][i];
                xtwz[a] += ca * wz;
                let wca = wi * ca;
                for b in a..k {
                    xtwx[(a, b)] += wca * cols[b][i];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let target = xtwx.cholesky()?.solve(&xtwz);
        let mut step: Vec<f64> = target.iter().zip(&beta).map(|(t, b)| t - b).collect();
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
            let trial_eta = eta_of(&trial);
            let trial_dev = deviance_of(&trial_eta);
            if trial_dev <= dev * (1.0 + 1e-12) + 1e-300 {
                beta = trial;
                eta = trial_eta;
                dev = trial_dev;
                accepted = true;
                break;
            }
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
        let change = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if !accepted || change < opts.tolerance {
            return Some(LogisticFit { beta, deviance: dev });
        }
    }
    None
}

fn stepwise_logistic(
    design: &Design,
    opts: &FitOptions,
    candidates: &[Term],
    space: &AnalysisSpace,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let nb = design.base.len();
    let mut selected: Vec<usize> = Vec::new();
    let start_base: Vec<f64> = if nb > 0 {
        let wsum: f64 = design.weights.iter().sum();
        let ybar = design.response.iter().zip(&design.weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
        vec![logit(clip(ybar))]
    } else {
        Vec::new()
    };
    let mut current = irls(design, &selected, &start_base, opts).ok_or(Error::NonConvergent(opts.max_iterations))?;
    while selected.len() < opts.max_terms {
        let mut best: Option<(usize, LogisticFit)> = None;
        for j in 0..design.columns.len() {
            if selected.contains(&j) {
                continue;
            }
            let mut trial_sel = selected.clone();
            trial_sel.push(j);
            let mut start = current.beta.clone();
            start.push(0.0);
            let Some(fit) = irls(design, &trial_sel, &start, opts) else {
                continue;
            };
            if best.as_ref().map_or(true, |(_, b)| fit.deviance < b.deviance) {
                best = Some((j, fit));
            }
        }
        match best {
            Some((j, fit)) if current.deviance - fit.deviance >= opts.min_improvement => {
                selected.push(j);
                current = fit;
            }
            _ => break,
        }
    }
    // final fit from a cold start must agree; a warm-start failure is not fatal
    match irls(design, &selected, &current.beta, opts) {
        Some(fit) => Ok((selected, fit.beta)),
        None if selected.is_empty() => Err(Error::NonConvergent(opts.max_iterations)),
        None => Err(singular(candidates, &selected, space)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, FeatureSpec};
    use proptest::prelude::{prop_assert, prop_assume, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(p: usize) -> AnalysisSpace {
        let features: Vec<FeatureSpec> = (0..p)
            .map(|i| {
                let mut f = FeatureSpec::numeric(format!("f{}", i + 1));
                f.stddev = 1.0;
                f
            })
            .collect();
        AnalysisSpace::of(&features)
    }

    fn random_points(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    fn obs(z: &[f64]) -> Observation {
        Observation::new(z.to_vec())
    }

    #[test]
    fn logistic_recovers_weight_ratio() {
        let sp = space(2);
        let pts = random_points(200, 2, 1);
        let truth = |z: &[f64]| sigmoid(2.0 * z[0] - 1.0 * z[1]);
        let ys: Vec<f64> = pts.iter().map(|z| truth(z)).collect();
        let x = [0.3, -0.4];
        let opts = FitOptions {
            family: Family::Logistic,
            pool: TermPool::linear_only(),
            ..Default::default()
        };
        let m = fit_analysis(&pts, &ys, &vec![1.0; 200], &obs(&x), truth(&x), &sp, &opts).unwrap();
        let c = |f: usize| {
            m.terms
                .iter()
                .zip(&m.coefficients)
                .find(|(t, _)| **t == Term::Linear { feature: f })
                .map(|(_, c)| *c)
                .unwrap()
        };
        let ratio = c(0) / c(1);
        assert!((ratio + 2.0).abs() <= 0.1, "ratio {ratio}");
        assert!((m.evaluate(&obs(&x)) - truth(&x)).abs() < 1e-9);
    }

    #[test]
    fn perfect_linear_fit() {
        let sp = space(3);
        let pts = random_points(50, 3, 2);
        let ys: Vec<f64> = pts.iter().map(|z| 0.2 + 0.7 * z[0]).collect();
        let x = [0.1, 0.2, 0.3];
        let m = fit_analysis(&pts, &ys, &vec![1.0; 50], &obs(&x), 0.27, &sp, &FitOptions::default()).unwrap();
        assert!((m.fit_stats.adjusted_r_squared.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(m.terms, vec![Term::Linear { feature: 0 }]);
    }

    #[test]
    fn max_terms_is_respected() {
        let sp = space(6);
        let pts = random_points(300, 6, 3);
        let ys: Vec<f64> = pts
            .iter()
            .map(|z| (z[0] * z[1]).sin() + z[2].powi(3) * 0.1 + z[3] * z[4] - z[5].cos())
            .collect();
        for max_terms in [1, 5, 14] {
            let opts = FitOptions {
                max_terms,
                ..Default::default()
            };
            let m = fit_analysis(&pts, &ys, &vec![1.0; 300], &obs(&[0.0; 6]), 0.1, &sp, &opts).unwrap();
            assert_eq!(m.terms.len(), max_terms);
        }
    }

    #[test]
    fn evaluate_examples() {
        let sp = space(1);
        let model = SurrogateModel {
            family: Family::Logistic,
            terms: vec![Term::Linear { feature: 0 }],
            coefficients: vec![2.0],
            intercept: -1.0,
            centered: false,
            center: obs(&[0.5]),
            center_response: 0.5,
            fit_stats: FitStats {
                points: 0,
                r_squared: None,
                adjusted_r_squared: None,
                deviance: None,
                weighted_residual_norm: 0.0,
            },
            space: sp,
        };
        assert_eq!(model.evaluate(&obs(&[0.5])), 0.5);
        let multiple = SurrogateModel {
            family: Family::Multiple,
            ..model.clone()
        };
        assert_eq!(multiple.evaluate(&obs(&[3.0])), 5.0);
    }

    #[test]
    fn empty_and_bad_inputs() {
        let sp = space(1);
        assert!(fit_analysis(&[], &[], &[], &obs(&[0.0]), 0.5, &sp, &FitOptions::default()).is_err());
        let opts = FitOptions {
            max_terms: 0,
            ..Default::default()
        };
        assert!(fit_analysis(&[vec![0.0]], &[0.5], &[1.0], &obs(&[0.0]), 0.5, &sp, &opts).is_err());
        let opts = FitOptions {
            family: Family::Logistic,
            ..Default::default()
        };
        assert!(fit_analysis(&[vec![0.0]], &[1.5], &[1.0], &obs(&[0.0]), 0.5, &sp, &opts).is_err());
    }

    #[test]
    fn constant_columns_are_dropped() {
        let sp = space(2);
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0, 1.0]).collect();
        let ys: Vec<f64> = pts.iter().map(|z| 0.3 * z[0]).collect();
        let m = fit_analysis(&pts, &ys, &vec![1.0; 20], &obs(&[0.0, 1.0]), 0.0, &sp, &FitOptions::default()).unwrap();
        assert!(m.terms.iter().all(|t| !t.involves(1) || matches!(t, Term::Interaction { .. })));
    }

    fn categorical_space() -> AnalysisSpace {
        let ds = Dataset::new(
            vec![FeatureSpec::numeric("n"), FeatureSpec::categorical("c", &["a", "b", "d"])],
            vec![
                Observation::new(vec![0.0, 1.0]),
                Observation::new(vec![1.0, 1.0]),
                Observation::new(vec![2.0, 0.0]),
                Observation::new(vec![3.0, 2.0]),
            ],
            vec![0, 1, 0, 1],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        ds.analysis_space()
    }

    #[test]
    fn indicator_terms_use_reference_level() {
        let sp = categorical_space();
        assert_eq!(sp.reference_levels[1], 1);
        let pool = TermPool::default().candidates(&sp);
        assert!(pool.contains(&Term::Indicator { feature: 1, level: 0 }));
        assert!(pool.contains(&Term::Indicator { feature: 1, level: 2 }));
        assert!(!pool.contains(&Term::Indicator { feature: 1, level: 1 }));
    }

    #[test]
    fn pairs_text_roundtrip_and_parse_errors() {
        let sp = categorical_space();
        let (i, terms) = parse_pairs_text("intercept,0.5\nn,1.25\nn^2,-0.1\nc=d,2\n", &sp).unwrap();
        assert_eq!(i, 0.5);
        assert_eq!(
            terms,
            vec![
                (Term::Linear { feature: 0 }, 1.25),
                (Term::Quadratic { feature: 0 }, -0.1),
                (Term::Indicator { feature: 1, level: 2 }, 2.0)
            ]
        );
        assert!(parse_pairs_text("n,1\n", &sp).is_err());
        assert!(parse_pairs_text("intercept,1\nzzz,1\n", &sp).is_err());
    }

    fn nonlinear_fit(seed: u64, n: usize, family: Family, centering: bool, weights: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, SurrogateModel) {
        let sp = space(3);
        let pts = random_points(n, 3, seed);
        let ys: Vec<f64> = pts
            .iter()
            .map(|z| sigmoid(1.5 * z[0] - z[1] * z[1] + 0.5 * z[0] * z[2]))
            .collect();
        let x = pts[0].clone();
        let opts = FitOptions {
            family,
            centering,
            ..Default::default()
        };
        let m = fit_analysis(&pts, &ys, weights, &obs(&x), ys[0], &sp, &opts).unwrap();
        (pts, ys, m)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn centering_holds(seed in 0u64..10_000, logistic in proptest::bool::ANY) {
            let family = if logistic { Family::Logistic } else { Family::Multiple };
            let (_, ys, m) = nonlinear_fit(seed, 60, family, true, &vec![1.0; 60]);
            prop_assert!((m.evaluate(&m.center) - ys[0]).abs() <= 1e-9);
            prop_assert!(m.coefficients.iter().all(|c| c.is_finite()));
        }

        #[test]
        fn duplicate_equals_double_weight(seed in 0u64..10_000) {
            let sp = space(3);
            let pts = random_points(30, 3, seed);
            let ys: Vec<f64> = pts.iter().map(|z| (z[0] - 0.5 * z[1] * z[2]).tanh()).collect();
            let x = obs(&pts[3]);
            let opts = FitOptions::default();
            let mut dup_pts = pts.clone();
            dup_pts.push(pts[7].clone());
            let mut dup_ys = ys.clone();
            dup_ys.push(ys[7]);
            let a = fit_analysis(&dup_pts, &dup_ys, &vec![1.0; 31], &x, ys[3], &sp, &opts).unwrap();
            let mut w = vec![1.0; 30];
            w[7] = 2.0;
            let b = fit_analysis(&pts, &ys, &w, &x, ys[3], &sp, &opts).unwrap();
            prop_assert!(a.terms == b.terms);
            for (ca, cb) in a.coefficients.iter().zip(&b.coefficients) {
                prop_assert!((ca - cb).abs() <= 1e-9 * ca.abs().max(1.0));
            }
        }

        #[test]
        fn simplify_preserves_evaluations(seed in 0u64..10_000, keep_mask in 1usize..8, probe in -2.0f64..2.0) {
            let (pts, _, m) = nonlinear_fit(seed, 80, Family::Logistic, true, &vec![1.0; 80]);
            let keep: Vec<String> = (0..3).filter(|j| keep_mask >> j & 1 == 1).map(|j| format!("f{}", j + 1)).collect();
            let x = obs(&pts[5]);
            let s = m.simplify(&keep, &x).unwrap();
            let mut q = x.clone();
            for j in 0..3 {
                if keep_mask >> j & 1 == 1 {
                    q.values[j] = probe + j as f64 * 0.1;
                }
            }
            prop_assert!((s.evaluate(&q) - m.evaluate(&q)).abs() <= 1e-9);
            prop_assert!(s.terms.iter().all(|t| t.features().iter().all(|f| keep_mask >> f & 1 == 1)));
        }

        #[test]
        fn pairs_text_roundtrip(seed in 0u64..10_000) {
            let (_, _, m) = nonlinear_fit(seed, 40, Family::Multiple, false, &vec![1.0; 40]);
            let (i, terms) = parse_pairs_text(&m.to_pairs_text(), &m.space).unwrap();
            prop_assert!(i == m.intercept);
            let expect: Vec<(Term, f64)> = m.terms.iter().copied().zip(m.coefficients.iter().copied()).collect();
            prop_assert!(terms == expect);
        }
    }

    #[test]
    fn simplify_identity_and_errors() {
        let (pts, _, m) = nonlinear_fit(3, 80, Family::Multiple, true, &vec![1.0; 80]);
        let x = obs(&pts[0]);
        let all = m.simplify(&["f1", "f2", "f3"], &x).unwrap();
        assert_eq!(all.terms, m.terms);
        assert_eq!(all.coefficients, m.coefficients);
        assert_eq!(all.intercept, m.intercept);
        assert!(m.simplify::<&str>(&[], &x).is_err());
        assert!(m.simplify(&["nope"], &x).is_err());
    }

    /// Exhaustive subsets scored by an independent QR least-squares solve.
    fn subset_rss(pts: &[Vec<f64>], ys: &[f64], w: &[f64], x: &[f64], yx: f64, terms: &[Term]) -> f64 {
        let n = pts.len();
        let k = terms.len();
        let a = DMatrix::from_fn(n, k, |i, j| w[i].sqrt() * (terms[j].value(&pts[i]) - terms[j].value(x)));
        let b = DVector::from_fn(n, |i, _| w[i].sqrt() * (ys[i] - yx));
        let beta = if k == 0 { DVector::zeros(0) } else { a.clone().svd(true, true).solve(&b, 1e-14).unwrap() };
        let r = if k == 0 { b.clone() } else { &b - &a * &beta };
        r.norm_squared()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn stepwise_matches_exhaustive(seed in 0u64..1_000_000, n in 6usize..=20, max_terms in 1usize..=3) {
            let sp = space(2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
            let ys: Vec<f64> = pts.iter().map(|z| rng.gen_range(-0.1..0.1) + 0.4 * z[0] - 0.2 * z[1] * z[1] + 0.1 * z[0] * z[1]).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
            let x = pts[0].clone();
            // three candidates: f1, f2^2, f1*f2
            let pool = TermPool { linear: true, quadratic: true, interaction: true, indicators: false };
            let cands = [Term::Linear { feature: 0 }, Term::Quadratic { feature: 1 }, Term::Interaction { a: 0, b: 1 }];
            let opts = FitOptions { pool, max_terms, min_improvement: 0.0, ..Default::default() };
            // restrict to the three candidates by zeroing the other two term kinds' signal: drop them from the pool
            let restricted = fit_restricted(&pts, &ys, &w, &x, ys[0], &sp, &opts, &cands);
            prop_assume!(restricted.is_some());
            let m = restricted.unwrap();
            // exhaustive: each prefix of the path is the best extension of the previous prefix
            let mut prefix: Vec<Term> = Vec::new();
            for t in &m.terms {
                let best = cands
                    .iter()
                    .filter(|c| !prefix.contains(c))
                    .map(|c| {
                        let mut s = prefix.clone();
                        s.push(*c);
                        (*c, subset_rss(&pts, &ys, &w, &x, ys[0], &s))
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                let chosen = { let mut s = prefix.clone(); s.push(*t); subset_rss(&pts, &ys, &w, &x, ys[0], &s) };
                prop_assert!(chosen <= best.1 * (1.0 + 1e-9) + 1e-12);
                prefix.push(*t);
            }
            // the single best term and the full set agree with best-subset search
            let best_single = cands.iter().map(|c| subset_rss(&pts, &ys, &w, &x, ys[0], &[*c])).fold(f64::INFINITY, f64::min);
            let first = subset_rss(&pts, &ys, &w, &x, ys[0], &m.terms[..1]);
            prop_assert!(first <= best_single * (1.0 + 1e-9) + 1e-12);
            let final_rss = subset_rss(&pts, &ys, &w, &x, ys[0], &m.terms);
            let fitted_rss: f64 = pts.iter().zip(&ys).zip(&w).map(|((p, y), w)| w * (y - m.evaluate_analysis(p)).powi(2)).sum();
            prop_assert!((final_rss - fitted_rss).abs() <= 1e-9 * final_rss.max(1e-6));
        }
    }

    /// Run the stepwise fit with the candidate pool limited to `cands`.
    #[allow(clippy::too_many_arguments)]
    fn fit_restricted(
        pts: &[Vec<f64>],
        ys: &[f64],
        w: &[f64],
        x: &[f64],
        yx: f64,
        sp: &AnalysisSpace,
        opts: &FitOptions,
        cands: &[Term],
    ) -> Option<SurrogateModel> {
        // f2 linear and f1^2 are made constant by projecting them out of the
        // space: the pool generator works per kind, so build the design here.
        let zx = x.to_vec();
        let columns: Vec<Vec<f64>> = cands.iter().map(|t| pts.iter().map(|p| t.value(p) - t.value(&zx)).collect()).collect();
        let design = Design {
            columns,
            base: vec![],
            weights: w.to_vec(),
            response: ys.iter().map(|y| y - yx).collect(),
            offset: yx,
        };
        let selected = stepwise_least_squares(&design, opts).ok()?;
        let beta = solve_least_squares(&design, &selected)?;
        let terms: Vec<Term> = selected.iter().map(|&j| cands[j]).collect();
        let intercept = yx - terms.iter().zip(&beta).map(|(t, c)| c * t.value(&zx)).sum::<f64>();
        Some(SurrogateModel {
            family: Family::Multiple,
            terms,
            coefficients: beta,
            intercept,
            centered: true,
            center: Observation::new(zx),
            center_response: yx,
            fit_stats: FitStats { points: pts.len(), r_squared: None, adjusted_r_squared: None, deviance: None, weighted_residual_norm: 0.0 },
            space: sp.clone(),
        })
    }
}
