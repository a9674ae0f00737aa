//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per
//! criterion and exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfx_core::batch::{BatchContext, BatchResult};
use cfx_core::cf_search::BPerturbation;
use cfx_core::dataset::{Dataset, FeatureSpec, Observation};
use cfx_core::estimator::{estimate_b_perturbation, fidelity_error, percent_fidelity, real_roots, EstimateStatus, FidelityRecord};
use cfx_core::explain::{explain, Method, RunConfig};
use cfx_core::lime::WIDTH_SWEEP;
use cfx_core::models::{train_builtin, AnalyticModel, BuiltinModelConfig, ClassifierHandle, ModelFamily};
use cfx_core::project::DataSource;
use cfx_core::neighbourhood::{analysis_distance, balanced_neighbourhood, band_index, band_quotas, DEFAULT_B1, DEFAULT_B2};
use cfx_core::surrogate::{fit_analysis, Family, FitOptions, FitStats, SurrogateModel, Term, TermPool};
use cfx_core::synthgen::SyntheticPool;

struct Outcome {
    pass: bool,
    detail: String,
}

/// Centering check applied to every batch the suite runs.
#[derive(Default)]
struct CenteringLog {
    models: usize,
    worst_gap: f64,
}

impl CenteringLog {
    fn record(&mut self, r: &BatchResult) {
        if r.config.method != Method::Clear || !r.config.centering {
            return;
        }
        for s in &r.seeds {
            for o in &s.observations {
                for c in &o.explanation.classes {
                    self.models += 1;
                    let p = c.target_probability;
                    // logistic fits pass through the clipped probability
                    let target = match c.surrogate.family {
                        Family::Multiple => p,
                        Family::Logistic => p.clamp(1e-6, 1.0 - 1e-6),
                    };
                    self.worst_gap = self.worst_gap.max((c.surrogate_at_x - target).abs());
                }
            }
        }
    }
}

fn numeric_dataset(d: usize, rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..d).map(|i| FeatureSpec::numeric(format!("x{i}"))).collect();
    let obs = (0..rows)
        .map(|_| Observation::new((0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()))
        .collect();
    Dataset::new(features, obs, (0..rows).map(|i| i % 2).collect(), vec!["neg".into(), "pos".into()]).unwrap()
}

fn test_points(ds: &Dataset, n: usize, seed: u64, spread: f64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Observation::new((0..ds.feature_count()).map(|_| rng.gen_range(-spread..spread)).collect()))
        .collect()
}

fn mean_fidelity(r: &BatchResult) -> f64 {
    r.mean_percent_fidelity.unwrap_or(f64::NAN)
}

fn all_errors(r: &BatchResult) -> Vec<f64> {
    r.records().filter(|(_, _, _, rec)| rec.feasible).map(|(_, _, _, rec)| rec.error).collect()
}

/// Circular boundary in the first two features, mild linear slopes in the
/// other two.
fn quadratic_oracle() -> (Dataset, ClassifierHandle, Vec<Observation>) {
    let ds = numeric_dataset(4, 1000, 11);
    let mut q = vec![vec![0.0; 4]; 4];
    q[0][0] = -2.0;
    q[1][1] = -2.0;
    let m = AnalyticModel::quadratic(&ds, 2.0, vec![0.0, 0.0, 0.5, -0.5], q).unwrap().into_handle();
    let test = test_points(&ds, 50, 12, 2.5);
    (ds, m, test)
}

fn quadratic_config() -> RunConfig {
    RunConfig {
        test_count: 50,
        seeds: vec![0, 1, 2, 3, 4],
        ..Default::default()
    }
}

fn worked_example() -> Outcome {
    let space_features = vec![
        FeatureSpec { stddev: 1.0, ..FeatureSpec::numeric("glu") },
        FeatureSpec { stddev: 1.0, ..FeatureSpec::numeric("bp") },
    ];
    let space = cfx_core::dataset::AnalysisSpace::of(&space_features);
    let s = SurrogateModel {
        family: Family::Logistic,
        terms: vec![Term::Linear { feature: 0 }, Term::Linear { feature: 1 }, Term::Quadratic { feature: 0 }],
        coefficients: vec![1.73, 0.25, -0.31],
        intercept: -0.8,
        centered: false,
        center: Observation::new(vec![0.537, 3.04]),
        center_response: 0.69,
        fit_stats: FitStats {
            points: 0,
            r_squared: None,
            adjusted_r_squared: None,
            deviance: None,
            weighted_residual_norm: 0.0,
        },
        space,
    };
    let x = Observation::new(vec![0.537, 3.04]);
    let actual = BPerturbation {
        feature: 0,
        feature_name: "glu".into(),
        target_class: 1,
        original_value: 0.537,
        boundary_value: 0.537 - 0.557,
        delta: -0.557,
        feasible: true,
        counterfactual_point: x.with_value(0, 0.537 - 0.557),
        original_raw: 0.537,
        boundary_raw: 0.537 - 0.557,
    };
    let start = Instant::now();
    let est = estimate_b_perturbation(&s, &actual, 0.5);
    let rec = fidelity_error(&actual, &est, 0.25);
    let secs = start.elapsed().as_secs_f64();
    let root = est.estimated_boundary_value.unwrap_or(f64::NAN);
    let delta = est.estimated_delta.unwrap_or(f64::NAN);
    Outcome {
        pass: (root - 0.023).abs() < 0.001 && (delta + 0.512).abs() <= 0.005 && (rec.error - 0.045).abs() <= 0.005 && secs < 1.0,
        detail: format!("root {root:.4}, delta {delta:.4}, error {:.4}, {secs:.3}s", rec.error),
    }
}

fn linear_oracle(log: &mut CenteringLog) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut parts = Vec::new();
    let mut pass = true;
    for d in 2..=5 {
        let ds = numeric_dataset(d, 1000, 100 + d as u64);
        let weights: Vec<f64> = (0..d)
            .map(|_| {
                let w: f64 = rng.gen_range(0.5..2.0);
                if rng.gen_bool(0.5) {
                    w
                } else {
                    -w
                }
            })
            .collect();
        let bias = rng.gen_range(-0.5..0.5);
        let m = AnalyticModel::logistic(&ds, bias, weights).unwrap().into_handle();
        let test = test_points(&ds, 50, 200 + d as u64, 2.5);
        let mut ctx = BatchContext::new(&ds, test, &m).unwrap();
        // a logistic surrogate can represent the oracle exactly; the
        // multiple-regression figure is reported alongside
        for family in [Family::Logistic, Family::Multiple] {
            let cfg = RunConfig {
                quadratic: false,
                interaction: false,
                family,
                test_count: 50,
                ..Default::default()
            };
            let r = ctx.run("linear", &cfg).unwrap();
            log.record(&r);
            let f = mean_fidelity(&r);
            let worst = all_errors(&r).into_iter().fold(0.0, f64::max);
            if family == Family::Logistic {
                pass &= f >= 0.95 && worst <= 0.05 && r.failures.is_empty();
                parts.push(format!("d={d}: {:.1}% worst {worst:.3}", 100.0 * f));
            } else {
                parts.push(format!("(multiple {:.1}% worst {worst:.3})", 100.0 * f));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    Outcome {
        pass,
        detail: format!("{}; {secs:.1}s", parts.join(", ")),
    }
}

fn quadratic_criterion(log: &mut CenteringLog) -> Outcome {
    let start = Instant::now();
    let (ds, m, test) = quadratic_oracle();
    let mut ctx = BatchContext::new(&ds, test, &m).unwrap();
    let full = ctx.run("quadratic", &quadratic_config()).unwrap();
    let linear = ctx
        .run(
            "linear_terms",
            &RunConfig {
                quadratic: false,
                interaction: false,
                ..quadratic_config()
            },
        )
        .unwrap();
    log.record(&full);
    log.record(&linear);
    let (a, b) = (mean_fidelity(&full), mean_fidelity(&linear));
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: a >= 0.8 && a > b && secs < 120.0,
        detail: format!("with quadratic {:.1}%, without {:.1}%; {secs:.1}s", 100.0 * a, 100.0 * b),
    }
}

fn data_path(name: &str) -> String {
    format!("{}/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn load(csv: &str, schema: &str, test_fraction: f64) -> (Dataset, Dataset) {
    let ds = DataSource::files(data_path(csv), data_path(schema)).load().unwrap();
    ds.split(test_fraction, 0).unwrap()
}

fn clear_variants() -> Vec<(&'static str, RunConfig)> {
    let base = RunConfig {
        seeds: vec![0, 1, 2, 3, 4],
        test_count: 100,
        ..Default::default()
    };
    vec![
        ("clear", base.clone()),
        (
            "clear_logistic",
            RunConfig {
                family: Family::Logistic,
                ..base.clone()
            },
        ),
        (
            "clear_linear_terms",
            RunConfig {
                quadratic: false,
                interaction: false,
                ..base
            },
        ),
    ]
}

fn lime_variants() -> Vec<(String, RunConfig)> {
    WIDTH_SWEEP
        .iter()
        .map(|&w| {
            (
                format!("lime_{w}"),
                RunConfig {
                    method: Method::Lime,
                    kernel_width: w,
                    seeds: vec![0, 1, 2, 3, 4],
                    test_count: 100,
                    ..Default::default()
                },
            )
        })
        .collect()
}

struct DatasetRuns {
    best_clear: (String, f64),
    best_lime: (String, f64),
    augmented: BatchResult,
    unaugmented: BatchResult,
}

fn compare_on(train: &Dataset, test: &Dataset, m: &ClassifierHandle, log: &mut CenteringLog) -> DatasetRuns {
    let mut ctx = BatchContext::new(train, test.rows.clone(), m).unwrap();
    let mut best_clear = (String::new(), f64::NEG_INFINITY);
    let mut augmented = None;
    for (name, cfg) in clear_variants() {
        let r = ctx.run(name, &cfg).unwrap();
        log.record(&r);
        let f = mean_fidelity(&r);
        if f > best_clear.1 {
            best_clear = (name.to_string(), f);
        }
        if name == "clear" {
            augmented = Some(r);
        }
    }
    let unaugmented = ctx
        .run(
            "no_augmentation",
            &RunConfig {
                use_counterfactual_augmentation: false,
                ..clear_variants()[0].1.clone()
            },
        )
        .unwrap();
    log.record(&unaugmented);
    ctx.clear_pools();
    let mut best_lime = (String::new(), f64::NEG_INFINITY);
    for (name, cfg) in lime_variants() {
        let f = mean_fidelity(&ctx.run(&name, &cfg).unwrap());
        if f > best_lime.1 {
            best_lime = (name, f);
        }
    }
    DatasetRuns {
        best_clear,
        best_lime,
        augmented: augmented.unwrap(),
        unaugmented,
    }
}

fn augmentation_holds(aug: &BatchResult, plain: &BatchResult) -> (bool, String) {
    let (a, b) = (mean_fidelity(aug), mean_fidelity(plain));
    let se = plain.standard_error.unwrap_or(0.0).max(aug.standard_error.unwrap_or(0.0));
    (a >= b - se, format!("{:.1}% vs {:.1}% (se {:.1})", 100.0 * a, 100.0 * b, 100.0 * se))
}

fn real_data_criteria(log: &mut CenteringLog) -> (Outcome, Option<(BatchResult, BatchResult)>) {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    let mut pima_aug = None;
    for (label, csv, schema, fraction) in [("iris", "iris.csv", "iris.toml", 0.7), ("pima", "pima.csv", "pima.toml", 0.2)] {
        let (train, test) = load(csv, schema, fraction);
        let m = train_builtin(
            &train,
            &BuiltinModelConfig {
                family: ModelFamily::MlpSoftmax,
                ..Default::default()
            },
        )
        .unwrap();
        let runs = compare_on(&train, &test, &m, log);
        let gap = runs.best_clear.1 - runs.best_lime.1;
        pass &= gap >= 0.2;
        parts.push(format!(
            "{label}: {} {:.1}% vs {} {:.1}% (gap {:.1} pp)",
            runs.best_clear.0,
            100.0 * runs.best_clear.1,
            runs.best_lime.0,
            100.0 * runs.best_lime.1,
            100.0 * gap
        ));
        if label == "pima" {
            pima_aug = Some((runs.augmented, runs.unaugmented));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 900.0;
    (
        Outcome {
            pass,
            detail: format!("{}; {secs:.0}s", parts.join(", ")),
        },
        pima_aug,
    )
}

fn augmentation_criterion(pima: Option<(BatchResult, BatchResult)>, log: &mut CenteringLog) -> Outcome {
    let (ds, m, test) = quadratic_oracle();
    let mut ctx = BatchContext::new(&ds, test, &m).unwrap();
    let aug = ctx.run("augmented", &quadratic_config()).unwrap();
    let plain = ctx
        .run(
            "unaugmented",
            &RunConfig {
                use_counterfactual_augmentation: false,
                ..quadratic_config()
            },
        )
        .unwrap();
    log.record(&aug);
    log.record(&plain);
    let (ok_q, text_q) = augmentation_holds(&aug, &plain);
    let Some((pa, pp)) = pima else {
        return Outcome {
            pass: false,
            detail: "pima runs missing".into(),
        };
    };
    let (ok_p, text_p) = augmentation_holds(&pa, &pp);
    Outcome {
        pass: ok_q && ok_p,
        detail: format!("quadratic oracle {text_q}; pima {text_p}"),
    }
}

fn max_terms_criterion(log: &mut CenteringLog) -> Outcome {
    let (ds, m, test) = quadratic_oracle();
    let mut ctx = BatchContext::new(&ds, test, &m).unwrap();
    let mut means = Vec::new();
    for k in [8, 11, 14] {
        let r = ctx
            .run(
                "max_terms",
                &RunConfig {
                    max_terms: k,
                    ..quadratic_config()
                },
            )
            .unwrap();
        log.record(&r);
        means.push(mean_fidelity(&r));
    }
    Outcome {
        pass: means.windows(2).all(|w| w[1] >= w[0]),
        detail: format!(
            "8: {:.1}%, 11: {:.1}%, 14: {:.1}%",
            100.0 * means[0],
            100.0 * means[1],
            100.0 * means[2]
        ),
    }
}

/// Band membership and nearest-first selection against a brute-force sort.
fn neighbourhood_property() -> (bool, String) {
    let mut failures = 0;
    let mut checked = 0;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let d = rng.gen_range(1..=4);
        let ds = {
            let mut features = Vec::new();
            for i in 0..d {
                if i == 0 && rng.gen_bool(0.3) {
                    features.push(FeatureSpec::categorical("c", &["a", "b", "c"]));
                } else {
                    features.push(FeatureSpec {
                        stddev: rng.gen_range(0.5..2.0),
                        mean: rng.gen_range(-1.0..1.0),
                        train_min: -5.0,
                        train_max: 5.0,
                        ..FeatureSpec::numeric(format!("x{i}"))
                    });
                }
            }
            Dataset {
                features,
                rows: vec![],
                labels: vec![],
                class_names: vec!["a".into(), "b".into()],
            }
        };
        let size = rng.gen_range(5..80);
        let observations: Vec<Observation> = (0..size)
            .map(|_| {
                Observation::new(
                    ds.features
                        .iter()
                        .map(|f| if f.is_numeric() { (rng.gen_range(-4i32..=4) as f64) * 0.5 } else { rng.gen_range(0..3) as f64 })
                        .collect(),
                )
            })
            .collect();
        let probabilities: Vec<Vec<f64>> = (0..size)
            .map(|_| {
                let p = [0.0, 0.2, 0.4, 0.5, 0.6, 0.9, 1.0, rng.gen_range(0.0..1.0)][rng.gen_range(0..8)];
                vec![1.0 - p, p]
            })
            .collect();
        let analysis = observations.iter().map(|o| ds.to_analysis(o)).collect();
        let pool = SyntheticPool {
            observations,
            probabilities,
            seed: case,
            analysis,
        };
        let x = pool.observations[rng.gen_range(0..size)].clone();
        let n = rng.gen_range(3..40);
        let got = balanced_neighbourhood(&pool, &ds, &x, 1, DEFAULT_B1, DEFAULT_B2, n);
        let zx = ds.to_analysis(&x);
        let mut bands: [Vec<usize>; 3] = Default::default();
        for i in 0..size {
            if let Some(b) = band_index(pool.probabilities[i][1], DEFAULT_B1, DEFAULT_B2) {
                bands[b].push(i);
            }
        }
        let nbd = match got {
            Ok(nbd) => nbd,
            Err(_) => {
                if bands.iter().all(|b| !b.is_empty()) {
                    failures += 1;
                }
                continue;
            }
        };
        checked += 1;
        let quotas = band_quotas(n);
        let mut expected = Vec::new();
        for (b, members) in bands.iter_mut().enumerate() {
            let dist = |i: usize| analysis_distance(&ds, &pool.analysis[i], &zx);
            members.sort_by(|&a, &c| dist(a).total_cmp(&dist(c)).then(a.cmp(&c)));
            expected.extend(members.iter().take(quotas[b]).map(|&i| pool.observations[i].clone()));
        }
        let in_band = nbd
            .responses
            .iter()
            .zip(&nbd.band_of)
            .all(|(&y, b)| b.is_some() && band_index(y, DEFAULT_B1, DEFAULT_B2) == *b);
        if expected != nbd.points || !in_band {
            failures += 1;
        }
    }
    (failures == 0, format!("neighbourhoods {failures} failures in {checked} pools"))
}

fn random_model(rng: &mut ChaCha8Rng, family: Family) -> SurrogateModel {
    let features = vec![
        FeatureSpec { stddev: 1.0, ..FeatureSpec::numeric("a") },
        FeatureSpec { stddev: 1.0, ..FeatureSpec::numeric("b") },
    ];
    let mut terms = vec![Term::Linear { feature: 0 }];
    if rng.gen_bool(0.7) {
        terms.push(Term::Quadratic { feature: 0 });
    }
    if rng.gen_bool(0.5) {
        terms.push(Term::Interaction { a: 0, b: 1 });
    }
    terms.push(Term::Linear { feature: 1 });
    SurrogateModel {
        family,
        coefficients: terms.iter().map(|_| rng.gen_range(-2.0..2.0)).collect(),
        terms,
        intercept: rng.gen_range(-1.0..1.0),
        centered: false,
        center: Observation::new(vec![0.0, 0.0]),
        center_response: 0.5,
        fit_stats: FitStats {
            points: 0,
            r_squared: None,
            adjusted_r_squared: None,
            deviance: None,
            weighted_residual_norm: 0.0,
        },
        space: cfx_core::dataset::AnalysisSpace::of(&features),
    }
}

fn root_property() -> (bool, String) {
    let mut failures = 0;
    let mut with_roots = 0;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let family = if rng.gen_bool(0.5) { Family::Logistic } else { Family::Multiple };
        let s = random_model(&mut rng, family);
        let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let bp = BPerturbation {
            feature: 0,
            feature_name: "a".into(),
            target_class: 1,
            original_value: x[0],
            boundary_value: x[0] + 0.5,
            delta: 0.5,
            feasible: true,
            counterfactual_point: Observation::new(x.to_vec()),
            original_raw: x[0],
            boundary_raw: x[0] + 0.5,
        };
        let boundary = rng.gen_range(0.2..0.8);
        let est = estimate_b_perturbation(&s, &bp, boundary);
        let [c0, c1, c2] = s.univariate(0, &x);
        let target = s.score_at_probability(boundary);
        let roots = real_roots(c2, c1, c0 - target);
        match est.status {
            EstimateStatus::Ok => {
                with_roots += 1;
                let v = est.estimated_boundary_value.unwrap();
                let nearest = roots.iter().map(|r| (r - x[0]).abs()).fold(f64::INFINITY, f64::min);
                if roots.is_empty() || (v - x[0]).abs() > nearest + 1e-12 {
                    failures += 1;
                }
            }
            _ => {
                if !roots.is_empty() {
                    failures += 1;
                }
            }
        }
    }
    (failures == 0, format!("roots {failures} failures in {with_roots} solvable"))
}

fn monotonicity_property() -> (bool, String) {
    let mut failures = 0;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let records: Vec<FidelityRecord> = (0..rng.gen_range(1..30))
            .map(|i| FidelityRecord {
                feature: i,
                feature_name: format!("f{i}"),
                target_class: 1,
                actual_delta: 0.0,
                estimated_delta: Some(0.0),
                error: if rng.gen_bool(0.1) { f64::INFINITY } else { rng.gen_range(0.0..1.0) },
                feasible: rng.gen_bool(0.8),
                within_threshold: false,
                status: EstimateStatus::Ok,
            })
            .collect();
        let t1 = rng.gen_range(0.01..1.0);
        let t2 = t1 + rng.gen_range(0.0..1.0);
        match (percent_fidelity(&records, t1), percent_fidelity(&records, t2)) {
            (Ok(a), Ok(b)) if a <= b => {}
            (Err(_), Err(_)) if records.iter().all(|r| !r.feasible) => {}
            _ => failures += 1,
        }
    }
    (failures == 0, format!("monotonicity {failures} failures"))
}

/// Weighted RSS of the centered fit using exactly `terms`.
fn subset_rss(z: &[Vec<f64>], y: &[f64], w: &[f64], zx: &[f64], yx: f64, terms: &[Term]) -> f64 {
    let n = z.len();
    let r = DVector::from_iterator(n, (0..n).map(|i| w[i].sqrt() * (y[i] - yx)));
    if terms.is_empty() {
        return r.norm_squared();
    }
    let a = DMatrix::from_fn(n, terms.len(), |i, j| w[i].sqrt() * (terms[j].value(&z[i]) - terms[j].value(zx)));
    let svd = a.clone().svd(true, true);
    let beta = svd.solve(&r, 1e-12).unwrap();
    (r - a * beta).norm_squared()
}

fn stepwise_property() -> (bool, String) {
    let features = vec![
        FeatureSpec { stddev: 1.0, ..FeatureSpec::numeric("a") },
        FeatureSpec::categorical("c", &["u", "v"]),
    ];
    let space = cfx_core::dataset::AnalysisSpace::of(&features);
    let candidates = [Term::Linear { feature: 0 }, Term::Quadratic { feature: 0 }, Term::Indicator { feature: 1, level: 1 }];
    let mut failures = 0;
    let mut checked = 0;
    for case in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let n = rng.gen_range(8..=20);
        let z: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![rng.gen_range(-2.0..2.0), if i < 2 { i as f64 } else { rng.gen_range(0..2) as f64 }])
            .collect();
        let y: Vec<f64> = z
            .iter()
            .map(|p| 0.5 + rng.gen_range(-0.3..0.3) * p[0] + rng.gen_range(-0.2..0.2) * p[0] * p[0] + rng.gen_range(-0.2..0.2) * p[1] + rng.gen_range(-0.05..0.05))
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
        let max_terms = rng.gen_range(1..=3);
        let opts = FitOptions {
            family: Family::Multiple,
            max_terms,
            pool: TermPool {
                linear: true,
                quadratic: true,
                interaction: false,
                indicators: true,
            },
            min_improvement: 0.0,
            ..Default::default()
        };
        let x = Observation::new(z[0].clone());
        let Ok(s) = fit_analysis(&z, &y, &w, &x, y[0], &space, &opts) else {
            failures += 1;
            continue;
        };
        checked += 1;
        let rss = |t: &[Term]| subset_rss(&z, &y, &w, &z[0], y[0], t);
        // each step is the best extension of the previous ones
        let mut prefix: Vec<Term> = Vec::new();
        for t in &s.terms {
            let best = candidates
                .iter()
                .filter(|c| !prefix.contains(c))
                .map(|c| rss(&[prefix.clone(), vec![*c]].concat()))
                .fold(f64::INFINITY, f64::min);
            prefix.push(*t);
            if rss(&prefix) > best * (1.0 + 1e-9) + 1e-12 {
                failures += 1;
            }
        }
        // with one term, or with all of them, greedy equals best subset
        if s.terms.len() == 1 || s.terms.len() == candidates.len() {
            let best = subsets(&candidates, s.terms.len()).iter().map(|t| rss(t)).fold(f64::INFINITY, f64::min);
            if rss(&s.terms) > best * (1.0 + 1e-9) + 1e-12 {
                failures += 1;
            }
        }
    }
    (failures == 0, format!("stepwise {failures} failures in {checked} fits"))
}

fn subsets(items: &[Term], k: usize) -> Vec<Vec<Term>> {
    (0u32..1 << items.len())
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..items.len()).filter(|i| m & (1 << i) != 0).map(|i| items[i]).collect())
        .collect()
}

fn determinism_property() -> (bool, String) {
    let (ds, m, test) = quadratic_oracle();
    let cfg = RunConfig {
        test_count: 5,
        seeds: vec![3, 9],
        ..Default::default()
    };
    let run = || {
        let mut ctx = BatchContext::new(&ds, test.clone(), &m).unwrap();
        serde_json::to_string(&ctx.run("determinism", &cfg).unwrap().seeds).unwrap()
    };
    let single = |seed| serde_json::to_string(&explain(&test[0], &m, &ds, &cfg, seed).unwrap()).unwrap();
    let ok = run() == run() && single(3) == single(3) && single(3) != single(4);
    (ok, format!("determinism {}", if ok { "ok" } else { "differs" }))
}

fn property_suites(log: &CenteringLog) -> Outcome {
    let start = Instant::now();
    let centering_ok = log.models > 0 && log.worst_gap <= 1e-9;
    let results = [
        neighbourhood_property(),
        (centering_ok, format!("centering {} models, worst gap {:.1e}", log.models, log.worst_gap)),
        root_property(),
        monotonicity_property(),
        stepwise_property(),
        determinism_property(),
    ];
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: results.iter().all(|r| r.0),
        detail: format!("{}; {secs:.1}s", results.iter().map(|r| r.1.clone()).collect::<Vec<_>>().join(", ")),
    }
}

fn main() -> ExitCode {
    let mut log = CenteringLog::default();
    let mut outcomes: Vec<(&str, Outcome)> = Vec::new();
    let report = |name: &'static str, o: Outcome, outcomes: &mut Vec<(&str, Outcome)>| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        outcomes.push((name, o));
    };
    report("worked example", worked_example(), &mut outcomes);
    report("linear oracle", linear_oracle(&mut log), &mut outcomes);
    report("quadratic oracle", quadratic_criterion(&mut log), &mut outcomes);
    let (gap, pima) = real_data_criteria(&mut log);
    report("clear vs lime", gap, &mut outcomes);
    report("counterfactual augmentation", augmentation_criterion(pima, &mut log), &mut outcomes);
    report("max_terms trend", max_terms_criterion(&mut log), &mut outcomes);
    report("property suites", property_suites(&log), &mut outcomes);
    if outcomes.iter().all(|(_, o)| o.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
