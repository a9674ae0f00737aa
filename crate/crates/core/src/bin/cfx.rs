use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use cfx_core::batch::{apply_overrides, parse_ablation_toml, render_ablation_csv, render_report, run_ablation, BatchContext, ReportFormat};
use cfx_core::explain::{explain, RunConfig};
use cfx_core::models::{BuiltinModelConfig, ModelFamily, ProcessSpec};
use cfx_core::project::{DataSource, ModelSource, Project, ProjectSpec};
use cfx_core::{Error, Result};

/// Counterfactual local explanations for tabular classifiers.
#[derive(Parser)]
#[command(name = "cfx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one observation.
    Explain {
        #[command(flatten)]
        project: ProjectArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Row of the test partition to explain.
        #[arg(long, conflicts_with = "values")]
        observation: Option<usize>,
        /// Comma-separated raw feature values to explain instead.
        #[arg(long)]
        values: Option<String>,
        /// Pool seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a configuration over the test partition.
    Batch {
        #[command(flatten)]
        project: ProjectArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a grid of configurations sharing boundary searches and pools.
    Ablate {
        #[command(flatten)]
        project: ProjectArgs,
        /// TOML file with a [base] table and [[variant]] tables. Without it
        /// the built-in comparison grid is used.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Html,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Html => ReportFormat::Html,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Mlp,
    Logistic,
}

#[derive(Args)]
struct ProjectArgs {
    /// Training data CSV.
    #[arg(long)]
    data: PathBuf,
    /// Feature schema TOML.
    #[arg(long)]
    schema: PathBuf,
    /// Shell command of an external model speaking the line protocol. When
    /// absent a built-in model is trained.
    #[arg(long)]
    model_cmd: Option<String>,
    #[arg(long, value_enum, default_value_t = ModelKind::Mlp)]
    model: ModelKind,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden_units: Option<usize>,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl ProjectArgs {
    fn open(&self) -> Result<Project> {
        let model = match &self.model_cmd {
            Some(cmd) => ModelSource::External(ProcessSpec::shell(cmd.clone())),
            None => {
                let mut cfg = BuiltinModelConfig {
                    family: match self.model {
                        ModelKind::Mlp => ModelFamily::MlpSoftmax,
                        ModelKind::Logistic => ModelFamily::LogisticLinear,
                    },
                    seed: self.model_seed,
                    ..Default::default()
                };
                if let Some(e) = self.epochs {
                    cfg.epochs = e;
                }
                if let Some(h) = self.hidden_units {
                    cfg.hidden_units = h;
                }
                ModelSource::Builtin(cfg)
            }
        };
        Project::open(&ProjectSpec {
            dataset: DataSource::files(&self.data, &self.schema),
            model,
            test_fraction: self.test_fraction,
            split_seed: self.split_seed,
        })
    }
}

/// Command-line overrides of the run configuration.
#[derive(Args)]
struct RunArgs {
    /// Run configuration TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    max_terms: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    neighbourhood_size: Option<usize>,
    #[arg(long)]
    kernel_width: Option<f64>,
    #[arg(long)]
    no_augmentation: bool,
    #[arg(long)]
    imbalanced: bool,
    #[arg(long)]
    no_centering: bool,
    #[arg(long)]
    no_quadratic: bool,
    #[arg(long)]
    no_interaction: bool,
}

impl RunArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut set = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(v) = &self.method {
            set("method", json!(v));
        }
        if let Some(v) = &self.family {
            set("family", json!(v));
        }
        if let Some(v) = self.max_terms {
            set("max_terms", json!(v));
        }
        if let Some(v) = self.threshold {
            set("threshold", json!(v));
        }
        if let Some(v) = &self.seeds {
            set("seeds", json!(v));
        }
        if let Some(v) = self.test_count {
            set("test_count", json!(v));
        }
        if let Some(v) = self.pool_size {
            set("pool_size", json!(v));
        }
        if let Some(v) = self.neighbourhood_size {
            set("neighbourhood_size", json!(v));
        }
        if let Some(v) = self.kernel_width {
            set("kernel_width", json!(v));
        }
        for (flag, key) in [
            (self.no_augmentation, "use_counterfactual_augmentation"),
            (self.imbalanced, "balanced"),
            (self.no_centering, "centering"),
            (self.no_quadratic, "quadratic"),
            (self.no_interaction, "interaction"),
        ] {
            if flag {
                set(key, json!(false));
            }
        }
        m
    }

    fn apply(&self, base: RunConfig) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::from_toml(&text)?
            }
            None => base,
        };
        apply_overrides(&base, &self.overrides())
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Explain {
            project,
            run,
            observation,
            values,
            seed,
            out,
        } => {
            let cfg = run.apply(RunConfig::default())?;
            let p = project.open()?;
            let x = match values {
                Some(v) => {
                    let cells: Vec<&str> = v.split(',').collect();
                    p.train.observation_from_strings(&cells)?
                }
                None => {
                    let i = observation.unwrap_or(0);
                    p.test
                        .rows
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::InvalidArgument(format!("test partition has no row {i}")))?
                }
            };
            let e = explain(&x, &p.model, &p.train, &cfg, seed.unwrap_or(cfg.seeds[0]))?;
            let text = serde_json::to_string_pretty(&e).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            emit(&text, out.as_deref())
        }
        Command::Batch {
            project,
            run,
            format,
            out,
        } => {
            let cfg = run.apply(RunConfig::default())?;
            let p = project.open()?;
            let mut ctx = BatchContext::new(&p.train, p.test.rows.clone(), &p.model)?;
            let result = ctx.run("batch", &cfg)?;
            log::info!(
                "% fidelity {:?} +/- {:?} over {} seeds",
                result.mean_percent_fidelity,
                result.standard_error,
                result.seeds.len()
            );
            emit(&render_report(&result, format.into())?, out.as_deref())
        }
        Command::Ablate {
            project,
            ablation,
            run,
            format,
            out,
        } => {
            let (base, variants) = match &ablation {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    parse_ablation_toml(&text)?
                }
                None => parse_ablation_toml("")?,
            };
            let base = apply_overrides(&base, &run.overrides())?;
            let p = project.open()?;
            let mut ctx = BatchContext::new(&p.train, p.test.rows.clone(), &p.model)?;
            let result = run_ablation(&mut ctx, &base, &variants)?;
            let text = match format {
                Format::Csv => render_ablation_csv(&result),
                Format::Json => serde_json::to_string_pretty(&result).map_err(|e| Error::InvalidArgument(e.to_string()))?,
                Format::Html => return Err(Error::InvalidArgument("ablate writes json or csv".into())),
            };
            emit(&text, out.as_deref())
        }
        Command::Serve { addr } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(cfx_core::service::serve(addr)).map_err(|e| Error::io(addr.to_string(), e))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
