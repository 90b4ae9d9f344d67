//! `tbm`: ingest drives, fit scores, train, recommend, validate, simulate
//! and serve.
//!
//! Failures print one JSON object on stderr,
//! `{"schema_version", "error", "message", "exit_code"}`, and exit with:
//!
//! | code | failure class                                                   |
//! |------|-----------------------------------------------------------------|
//! | 1    | anything not listed below                                       |
//! | 2    | command-line usage                                              |
//! | 3    | input data: parse, schema, non-finite or too little data        |
//! | 4    | invalid configuration, grid or simulator spec                   |
//! | 5    | missing model                                                   |
//! | 6    | corpus fingerprint mismatch                                     |
//! | 7    | file system                                                     |
//! | 8    | training diverged                                               |

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use tbm_core::advisor::{load_classes, AdvisorConfig};
use tbm_core::domain::{GroundClass, N_COP, SAMPLE_PERIOD_S, SCHEMA_VERSION};
use tbm_core::ingest::{write_csv, CsvSchema};
use tbm_core::mlp::Grid;
use tbm_core::pipeline::{
    fit_optimality, ingest_files, train_all, validate, write_models, Corpus, IngestConfig, TrainOptions,
    ValidateOptions, INGEST_REPORT_FILE,
};
use tbm_core::sim::{generate_drive, SimSession, SimSpec};
use tbm_core::validate::{render_table, ImprovementMode};
use tbm_core::Error;
use tbm_service::{load_available, AppState, RecommendRequest, ServiceConfig};

#[derive(Parser)]
#[command(name = "tbm", version, about = "TBM control recommendations from drive logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cleanse and smooth raw drive CSVs into a corpus directory.
    Ingest {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON `{"columns": [...]}` naming the CSV header.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// JSON ingest configuration (cleansing and smoothing).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit per-class optimality configs and store them in the corpus.
    FitOptimality {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        w1: f64,
        #[arg(long, default_value_t = 3.0)]
        w2: f64,
        /// Working-pressure safety threshold (bar).
        #[arg(long, default_value_t = 150.0)]
        ub: f64,
    },
    /// Train one model per ground class.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, visible_alias = "models")]
        out: PathBuf,
        /// Train only this class (default: every class with an optimality config).
        #[arg(long)]
        gc: Option<GroundClass>,
        /// Hyper-parameter grid JSON; cross-validated before the final fit.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the recommendation for one sample (or a JSON array of samples).
    Recommend {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score recommenders on the held-out split.
    Validate {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also score the neighbour-average baseline.
        #[arg(long)]
        baseline: bool,
        /// Count a case as improved when the next score is positive,
        /// instead of when the score rises.
        #[arg(long)]
        literal: bool,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic drive CSV.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON array, one entry per tick: `null` or five setpoints.
        #[arg(long)]
        overrides: Option<PathBuf>,
        /// Number of ticks (default: the override count, or the whole spec).
        #[arg(long)]
        steps: Option<usize>,
        /// Replaces the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the HTTP advisory service.
    Serve {
        #[arg(long)]
        models: PathBuf,
        /// Template for simulator sessions.
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Milliseconds between streamed ticks.
        #[arg(long, default_value_t = (SAMPLE_PERIOD_S * 1000.0) as u64)]
        tick_ms: u64,
    },
}

#[derive(Debug, Serialize)]
struct Failure {
    schema_version: u32,
    error: String,
    message: String,
    exit_code: u8,
}

impl Failure {
    fn new(error: &str, message: impl Into<String>, exit_code: u8) -> Self {
        Failure {
            schema_version: SCHEMA_VERSION,
            error: error.into(),
            message: message.into(),
            exit_code,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_)
            | Error::ArityMismatch { .. }
            | Error::NegativeMeasure(_)
            | Error::SchemaMismatch(_)
            | Error::Parse { .. }
            | Error::EmptyAfterCleansing
            | Error::NonUniformSampling { .. }
            | Error::ZeroVariance(_)
            | Error::InsufficientData(_)
            | Error::DimensionMismatch { .. }
            | Error::TooFewPoints { .. }
            | Error::KExceedsIndex { .. }
            | Error::TooFewEligibleNeighbors { .. }
            | Error::UnknownGroundClass(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
            Error::InvalidConfig(_) | Error::EmptyGrid | Error::InvalidSpec(_) => 4,
            Error::MissingModel(_) | Error::ModelNotLoaded(_) => 5,
            Error::FingerprintMismatch { .. } => 6,
            Error::Io { .. } => 7,
            Error::NonFiniteLoss { .. } => 8,
            _ => 1,
        };
        Failure::new(e.kind(), e.to_string(), code)
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn print_json<T: Serialize>(value: &T) -> Outcome {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

fn ingest(csv: &[PathBuf], out: &Path, schema: Option<&Path>, config: Option<&Path>) -> Outcome {
    let schema: CsvSchema = schema.map(read_json).transpose()?.unwrap_or_default();
    let config: IngestConfig = config.map(read_json).transpose()?.unwrap_or_default();
    let (corpus, report) = ingest_files(csv, &schema, &config)?;
    corpus.write(out)?;
    write_json(&out.join(INGEST_REPORT_FILE), &report)?;
    eprintln!(
        "ingested {} drives: kept {} of {} samples",
        report.drives.len(),
        report.total.samples_out,
        report.total.samples_in
    );
    Ok(())
}

fn fit(corpus_dir: &Path, w1: f64, w2: f64, ub: f64) -> Outcome {
    let mut corpus = Corpus::load(corpus_dir)?;
    fit_optimality(&mut corpus, w1, w2, ub)?;
    corpus.write_optimality(corpus_dir)?;
    for (gc, cfg) in &corpus.optimality {
        eprintln!("{gc}: MB {:.3} bar, MAR {:.3} mm/min", cfg.mb, cfg.mar);
    }
    Ok(())
}

fn train(corpus_dir: &Path, out: &Path, gc: Option<GroundClass>, grid: Option<&Path>, seed: u64, epochs: Option<usize>) -> Outcome {
    let corpus = Corpus::load(corpus_dir)?;
    let mut opts = TrainOptions::seeded(seed);
    opts.grid = grid.map(read_json::<Grid>).transpose()?;
    opts.classes = gc.map(|g| vec![g]);
    if let Some(n) = epochs {
        opts.train.epochs = n;
    }
    let trained = train_all(&corpus, &opts)?;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_models(out, &trained)?;
    for t in &trained {
        eprintln!("{}: final training MSE {:.6}", t.model.ground_class, t.model.training.final_mse);
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RecommendInput {
    One(RecommendRequest),
    Many(Vec<RecommendRequest>),
}

fn recommend(models: &Path, input: &Path) -> Outcome {
    let (requests, many) = match read_json::<RecommendInput>(input)? {
        RecommendInput::One(r) => (vec![r], false),
        RecommendInput::Many(v) => (v, true),
    };
    if let Some(v) = requests.iter().filter_map(|r| r.schema_version).find(|v| *v != SCHEMA_VERSION) {
        return Err(Failure::new(
            "SchemaMismatch",
            format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})"),
            3,
        ));
    }
    let classes: Vec<GroundClass> = requests.iter().map(|r| r.ground_class).collect::<BTreeSet<_>>().into_iter().collect();
    let registry = load_classes(models, &classes, AdvisorConfig::default())?;
    let recs = requests
        .iter()
        .map(|r| registry.recommend(r.ground_class, &r.cop, &r.cxp))
        .collect::<Result<Vec<_>, _>>()?;
    if many {
        print_json(&recs)
    } else {
        print_json(&recs[0])
    }
}

fn no_models(dir: &Path) -> Failure {
    Failure::new("MissingModel", format!("no models found in {}", dir.display()), 5)
}

fn run_validate(models: &Path, corpus_dir: &Path, baseline: bool, literal: bool, out: Option<&Path>) -> Outcome {
    let corpus = Corpus::load(corpus_dir)?;
    let registry = load_available(models, AdvisorConfig::default())?;
    if registry.is_empty() {
        return Err(no_models(models));
    }
    let opts = ValidateOptions {
        mode: if literal { ImprovementMode::Literal } else { ImprovementMode::Delta },
        baseline,
    };
    let outcome = validate(&corpus, &registry, &opts)?;
    print!("{}", render_table(&outcome.report));
    for (gc, rmse) in &outcome.rmse {
        println!("{gc} test RMSE {rmse:.6}");
    }
    if let Some(path) = out {
        write_json(path, &outcome)?;
    }
    Ok(())
}

fn simulate(spec: &Path, out: &Path, overrides: Option<&Path>, steps: Option<usize>, seed: Option<u64>) -> Outcome {
    let mut spec: SimSpec = read_json(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let overrides: Vec<Option<[f64; N_COP]>> = overrides.map(read_json).transpose()?.unwrap_or_default();
    let records = if overrides.is_empty() && steps.is_none() {
        generate_drive(&spec)?.0
    } else {
        let n = steps.unwrap_or(overrides.len());
        let mut session = SimSession::new(spec)?;
        (0..n)
            .map(|i| session.step(overrides.get(i).copied().flatten()))
            .collect::<Result<Vec<_>, _>>()?
    };
    write_csv(out, &records)?;
    eprintln!("wrote {} samples to {}", records.len(), out.display());
    Ok(())
}

fn serve(models: &Path, sim: Option<&Path>, host: &str, port: u16, tick_ms: u64) -> Outcome {
    let registry = load_available(models, AdvisorConfig::default())?;
    if registry.is_empty() {
        log::warn!("no models in {}; /recommend will answer 503 until reloaded", models.display());
    }
    let sim = match sim {
        Some(p) => read_json(p)?,
        None => SimSpec::single(GroundClass::Gc1, 1_000_000, 0),
    };
    sim.validate()?;
    let state = AppState::new(
        registry,
        ServiceConfig {
            models_dir: Some(models.to_path_buf()),
            advisor: AdvisorConfig::default(),
            sim,
            tick: Duration::from_millis(tick_ms.max(1)),
        },
    );
    let io = |e: std::io::Error| Failure::new("Io", e.to_string(), 7);
    let runtime = tokio::runtime::Runtime::new().map_err(io)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await.map_err(io)?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(io)?);
        tbm_service::serve(listener, state).await.map_err(io)
    })
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Ingest { csv, out, schema, config } => ingest(&csv, &out, schema.as_deref(), config.as_deref()),
        Command::FitOptimality { corpus, w1, w2, ub } => fit(&corpus, w1, w2, ub),
        Command::Train {
            corpus,
            out,
            gc,
            grid,
            seed,
            epochs,
        } => train(&corpus, &out, gc, grid.as_deref(), seed, epochs),
        Command::Recommend { models, input } => recommend(&models, &input),
        Command::Validate {
            models,
            corpus,
            baseline,
            literal,
            out,
        } => run_validate(&models, &corpus, baseline, literal, out.as_deref()),
        Command::Simulate {
            spec,
            out,
            overrides,
            steps,
            seed,
        } => simulate(&spec, &out, overrides.as_deref(), steps, seed),
        Command::Serve {
            models,
            sim,
            port,
            host,
            tick_ms,
        } => serve(&models, sim.as_deref(), &host, port, tick_ms),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::to_string(&f).unwrap_or_else(|_| f.message.clone()));
            ExitCode::from(f.exit_code)
        }
    }
}
