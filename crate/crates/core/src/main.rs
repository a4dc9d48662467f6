use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, LevelFilter};

use irt_trend::knn::PredictionMode;
use irt_trend::pipeline::{self, RunConfig};
use irt_trend::response_data::AbsencePolicy;
use irt_trend::trends::{ItemSource, TrendKind};
use irt_trend::{Error, Result};

/// 2PL IRT ability trends and nearest-neighbor at-risk prediction.
#[derive(Debug, Parser)]
#[command(name = "irt-trend", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML file with [simulate], [irt], [trend], [predict] and [evaluate] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic cohort.
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_students: Option<usize>,
        #[arg(long)]
        items_per_test: Option<usize>,
        #[arg(long)]
        n_tests: Option<usize>,
        #[arg(long)]
        absence_rate: Option<f64>,
    },
    /// Calibrate item parameters and abilities on a full response matrix.
    Calibrate {
        /// Response matrix (default: <out>/matrix.csv).
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[command(flatten)]
        irt: IrtFlags,
    },
    /// Estimate per-unit or cumulative ability trends.
    Trend {
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<TrendKind>,
        /// Units to estimate, e.g. 1..7.
        #[arg(long)]
        k_range: Option<String>,
        #[arg(long, value_parser = parse_item_source)]
        item_source: Option<ItemSource>,
        #[command(flatten)]
        irt: IrtFlags,
    },
    /// Neighbor-vote failure probabilities from a cumulative trend.
    Predict {
        /// Cumulative trend (default: <out>/trend_cumulative.csv).
        #[arg(long)]
        trend: Option<PathBuf>,
        /// Outcome labels (default: <out>/labels.csv).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Horizons, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<PredictionMode>,
        #[arg(long)]
        n_neighbors: Option<usize>,
    },
    /// Confusion tables, ROC and recall-precision curves, and the ability stump.
    Evaluate {
        /// Directory holding predictions_<k>.csv (default: <out>).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Full-matrix abilities for the stump (default: <out>/abilities.csv if present).
        #[arg(long)]
        abilities: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<f64>>,
        #[arg(long)]
        emit_svg: bool,
    },
}

#[derive(Debug, Args)]
struct IrtFlags {
    #[arg(long, value_parser = parse_policy)]
    policy: Option<AbsencePolicy>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

impl IrtFlags {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(p) = self.policy {
            config.irt.policy = p;
        }
        if let Some(t) = self.tolerance {
            config.irt.tolerance = t;
        }
        if let Some(n) = self.max_iterations {
            config.irt.max_iterations = n;
        }
    }
}

fn parse_policy(s: &str) -> std::result::Result<AbsencePolicy, String> {
    match s {
        "as-incorrect" => Ok(AbsencePolicy::AsIncorrect),
        "as-missing" => Ok(AbsencePolicy::AsMissing),
        _ => Err("expected as-incorrect or as-missing".into()),
    }
}

fn parse_kind(s: &str) -> std::result::Result<TrendKind, String> {
    match s {
        "cumulative" => Ok(TrendKind::Cumulative),
        "per-unit" => Ok(TrendKind::PerUnit),
        _ => Err("expected cumulative or per-unit".into()),
    }
}

fn parse_item_source(s: &str) -> std::result::Result<ItemSource, String> {
    match s {
        "recalibrate" => Ok(ItemSource::Recalibrate),
        "full-matrix" => Ok(ItemSource::FullMatrix),
        _ => Err("expected recalibrate or full-matrix".into()),
    }
}

fn parse_mode(s: &str) -> std::result::Result<PredictionMode, String> {
    match s {
        "loo" | "leave-one-out" => Ok(PredictionMode::LeaveOneOut),
        "reference" => Ok(PredictionMode::Reference),
        _ => Err("expected loo or reference".into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.global.out {
        config.out = Some(out);
    }
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let in_out = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| out.join(name));

    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }

    match cli.command {
        Command::Simulate {
            seed,
            n_students,
            items_per_test,
            n_tests,
            absence_rate,
        } => {
            let s = &mut config.simulate;
            s.seed = seed.unwrap_or(s.seed);
            s.n_students = n_students.unwrap_or(s.n_students);
            s.items_per_test = items_per_test.unwrap_or(s.items_per_test);
            s.n_tests = n_tests.unwrap_or(s.n_tests);
            s.absence_rate = absence_rate.unwrap_or(s.absence_rate);
            config.validate()?;
            pipeline::run_simulate(&config, &out)?;
        }
        Command::Calibrate { matrix, irt } => {
            irt.apply(&mut config);
            config.validate()?;
            pipeline::run_calibrate(&config, &in_out(matrix, "matrix.csv"), &out)?;
        }
        Command::Trend {
            matrix,
            kind,
            k_range,
            item_source,
            irt,
        } => {
            irt.apply(&mut config);
            if let Some(k) = kind {
                config.trend.kind = k;
            }
            if let Some(r) = k_range {
                config.trend.k_range = r;
            }
            if let Some(s) = item_source {
                config.trend.item_source = s;
            }
            config.validate()?;
            pipeline::run_trend(&config, &in_out(matrix, "matrix.csv"), &out)?;
        }
        Command::Predict {
            trend,
            labels,
            k,
            mode,
            n_neighbors,
        } => {
            let p = &mut config.predict;
            p.k = k.unwrap_or(std::mem::take(&mut p.k));
            p.mode = mode.unwrap_or(p.mode);
            p.n_neighbors = n_neighbors.unwrap_or(p.n_neighbors);
            config.validate()?;
            let trend = in_out(trend, "trend_cumulative.csv");
            pipeline::run_predict(&config, &trend, &in_out(labels, "labels.csv"), &out)?;
        }
        Command::Evaluate {
            predictions,
            labels,
            abilities,
            k,
            cutoffs,
            emit_svg,
        } => {
            let e = &mut config.evaluate;
            e.k = k.unwrap_or(std::mem::take(&mut e.k));
            e.cutoffs = cutoffs.unwrap_or(std::mem::take(&mut e.cutoffs));
            e.emit_svg |= emit_svg;
            config.validate()?;
            let abilities = abilities.or_else(|| {
                let p = out.join("abilities.csv");
                p.exists().then_some(p)
            });
            pipeline::run_evaluate(
                &config,
                &predictions.unwrap_or_else(|| out.clone()),
                &in_out(labels, "labels.csv"),
                abilities.as_deref().map(Path::new),
                &out,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.global.quiet { LevelFilter::Error } else { LevelFilter::Info })
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
