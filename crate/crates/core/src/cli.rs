//! Command-line front end: `calibrate`, `monitor` and `bench`.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 on I/O and input
//! file errors.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calibration::{
    calibrate_ecdd_limit, calibrate_thresholds, CalibrationConfig, ThresholdTable, DEFAULT_ARL0,
    DEFAULT_REPLICATES, DEFAULT_SURVIVOR_FLOOR, DEFAULT_T_MAX,
};
use crate::cdm::{CdmConfig, CdmMonitor, LabelPolicy};
use crate::datastreams::{
    read_csv_stream, subsample_without_replacement, CsvSchema, CsvStreamReader, LabelMap, Sample,
};
use crate::ecdd::{cross_validated_error, Classifier, ClassifierKind, EcddMonitor, EcddState, CV_FOLDS, DEFAULT_KNN_K, DEFAULT_R};
use crate::error::{Error, Result};
use crate::experiment::{
    rank_methods, run_arl0, run_delay, run_grid_experiment, write_grid, write_ranks, write_reports,
    ExperimentConfig, Method,
};
use crate::monitor::{DetectionReport, DriftMonitor};
use crate::qt_ewma::DEFAULT_LAMBDA;
use crate::quanttree::DEFAULT_BINS;
use crate::rng::derive_seed;

#[derive(Debug, Parser)]
#[command(name = "cdm", version, about = "Class-wise concept drift detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate QT-EWMA thresholds and write a threshold table.
    Calibrate(CalibrateArgs),
    /// Monitor a labeled CSV stream and print a JSON detection report.
    Monitor(MonitorArgs),
    /// Run a benchmark described by an experiment config.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Number of histogram bins.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_ARL0)]
    pub arl0: f64,
    /// Training points per histogram.
    #[arg(long, default_value_t = 256)]
    pub train_size: usize,
    #[arg(long, default_value_t = DEFAULT_T_MAX)]
    pub t_max: usize,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = DEFAULT_SURVIVOR_FLOOR)]
    pub survivor_floor: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierArg {
    Knn,
    Lda,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Labeled training CSV (features then label).
    #[arg(long)]
    pub train: PathBuf,
    /// CSV stream to monitor.
    #[arg(long)]
    pub stream: PathBuf,
    /// Threshold table; required for cdm and qtewma.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Skip rows with unknown labels instead of failing.
    #[arg(long)]
    pub lenient_labels: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// ECDD target ARL0 (defaults to the table's when given).
    #[arg(long)]
    pub arl0: Option<f64>,
    #[arg(long, value_enum, default_value_t = ClassifierArg::Knn)]
    pub classifier: ClassifierArg,
    #[arg(long, default_value_t = DEFAULT_KNN_K)]
    pub knn_k: usize,
    #[arg(long, default_value_t = DEFAULT_R)]
    pub ecdd_r: f64,
    #[arg(long, default_value_t = 2000)]
    pub ecdd_calibration_replicates: usize,
    /// First CSV row is a header (auto-detected when omitted).
    #[arg(long)]
    pub header: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Arl0,
    Delay,
    Grid,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub kind: BenchKind,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write average method ranks (delay runs).
    #[arg(long)]
    pub ranks: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Monitor(a) => {
            let report = monitor(&a)?;
            let json = serde_json::to_string(&report).expect("report serializes");
            writeln!(out, "{json}").map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
        Command::Bench(a) => bench(a),
    }
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = CalibrationConfig {
        train_size: a.train_size,
        bins: a.k,
        lambda: a.lambda,
        arl0: a.arl0,
        t_max: a.t_max,
        replicates: a.replicates,
        seed: a.seed,
        survivor_floor: a.survivor_floor,
    };
    let table = calibrate_thresholds(&cfg)?;
    table.save(&a.out)?;
    eprintln!(
        "wrote {} thresholds (K={}, N={}, ARL0={}) to {}",
        table.thresholds.len(),
        table.bins,
        table.train_size,
        table.arl0,
        a.out.display()
    );
    Ok(())
}

/// Fits the chosen method on `--train` and runs it over `--stream` until
/// the first alarm or the end of the file.
pub fn monitor(a: &MonitorArgs) -> Result<DetectionReport> {
    let policy = if a.lenient_labels { LabelPolicy::Lenient } else { LabelPolicy::Strict };
    let mut schema = CsvSchema {
        has_header: a.header,
        ..CsvSchema::default()
    };
    schema.label_map = LabelMap::infer(&a.train, &schema)?;
    let classes = schema
        .label_map
        .classes()
        .ok_or_else(|| Error::input(format!("{}: no labeled rows", a.train.display())))?;
    if let LabelMap::Numeric { classes: c } = &mut schema.label_map {
        *c = Some(classes);
    }
    let training = read_csv_stream(&a.train, &schema)?.samples;
    let table = match (&a.thresholds, a.method) {
        (Some(p), _) => Some(Arc::new(ThresholdTable::load(p)?)),
        (None, Method::Ecdd) => None,
        (None, m) => return Err(Error::config(format!("--thresholds is required for --method {m}"))),
    };
    let seed = a.seed;
    let mut monitor: Box<dyn DriftMonitor> = match a.method {
        Method::Cdm => {
            let table = table.expect("checked");
            let n = table.train_size;
            let mut counts = BTreeMap::new();
            for s in &training {
                *counts.entry(s.label.expect("training rows are labeled")).or_insert(0usize) += 1;
            }
            let mut per_class = BTreeMap::new();
            for m in 1..=classes {
                let have = counts.get(&m).copied().unwrap_or(0);
                if have < n {
                    return Err(Error::config(format!(
                        "class {m} has {have} training rows but the threshold table was calibrated for N={n}"
                    )));
                }
                per_class.insert(m, n);
            }
            let (training, _) = subsample_without_replacement(&training, &per_class, derive_seed(seed, 0))?;
            let cfg = CdmConfig {
                bins: table.bins,
                lambda: table.lambda,
                seed,
                label_policy: policy,
                classes: Some(classes),
            };
            Box::new(CdmMonitor::fit(&training, table, &cfg)?)
        }
        Method::Qtewma => {
            let table = table.expect("checked");
            let n = table.train_size;
            if training.len() < n {
                return Err(Error::config(format!(
                    "{} training rows but the threshold table was calibrated for N={n}",
                    training.len()
                )));
            }
            let pooled: Vec<Sample> = training.iter().map(|s| Sample::labeled(s.x.clone(), 1)).collect();
            let (pooled, _) =
                subsample_without_replacement(&pooled, &BTreeMap::from([(1, n)]), derive_seed(seed, 0))?;
            let cfg = CdmConfig {
                bins: table.bins,
                lambda: table.lambda,
                seed,
                label_policy: policy,
                classes: Some(1),
            };
            Box::new(CdmMonitor::fit_pooled(&pooled, table, &cfg)?)
        }
        Method::Ecdd => {
            let kind = match a.classifier {
                ClassifierArg::Knn => ClassifierKind::Knn { k: a.knn_k },
                ClassifierArg::Lda => ClassifierKind::Lda,
            };
            let arl0 = a.arl0.or(table.as_ref().map(|t| t.arl0)).unwrap_or(DEFAULT_ARL0);
            let p0 = cross_validated_error(kind, &training, CV_FOLDS, seed)?.clamp(0.005, 0.995);
            let limit = calibrate_ecdd_limit(p0, a.ecdd_r, arl0, a.ecdd_calibration_replicates, derive_seed(seed, 1))?;
            let classifier = Arc::new(Classifier::fit(kind, &training)?);
            Box::new(EcddMonitor::new(classifier, EcddState::new(p0, a.ecdd_r, limit)?))
        }
    };
    let stream_schema = CsvSchema {
        lenient_labels: a.lenient_labels,
        ..schema
    };
    let mut reader = CsvStreamReader::open(&a.stream, stream_schema)?;
    while let Some(sample) = reader.next_sample()? {
        if monitor.observe(&sample)?.is_some() {
            break;
        }
    }
    let mut report = monitor.report();
    report.skipped_labels += reader.unknown_labels();
    Ok(report)
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    match a.kind {
        BenchKind::Arl0 | BenchKind::Delay => {
            let reports = if a.kind == BenchKind::Arl0 { run_arl0(&cfg)? } else { run_delay(&cfg)? };
            for r in &reports {
                eprintln!(
                    "{:<7} {:<12} {:?} estimate={} se={} used={} false_alarms={} censored={}",
                    r.method,
                    r.scenario,
                    r.kind,
                    r.estimate.map_or("-".into(), |v| format!("{v:.2}")),
                    r.std_err.map_or("-".into(), |v| format!("{v:.2}")),
                    r.used,
                    r.false_alarms,
                    r.censored
                );
            }
            write_reports(&reports, &a.out)?;
            if let Some(path) = &a.ranks {
                write_ranks(&rank_methods(&reports)?, path)?;
            }
        }
        BenchKind::Grid => {
            let cells = run_grid_experiment(&cfg)?;
            let failed = cells.iter().filter(|c| c.failed.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} grid cells failed");
            }
            write_grid(&cells, &a.out)?;
        }
    }
    Ok(())
}
