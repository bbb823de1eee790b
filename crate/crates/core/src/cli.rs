//! The `motion-code` command line.
//!
//! Every command prints a JSON [`RunReport`] on stdout. Exit codes: 0 on
//! success, 1 for input errors (files, formats, validation), 2 for numerical
//! failures. `MOTIONCODE_LOG` sets log verbosity (`error`..`trace`).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench;
use crate::data_io::{
    self, dataset_digest, inject_noise_records, load_model, read_records, save_model, split_records,
    to_dataset, to_held_out, to_labeled_series, write_ragged, Loaded, ModelFile, NoiseScope,
};
use crate::error::{Error, Result};
use crate::evaluate::{classification_report, forecast_report, skeletons};
use crate::optimizer::{train, StopReason};
use crate::types::{Dataset, Hyperparams};

#[derive(Debug, Parser)]
#[command(name = "motion-code", version, about = "Classify and forecast collections of noisy time series")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Ragged,
    Ucr,
}

impl From<FormatArg> for data_io::Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Ragged => data_io::Format::Ragged,
            FormatArg::Ucr => data_io::Format::Ucr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Global,
    PerSeries,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "ragged")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    /// Informative timestamps per class.
    #[arg(short = 'm', long, default_value_t = 10)]
    pub m: usize,
    /// Motion code dimension.
    #[arg(short = 'd', long, default_value_t = 2)]
    pub d: usize,
    /// Kernel mixture components.
    #[arg(short = 'J', long = "components", default_value_t = 1)]
    pub components: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Observation noise standard deviation (normalized units).
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(short = 'M', long = "max-iters", default_value_t = 10)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl HyperArgs {
    fn hyper(&self) -> Hyperparams {
        Hyperparams {
            m: self.m,
            d: self.d,
            num_components: self.components,
            lambda: self.lambda,
            sigma: self.sigma,
            max_iters: self.max_iters,
            epsilon: self.epsilon,
            jitter: self.jitter,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// The training data the model was fitted on.
    #[arg(long = "train-data")]
    pub train_data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it to --out.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify every series of --data by nearest predicted mean signal.
    Classify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast held-out future points of --data (ragged, same order as the
    /// training series) and compare with the Last-Seen baseline.
    Forecast {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sorted informative timestamps per class with the predicted mean and
    /// variance there, or on an even grid of --grid points.
    Timestamps {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "ragged")]
        format: FormatArg,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every acceptance check on synthetic data; writes report.json and
    /// timings.json into --out.
    Bench {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split every series into a leading train part and a held-out tail.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.8)]
        fraction: f64,
        #[arg(long = "train-out")]
        train_out: PathBuf,
        #[arg(long = "test-out")]
        test_out: PathBuf,
    },
    /// Add Gaussian noise with std = level * max |value| and write ragged output.
    Noise {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        level: f64,
        #[arg(long, value_enum, default_value = "global")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Serialize)]
pub struct RunReport<P: Serialize> {
    pub command: &'static str,
    pub hyper: Option<Hyperparams>,
    pub wall_clock_seconds: f64,
    pub payload: P,
}

#[derive(Debug, Serialize)]
pub struct TrainPayload {
    pub model: String,
    pub classes: usize,
    pub series: usize,
    pub points: usize,
    pub initial_loss: f64,
    pub loss: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct FilesPayload {
    pub written: Vec<String>,
    pub records: usize,
}

fn print<P: Serialize>(
    command: &'static str,
    hyper: Option<Hyperparams>,
    start: Instant,
    payload: P,
    out: Option<&Path>,
) -> Result<()> {
    let report = RunReport {
        command,
        hyper,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        payload,
    };
    let text = serde_json::to_string_pretty(&report).expect("reports serialize") + "\n";
    if let Some(path) = out {
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    print!("{text}");
    Ok(())
}

/// Loads the model and its training data, checking the data against the
/// stored digest.
fn model_and_training(args: &ModelArgs, format: FormatArg) -> Result<(ModelFile, Loaded)> {
    let model = load_model(&args.model)?;
    let labels = model.labels();
    let norm = model.normalization();
    let file = read_records(&args.train_data, format.into())?;
    let dataset = to_dataset(&file, &labels, &norm)?;
    if let Some(expected) = &model.training_digest {
        if *expected != dataset_digest(&dataset) {
            return Err(Error::Invalid(format!(
                "{} is not the data {} was trained on",
                args.train_data.display(),
                args.model.display()
            )));
        }
    }
    Ok((
        model,
        Loaded {
            dataset,
            labels,
            normalization: norm,
        },
    ))
}

fn cmd_train(data: &DataArgs, hyper: Hyperparams, out: &Path) -> Result<()> {
    let start = Instant::now();
    hyper.validate()?;
    let loaded = data_io::load(&data.data, data.format.into())?;
    let ds: &Dataset = &loaded.dataset;
    log::info!(
        "training on {} classes, {} series, {} points",
        ds.num_classes(),
        ds.num_series(),
        ds.num_points()
    );
    let outcome = train(ds, hyper)?;
    let file = ModelFile::from_params(
        &outcome.params,
        &loaded.labels,
        loaded.normalization.value_scale,
        Some(dataset_digest(ds)),
    )?;
    save_model(out, &file)?;
    print(
        "train",
        Some(hyper),
        start,
        TrainPayload {
            model: out.display().to_string(),
            classes: ds.num_classes(),
            series: ds.num_series(),
            points: ds.num_points(),
            initial_loss: outcome.initial_loss,
            loss: outcome.loss,
            iterations: outcome.iterations,
            stop_reason: outcome.stop_reason,
            loss_trace: outcome.loss_trace,
        },
        None,
    )
}

fn cmd_classify(model: &ModelArgs, data: &DataArgs, out: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let (file, train_set) = model_and_training(model, data.format)?;
    let params = file.params()?;
    let test_file = read_records(&data.data, data.format.into())?;
    let test = to_labeled_series(&test_file, &train_set.labels, &train_set.normalization)?;
    let report = classification_report(&params, &train_set.dataset, &test, &train_set.labels)?;
    print("classify", Some(file.hyper), start, report, out)
}

fn cmd_forecast(model: &ModelArgs, data: &DataArgs, out: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let (file, train_set) = model_and_training(model, data.format)?;
    let params = file.params()?;
    let test_file = read_records(&data.data, data.format.into())?;
    let held = to_held_out(&test_file, &train_set.labels, &train_set.normalization)?;
    let report = forecast_report(&params, &train_set.dataset, &held, &train_set.labels)?;
    print("forecast", Some(file.hyper), start, report, out)
}

fn cmd_timestamps(model: &ModelArgs, format: FormatArg, grid: Option<usize>, out: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let (file, train_set) = model_and_training(model, format)?;
    let params = file.params()?;
    let grid = match grid {
        Some(n) if n < 2 => return Err(Error::Invalid("--grid needs at least 2 points".into())),
        Some(n) => Some(data_io::unit_grid(n)),
        None => None,
    };
    let sk = skeletons(&params, &train_set.dataset, &train_set.labels, grid.as_deref())?;
    print("timestamps", Some(file.hyper), start, sk, out)
}

#[derive(Debug, Serialize)]
struct BenchPayload {
    report: String,
    timings: String,
    all_passed: bool,
    timings_passed: bool,
    checks: Vec<bench::Check>,
}

fn cmd_bench(seed: u64, out: &Path) -> Result<()> {
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report_path = out.join("report.json");
    let timings_path = out.join("timings.json");
    // fail on an unwritable directory before spending minutes on the checks
    fs::write(&report_path, "").map_err(|e| Error::io(&report_path, e))?;
    let (report, timings) = bench::run(seed)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    let text = serde_json::to_string_pretty(&timings).expect("timings serialize") + "\n";
    fs::write(&timings_path, text).map_err(|e| Error::io(&timings_path, e))?;
    for c in report.checks.iter().chain([&timings.scaling]) {
        if !c.passed {
            log::warn!("check {} failed: {} {} {}", c.name, c.value, c.comparison, c.threshold);
        }
    }
    print(
        "bench",
        Some(Hyperparams::default()),
        start,
        BenchPayload {
            report: report_path.display().to_string(),
            timings: timings_path.display().to_string(),
            all_passed: report.all_passed,
            timings_passed: timings.all_passed,
            checks: report.checks,
        },
        None,
    )
}

fn cmd_split(data: &DataArgs, fraction: f64, train_out: &Path, test_out: &Path) -> Result<()> {
    let start = Instant::now();
    let file = read_records(&data.data, data.format.into())?;
    let (train, test) = split_records(&file, fraction)?;
    write_ragged(train_out, &train)?;
    write_ragged(test_out, &test)?;
    print(
        "split",
        None,
        start,
        FilesPayload {
            written: vec![train_out.display().to_string(), test_out.display().to_string()],
            records: file.records.len(),
        },
        None,
    )
}

fn cmd_noise(data: &DataArgs, level: f64, scope: ScopeArg, seed: u64, out: &Path) -> Result<()> {
    let start = Instant::now();
    let file = read_records(&data.data, data.format.into())?;
    let scope = match scope {
        ScopeArg::Global => NoiseScope::Global,
        ScopeArg::PerSeries => NoiseScope::PerSeries,
    };
    let noisy = inject_noise_records(&file, level, seed, scope)?;
    write_ragged(out, &noisy)?;
    print(
        "noise",
        None,
        start,
        FilesPayload {
            written: vec![out.display().to_string()],
            records: noisy.records.len(),
        },
        None,
    )
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { data, hyper, out } => cmd_train(data, hyper.hyper(), out),
        Command::Classify { model, data, out } => cmd_classify(model, data, out.as_deref()),
        Command::Forecast { model, data, out } => cmd_forecast(model, data, out.as_deref()),
        Command::Timestamps {
            model,
            format,
            grid,
            out,
        } => cmd_timestamps(model, *format, *grid, out.as_deref()),
        Command::Bench { seed, out } => cmd_bench(*seed, out),
        Command::Split {
            data,
            fraction,
            train_out,
            test_out,
        } => cmd_split(data, *fraction, train_out, test_out),
        Command::Noise {
            data,
            level,
            scope,
            seed,
            out,
        } => cmd_noise(data, *level, *scope, *seed, out),
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses arguments, configures logging and threads, runs the command and
/// returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
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
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOTIONCODE_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
