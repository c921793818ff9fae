//! Command-line driver wiring the analysis pipeline: ingest, study,
//! simulate, shuffle, invert and fit, each writing its file products and a
//! `summary.json` into the required output directory.
//!
//! Exit codes are a stable contract for CI: 0 success, 1 usage or
//! configuration error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use microimpact::error::CoreError;
use microimpact::fit::fit_power_law;
use microimpact::nullmodel::shuffle_ids;
use microimpact::propagator::{fit_kernel_form, invert_kernel};
use microimpact::report::{
    read_curve_csv, read_kernel_csv, write_json, write_kernel_csv,
};
use microimpact::study::{run_ingest, run_study, StudyConfig};
use microimpact::synth::{emit_tape, SyntheticManifest};
use microimpact::tape::{build_tape, filter_mismatches, read_processed_file, write_processed_file, QuoteMode, Tape};

#[derive(Parser)]
#[command(
    name = "microimpact",
    version,
    about = "Market-microstructure impact analysis: tape ingestion, impact/response estimation, \
             kernel deconvolution, null models and synthetic tape generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw tick file, aggregate same-second runs, filter sign
    /// mismatches and write the processed tape.
    Ingest(IngestArgs),
    /// Run the full analysis over a processed tape.
    Study(StudyArgs),
    /// Generate a synthetic tape from a ground-truth manifest.
    Simulate(SimulateArgs),
    /// Shuffle trigger ids, preserving every firm's trade count exactly.
    Shuffle(ShuffleArgs),
    /// Invert a bare impact kernel from response/correlation CSVs.
    Invert(InvertArgs),
    /// Fit a power law (or the kernel form) to a curve CSV.
    Fit(FitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum QuoteModeArg {
    Price,
    Logmid,
}

impl From<QuoteModeArg> for QuoteMode {
    fn from(m: QuoteModeArg) -> Self {
        match m {
            QuoteModeArg::Price => QuoteMode::Price,
            QuoteModeArg::Logmid => QuoteMode::LogMid,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Raw,
    Processed,
}

#[derive(Args)]
struct CommonStudyArgs {
    /// Study configuration file (TOML); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Average log spread for tapes that do not carry quotes.
    #[arg(long)]
    mean_spread: Option<f64>,
    /// Firms below this trade count are excluded from per-firm stages.
    #[arg(long)]
    activity_floor: Option<usize>,
    /// Null-model replicates (0 skips the stage).
    #[arg(long)]
    replicates: Option<usize>,
    /// Seed for randomized stages; mandatory when they are requested.
    #[arg(long)]
    seed: Option<u64>,
    /// Lag horizon for reported series.
    #[arg(long)]
    max_lag: Option<usize>,
}

impl CommonStudyArgs {
    fn resolve(&self) -> Result<StudyConfig, CoreError> {
        let mut cfg = match &self.config {
            Some(path) => StudyConfig::from_file(path)?,
            None => StudyConfig::default(),
        };
        if let Some(s) = self.mean_spread {
            cfg.mean_spread = Some(s);
        }
        if let Some(f) = self.activity_floor {
            cfg.activity_floor = f;
        }
        if let Some(r) = self.replicates {
            cfg.replicates = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(l) = self.max_lag {
            cfg.max_lag = l;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Raw (or processed, with --format processed) tape file.
    #[arg(long)]
    input: PathBuf,
    /// Output directory (required).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Raw)]
    format: InputFormat,
    /// Stock label recorded in reports.
    #[arg(long, default_value = "STOCK")]
    label: String,
    /// How the raw quote columns are to be read.
    #[arg(long, value_enum)]
    quote_mode: Option<QuoteModeArg>,
    /// Also fit the impact exponent on raw rows taken as individual
    /// trades, to exhibit the aggregation bias.
    #[arg(long)]
    compare_raw: bool,
    #[command(flatten)]
    common: CommonStudyArgs,
}

#[derive(Args)]
struct StudyArgs {
    /// Processed tape file.
    #[arg(long)]
    tape: PathBuf,
    /// Output directory (required).
    #[arg(long)]
    out: PathBuf,
    /// Stock label recorded in reports.
    #[arg(long, default_value = "STOCK")]
    label: String,
    /// Pull the mean spread from a generator manifest instead of
    /// --mean-spread.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    common: CommonStudyArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Ground-truth manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (required).
    #[arg(long)]
    out: PathBuf,
    /// Override the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also emit the tape in raw-record format with same-second fragments.
    #[arg(long)]
    emit_raw: bool,
}

#[derive(Args)]
struct ShuffleArgs {
    /// Processed tape file.
    #[arg(long)]
    tape: PathBuf,
    /// Output directory (required).
    #[arg(long)]
    out: PathBuf,
    /// Shuffle seed (mandatory: reproducibility is the product).
    #[arg(long)]
    seed: u64,
    /// Average log spread of the tape (defaults to a placeholder; the
    /// shuffle itself does not depend on it).
    #[arg(long, default_value_t = 0.001)]
    mean_spread: f64,
}

#[derive(Args)]
struct InvertArgs {
    /// Response series CSV (bin_or_lag,value,count,stderr).
    #[arg(long)]
    response: PathBuf,
    /// Correlation series CSV.
    #[arg(long)]
    correlation: PathBuf,
    /// Output directory (required).
    #[arg(long)]
    out: PathBuf,
    /// Kernel length to solve for.
    #[arg(long, default_value_t = 500)]
    l_max: usize,
    /// History-tail truncation horizon (defaults to 4 * l_max).
    #[arg(long)]
    horizon: Option<usize>,
    /// Tikhonov regularization parameter.
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Lag window for the kernel-form fit.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    fit_window: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitKind {
    Powerlaw,
    Kernel,
}

#[derive(Args)]
struct FitArgs {
    /// Curve CSV (bin_or_lag,value,count,stderr) or kernel CSV (l,G0).
    #[arg(long)]
    input: PathBuf,
    /// Output directory (required).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FitKind::Powerlaw)]
    kind: FitKind,
    /// Abscissa window for the fit.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    window: Option<Vec<f64>>,
}

fn exit_code_for(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) => 1,
        CoreError::Schema(_)
        | CoreError::RowBudget { .. }
        | CoreError::EmptyTape(_)
        | CoreError::EmptyScope(_)
        | CoreError::Io { .. }
        | CoreError::Csv(_) => 2,
        CoreError::Fit(_) | CoreError::Domain(_) | CoreError::LinearSystem(_) => 3,
    }
}

fn load_tape(path: &Path, label: &str, mean_spread: Option<f64>) -> Result<Tape, CoreError> {
    let trades = read_processed_file(path)?;
    let spread = mean_spread.ok_or_else(|| {
        CoreError::Config(
            "processed tapes carry no quotes; pass --mean-spread (or --manifest/--config)".into(),
        )
    })?;
    build_tape(trades, label.to_string(), spread)
}

fn cmd_ingest(args: IngestArgs) -> Result<(), CoreError> {
    let mut cfg = args.common.resolve()?;
    if let Some(mode) = args.quote_mode {
        cfg.quote_mode = mode.into();
    }
    match args.format {
        InputFormat::Raw => {
            let (_tape, report) = run_ingest(&args.input, &args.label, &cfg, &args.out, args.compare_raw)?;
            if report.mismatch_warning {
                eprintln!(
                    "warning: mismatch filter dropped {:.2}% of trades (threshold {:.2}%)",
                    100.0 * report.dropped_fraction,
                    100.0 * cfg.mismatch_threshold
                );
            }
            for e in &report.row_errors {
                eprintln!("warning: line {}: {}", e.line, e.message);
            }
            write_json(&args.out.join("summary.json"), &report)?;
            println!(
                "ingested {} records into {} trades ({} dropped); tape at {}",
                report.n_records,
                report.n_trades,
                report.dropped,
                args.out.join("tape.csv").display()
            );
        }
        InputFormat::Processed => {
            // Pass-through: validate and re-emit canonically.
            let trades = read_processed_file(&args.input)?;
            let outcome = filter_mismatches(trades, cfg.mismatch_threshold);
            std::fs::create_dir_all(&args.out)
                .map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
            write_processed_file(&args.out.join("tape.csv"), &outcome.trades)?;
            #[derive(serde::Serialize)]
            struct PassThrough {
                n_trades: usize,
                dropped: usize,
                dropped_fraction: f64,
            }
            let summary = PassThrough {
                n_trades: outcome.trades.len(),
                dropped: outcome.dropped,
                dropped_fraction: outcome.dropped_fraction,
            };
            write_json(&args.out.join("summary.json"), &summary)?;
            println!(
                "validated {} trades; tape at {}",
                summary.n_trades,
                args.out.join("tape.csv").display()
            );
        }
    }
    Ok(())
}

fn cmd_study(args: StudyArgs) -> Result<(), CoreError> {
    let mut cfg = args.common.resolve()?;
    if cfg.mean_spread.is_none() {
        if let Some(path) = &args.manifest {
            let manifest = SyntheticManifest::from_file(path)?;
            cfg.mean_spread = Some(manifest.mean_spread);
        }
    }
    let tape = load_tape(&args.tape, &args.label, cfg.mean_spread)?;
    let summary = run_study(&tape, &cfg, &args.out)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    print!(
        "{}",
        std::fs::read_to_string(args.out.join("summary.txt"))
            .map_err(|e| CoreError::io(args.out.join("summary.txt").display().to_string(), e))?
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CoreError> {
    let mut manifest = SyntheticManifest::from_file(&args.manifest)?;
    if let Some(seed) = args.seed {
        manifest.seed = seed;
    }
    let (out, paths) = emit_tape(&manifest, &args.out, args.emit_raw)?;
    #[derive(serde::Serialize)]
    struct SimSummary {
        n_trades: usize,
        n_firms: usize,
        seed: u64,
        raw_emitted: bool,
    }
    let summary = SimSummary {
        n_trades: out.tape.len(),
        n_firms: out.tape.firm_index().len(),
        seed: out.manifest.seed,
        raw_emitted: paths.raw.is_some(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "simulated {} trades across {} firms; tape at {}",
        summary.n_trades,
        summary.n_firms,
        paths.tape.display()
    );
    Ok(())
}

fn cmd_shuffle(args: ShuffleArgs) -> Result<(), CoreError> {
    let tape = load_tape(&args.tape, "SHUFFLE", Some(args.mean_spread))?;
    let shuffled = shuffle_ids(&tape, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    write_processed_file(&args.out.join("shuffled_tape.csv"), shuffled.trades())?;
    #[derive(serde::Serialize)]
    struct ShuffleSummary {
        n_trades: usize,
        seed: u64,
        rng_algorithm: &'static str,
    }
    write_json(
        &args.out.join("summary.json"),
        &ShuffleSummary {
            n_trades: shuffled.len(),
            seed: args.seed,
            rng_algorithm: microimpact::nullmodel::RNG_ALGORITHM,
        },
    )?;
    println!(
        "shuffled {} trades; tape at {}",
        shuffled.len(),
        args.out.join("shuffled_tape.csv").display()
    );
    Ok(())
}

fn cmd_invert(args: InvertArgs) -> Result<(), CoreError> {
    let response: Vec<f64> = read_curve_csv(&args.response)?.iter().map(|r| r.1).collect();
    let correlation: Vec<f64> = read_curve_csv(&args.correlation)?.iter().map(|r| r.1).collect();
    if response.is_empty() {
        return Err(CoreError::Schema("empty response series".into()));
    }
    let horizon = args.horizon.unwrap_or(4 * args.l_max);
    let fit_window = match &args.fit_window {
        Some(w) => (w[0], w[1]),
        None => (1, args.l_max.min(400)),
    };
    let kernel = invert_kernel(
        &response,
        &correlation,
        response[0],
        None,
        args.l_max,
        horizon,
        args.ridge,
        Some(fit_window),
    )?;
    std::fs::create_dir_all(&args.out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    write_kernel_csv(&args.out.join("kernel.csv"), &kernel)?;
    #[derive(serde::Serialize)]
    struct InvertSummary<'a> {
        l_max: usize,
        horizon: usize,
        ridge: f64,
        fit: &'a Option<microimpact::propagator::KernelFit>,
    }
    write_json(
        &args.out.join("summary.json"),
        &InvertSummary {
            l_max: args.l_max,
            horizon,
            ridge: args.ridge,
            fit: &kernel.fit,
        },
    )?;
    if let Some(fit) = &kernel.fit {
        println!(
            "kernel inverted: gamma0={:.4} l0={:.3} beta={:.4} (+-{:.4})",
            fit.gamma0, fit.l0, fit.beta, fit.stderr_beta
        );
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<(), CoreError> {
    std::fs::create_dir_all(&args.out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    let window = args.window.as_ref().map(|w| (w[0], w[1]));
    match args.kind {
        FitKind::Powerlaw => {
            let points: Vec<(f64, f64, f64)> = read_curve_csv(&args.input)?
                .iter()
                .map(|r| (r.0, r.1, r.2 as f64))
                .collect();
            let fit = fit_power_law(&points, window)?;
            write_json(&args.out.join("fit.json"), &fit)?;
            write_json(&args.out.join("summary.json"), &fit)?;
            println!(
                "power law: c={:.6} alpha={:.6} (+-{:.6}) r2={:.6}",
                fit.coefficient, fit.exponent, fit.stderr_exponent, fit.r_squared
            );
        }
        FitKind::Kernel => {
            let values = match read_kernel_csv(&args.input) {
                Ok(v) => v,
                Err(_) => read_curve_csv(&args.input)?
                    .iter()
                    .filter(|r| r.0 >= 1.0)
                    .map(|r| r.1)
                    .collect(),
            };
            let (lo, hi) = match window {
                Some((lo, hi)) => (lo as usize, (hi as usize).min(values.len())),
                None => (1, values.len()),
            };
            let fit = fit_kernel_form(&values, (lo.max(1), hi))?;
            write_json(&args.out.join("fit.json"), &fit)?;
            write_json(&args.out.join("summary.json"), &fit)?;
            println!(
                "kernel form: gamma0={:.6} l0={:.4} beta={:.6} (+-{:.6})",
                fit.gamma0, fit.l0, fit.beta, fit.stderr_beta
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success; everything else is a
            // usage error (exit 1).
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Study(args) => cmd_study(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Shuffle(args) => cmd_shuffle(args),
        Command::Invert(args) => cmd_invert(args),
        Command::Fit(args) => cmd_fit(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
