use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use trajgan::data::{self, BoundingBox};
use trajgan::dp::{self, DpConfig, PrivacyLedger};
use trajgan::experiment::{self, ExperimentConfig};
use trajgan::metrics::{MetricsConfig, REPORT_COLUMNS};
use trajgan::tensor;
use trajgan::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRAINING: u8 = 3;

/// Convolutional GAN for synthetic location trajectories.
#[derive(Parser)]
#[command(name = "trajgan", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter and cap the configured dataset; write dataset.csv and summary.txt.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the configured one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one generator on the whole configured dataset.
    Train(RunArgs),
    /// Run k-fold cross-validation and write per-fold and aggregate reports.
    Experiment(RunArgs),
    /// Sample trajectories from a generator checkpoint into a CSV file.
    Generate(SampleArgs),
    /// Sample trajectories and write only their (lat, lon) points.
    ExportPointcloud(SampleArgs),
    /// Compare a generated CSV against a real one.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// `fs`, `geolife`, `unit` or `lat_min,lat_max,lon_min,lon_max`.
        #[arg(long, default_value = "fs", value_parser = parse_bbox)]
        bbox: BoundingBox,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        projections: usize,
        /// Also write the report as a one-row CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer's backward pass.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Privacy spent by a DP-SGD run, or the noise needed for a target epsilon.
    DpAccount {
        /// Sampling rate (batch size / dataset size).
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
        /// Noise multiplier to account for.
        #[arg(long, conflicts_with = "epsilon", required_unless_present = "epsilon")]
        sigma: Option<f64>,
        /// Target epsilon; calibrates sigma instead.
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the split and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Enable DP-SGD with default settings if the config has no [dp] table.
    #[arg(long)]
    dp: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of training steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of trajectories.
    #[arg(short, long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the bounding box stored in the checkpoint.
    #[arg(long, value_parser = parse_bbox)]
    bbox: Option<BoundingBox>,
}

fn parse_bbox(s: &str) -> Result<BoundingBox, String> {
    match s {
        "fs" => return Ok(BoundingBox::FS_NYC),
        "geolife" => return Ok(BoundingBox::GEOLIFE_BEIJING),
        "unit" => return Ok(BoundingBox::UNIT),
        _ => {}
    }
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c, d] => BoundingBox::new(a, b, c, d).map_err(|e| e.to_string()),
        _ => Err("expected four comma-separated numbers".into()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) => EXIT_USAGE,
        Error::Training(_) | Error::Shape { .. } => EXIT_TRAINING,
        _ => EXIT_DATA,
    }
}

fn load_config(args: &RunArgs) -> trajgan::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if args.dp && cfg.dp.is_none() {
        cfg.dp = Some(DpConfig::default());
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

fn write_report_csv(path: &Path, row: &[String]) -> trajgan::Result<()> {
    let text = format!("{}\n{}\n", REPORT_COLUMNS.join(","), row.join(","));
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> trajgan::Result<ExitCode> {
    match cli.command {
        Command::Preprocess { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or(cfg.output_dir.clone());
            let ds = experiment::cmd_preprocess(&cfg.dataset, &out)?;
            data::write_summary(&ds, std::io::stdout())?;
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let outcome = experiment::run_training(&cfg)?;
            let last = outcome.log.last();
            print_json(&json!({
                "output_dir": cfg.output_dir,
                "steps": cfg.train.steps,
                "final_swd": last.and_then(|r| r.swd),
                "dp": outcome.dp,
            }));
        }
        Command::Experiment(args) => {
            let cfg = load_config(&args)?;
            let report = experiment::run_experiment(&cfg)?;
            print_json(&json!({
                "output_dir": cfg.output_dir,
                "aggregate": report.aggregate,
                "failures": report.failures,
            }));
            if report.folds.is_empty() {
                return Ok(ExitCode::from(EXIT_TRAINING));
            }
        }
        Command::Generate(a) => {
            let ds = experiment::cmd_generate(&a.checkpoint, a.n, a.seed, a.bbox)?;
            data::write_fs_csv(&ds, &a.out)?;
            log::info!("wrote {} trajectories to {}", ds.len(), a.out.display());
        }
        Command::ExportPointcloud(a) => {
            let rows = experiment::cmd_export_pointcloud(&a.checkpoint, a.n, a.seed, a.bbox, &a.out)?;
            log::info!("wrote {rows} points to {}", a.out.display());
        }
        Command::Evaluate {
            real,
            generated,
            bbox,
            seed,
            projections,
            out,
        } => {
            let real = data::load_fs_csv_with_bbox(&real, bbox)?;
            let gen = data::load_fs_csv_with_bbox(&generated, bbox)?;
            let cfg = MetricsConfig {
                n_projections: projections,
                seed,
                ..MetricsConfig::default()
            };
            let report = experiment::cmd_evaluate(&real, &gen, &cfg)?;
            if let Some(out) = out {
                write_report_csv(&out, &report.csv_record())?;
            }
            print_json(&serde_json::to_value(&report)?);
        }
        Command::GradCheck { seed, tolerance } => {
            let mut ok = true;
            for (name, r) in tensor::run_suite(seed)? {
                let pass = r.max_rel_error < tolerance;
                ok &= pass;
                println!(
                    "{} {name}: max relative error {:.3e} over {} entries",
                    if pass { "PASS" } else { "FAIL" },
                    r.max_rel_error,
                    r.checked
                );
            }
            let gap = tensor::adjointness_gap(seed)?;
            let pass = gap < 1e-9;
            ok &= pass;
            println!(
                "{} conv/conv-transpose adjointness: gap {gap:.3e}",
                if pass { "PASS" } else { "FAIL" }
            );
            if !ok {
                return Ok(ExitCode::from(EXIT_TRAINING));
            }
        }
        Command::DpAccount {
            q,
            steps,
            delta,
            sigma,
            epsilon,
        } => {
            let sigma = match (sigma, epsilon) {
                (Some(s), _) => s,
                (None, Some(eps)) => dp::calibrate_sigma(eps, delta, q, steps)?,
                (None, None) => unreachable!("clap requires one of --sigma/--epsilon"),
            };
            let mut ledger = PrivacyLedger::new(q, sigma)?;
            ledger.record(steps);
            let eps = dp::account(&ledger, delta)?;
            print_json(&json!({ "q": q, "steps": steps, "delta": delta, "sigma": sigma, "epsilon": eps }));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
