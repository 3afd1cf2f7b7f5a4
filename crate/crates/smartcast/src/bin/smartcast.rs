use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use smartcast::gradcheck::{check_both, ToyDims};
use smartcast::pipeline::{self, ErrorKind, PipelineError, Stage};
use smartcast::synth::{write_scenario, SynthSpec};
use smartcast_core::SOIL_HORIZON;

/// Soil-moisture forecasting from sparse sensors and satellite imagery.
#[derive(Debug, Parser)]
#[command(name = "smartcast", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Forecast day to interpolate.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..=SOIL_HORIZON as u64))]
    day: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic scenario (sensors, locations, image stack, config).
    Synth(SynthArgs),
    /// Train one soil model per depth.
    TrainSoil,
    /// Train the vegetation-index model.
    TrainIndex,
    /// Forecast with saved checkpoints.
    Forecast,
    /// Krige saved forecasts into a volume.
    Interpolate,
    /// All stages end to end.
    Run,
    /// Finite-difference check of both architectures at toy size.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 400)]
    days: usize,
    #[arg(long, default_value_t = 4)]
    sensors: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 14)]
    images: usize,
    /// No AR noise, rain or missing readings.
    #[arg(long)]
    zero_noise: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Hidden size of both toys.
    #[arg(long)]
    hidden: Option<usize>,
    /// Soil toy input length.
    #[arg(long)]
    input_len: Option<usize>,
    /// Soil toy horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Perturb one analytic gradient entry (the check must then fail).
    #[arg(long)]
    corrupt: bool,
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn config_error(message: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(Stage::Config, ErrorKind::Config, message)
}

fn load(cli: &Cli) -> Result<smartcast::config::RunConfig, PipelineError> {
    let path = cli.config.as_deref().ok_or_else(|| config_error("--config is required"))?;
    let mut cfg = pipeline::load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.output_dir = absolute(out);
    }
    if let Some(day) = cli.day {
        cfg.forecast_day = day as usize;
    }
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn print_summary(report: &Value) {
    for s in report["soil"].as_array().into_iter().flatten() {
        println!(
            "soil {:>3} cm: test rmse {:.4}, persistence {:.4}",
            s["depth_cm"], s["test"]["rmse"].as_f64().unwrap_or(f64::NAN), s["test"]["persistence_rmse"].as_f64().unwrap_or(f64::NAN)
        );
    }
    if let Some(i) = report.get("index") {
        println!(
            "index: test rmse {:.4}, persistence {:.4}",
            i["test"]["rmse"].as_f64().unwrap_or(f64::NAN),
            i["test"]["persistence_rmse"].as_f64().unwrap_or(f64::NAN)
        );
    }
    if let Some(f) = report.get("forecast") {
        println!("forecast: {} points, target {}", f["points"], f["target_date"].as_str().unwrap_or("?"));
    }
    for d in report["volume"]["depths"].as_array().into_iter().flatten() {
        println!(
            "volume {:>3} cm: variogram {}, loo r2 {:.3}",
            d["depth_cm"],
            d["variogram_source"].as_str().unwrap_or("?"),
            d["loo_r2_raw"].as_f64().unwrap_or(f64::NAN)
        );
    }
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<(), PipelineError> {
    let mut spec = SynthSpec {
        seed: cli.seed.unwrap_or(7),
        days: args.days,
        n_sensors: args.sensors,
        grid_width: args.width,
        grid_height: args.height,
        n_images: args.images,
        ..SynthSpec::default()
    };
    if args.zero_noise {
        spec.noise_std = 0.0;
        spec.rain_probability = 0.0;
        spec.missing_rate = 0.0;
    }
    if spec.days == 0 || spec.n_sensors == 0 || spec.grid_width == 0 || spec.grid_height == 0 || spec.n_images == 0 {
        return Err(PipelineError::new(Stage::Synth, ErrorKind::Config, "synth dimensions must be positive"));
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("scenario"));
    write_scenario(&spec, &dir).map_err(|e| PipelineError::new(Stage::Synth, ErrorKind::Data, e))?;
    println!("wrote scenario to {}", dir.display());
    Ok(())
}

fn gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<(), PipelineError> {
    let mut soil = ToyDims::SOIL;
    let mut index = ToyDims::INDEX;
    if let Some(h) = args.hidden {
        soil.hidden = h;
        index.hidden = h;
    }
    soil.input_len = args.input_len.unwrap_or(soil.input_len);
    soil.horizon = args.horizon.unwrap_or(soil.horizon);
    let numeric = |e: &dyn std::fmt::Display| PipelineError::new(Stage::Gradcheck, ErrorKind::Numeric, format!("gradcheck: {e}"));
    let results = check_both(soil, index, cli.seed.unwrap_or(0), args.corrupt).map_err(|e| numeric(&e))?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{} toy (input {}, hidden {}, L {}, H {}): {} coordinates, max rel err {:.3e} -> {}",
            r.name,
            r.input_dim,
            r.dims.hidden,
            r.dims.input_len,
            r.dims.horizon,
            r.report.checked,
            r.report.max_rel_error,
            if r.report.passed { "PASS" } else { "FAIL" }
        );
        if !r.report.passed {
            if let Some(w) = &r.report.worst {
                println!(
                    "  worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.tensor, w.index, w.analytic, w.numeric
                );
            }
            failed.push(r.name);
        }
    }
    let json = Value::Array(results.iter().map(|r| r.to_json()).collect());
    println!("{}", serde_json::to_string(&json).expect("json serializes"));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(numeric(&format!("{} toy failed", failed.join(" and "))))
    }
}

fn dispatch(cli: &Cli) -> Result<(), PipelineError> {
    let report = match &cli.command {
        Command::Synth(args) => return synth(cli, args),
        Command::Gradcheck(args) => return gradcheck(cli, args),
        Command::TrainSoil => pipeline::run_train_soil(&load(cli)?)?,
        Command::TrainIndex => pipeline::run_train_index(&load(cli)?)?,
        Command::Forecast => pipeline::run_forecast(&load(cli)?)?,
        Command::Interpolate => pipeline::run_interpolate(&load(cli)?)?,
        Command::Run => pipeline::run(&load(cli)?)?,
    };
    print_summary(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
