//! `qfc`: run quantum-frequency-comb simulation scenarios and write
//! plot-ready CSV/JSON tables.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use qfc_core::report::{emit_report, Format};
use qfc_core::scenario::{paper_defaults, run_scenario, Scenario, Stage};
use qfc_core::Error;

/// Name accepted by `--config` for the bundled scenario.
const BUNDLED: &str = "paper-defaults";

#[derive(Parser, Debug)]
#[command(
    name = "qfc",
    version,
    about = "Simulate a Sagnac-loop microring entangled frequency comb"
)]
struct Cli {
    /// Scenario JSON file, or `paper-defaults` for the bundled scenario.
    #[arg(long, global = true, default_value = BUNDLED)]
    config: String,

    /// Override the scenario's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (defaults to the scenario's `outputs` field).
    #[arg(long, global = true, env = "QFC_OUT")]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl From<OutputFormat> for Format {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Csv => Format::Csv,
            OutputFormat::Json => Format::Json,
            OutputFormat::Both => Format::Both,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resonance sweeps and Lorentzian fits.
    Spectrum,
    /// Forward/backward heater sweeps at several pump powers.
    Hysteresis,
    /// Closed- and open-loop resonance lock under drift.
    Lock,
    /// Visibility scan, per-channel tomography and fidelity versus power.
    Tomo,
    /// Power-dependence fits across the filter scan.
    PowerFit,
    /// Joint spectral intensity and CAR versus power.
    Jsi,
    /// Bandwidth, brightness and efficiency budget.
    Metrics,
    /// Every stage.
    All,
    /// Print the bundled default scenario.
    Defaults,
    /// Validate the scenario without running it.
    Validate,
}

fn load(cli: &Cli) -> Result<Scenario> {
    let mut scenario = if cli.config == BUNDLED {
        paper_defaults()
    } else {
        let text = std::fs::read_to_string(&cli.config)
            .with_context(|| format!("reading scenario {}", cli.config))?;
        serde_json::from_str::<Scenario>(&text)
            .with_context(|| format!("parsing scenario {}", cli.config))?
    };
    if let Some(seed) = cli.seed {
        scenario.root_seed = seed;
    }
    scenario.validate()?;
    Ok(scenario)
}

fn run(cli: &Cli) -> Result<()> {
    let stages: Vec<Stage> = match cli.command {
        Command::Defaults => {
            print!("{}", paper_defaults().to_json());
            return Ok(());
        }
        Command::Validate => {
            load(cli)?;
            println!("scenario is valid");
            return Ok(());
        }
        Command::Spectrum => vec![Stage::Spectrum],
        Command::Hysteresis => vec![Stage::Hysteresis],
        Command::Lock => vec![Stage::Lock],
        Command::Tomo => vec![Stage::Tomo],
        Command::PowerFit => vec![Stage::PowerFit],
        Command::Jsi => vec![Stage::Jsi],
        Command::Metrics => vec![Stage::Metrics],
        Command::All => Stage::ALL.to_vec(),
    };
    let scenario = load(cli)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&scenario.outputs));
    let results = run_scenario(&scenario, &stages)?;
    let written = emit_report(&results, &out, cli.format.into())?;
    for path in &written {
        println!("{}", path.display());
    }
    log::info!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let mut shown = format!("{err}");
            eprintln!("error: {shown}");
            for cause in err.chain().skip(1) {
                let text = cause.to_string();
                if !shown.contains(&text) {
                    eprintln!("  caused by: {text}");
                }
                shown = text;
            }
            let invalid = matches!(err.downcast_ref::<Error>(), Some(Error::InvalidConfig(_)))
                || err.downcast_ref::<serde_json::Error>().is_some();
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}
