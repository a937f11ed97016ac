use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfl::harness::{
    bound_params, cdfl_bound_table, dfl_bound_table, initial_distance_sq, preset, run_experiment,
    ExperimentConfig, RunRecord, PRESETS,
};
use dfl::topology::TopologySpec;
use dfl::Error;

#[derive(Parser)]
#[command(
    name = "dfl",
    version,
    about = "Decentralized federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config, or a preset suite.
    Simulate {
        /// TOML config. Optional with --preset (seeds and output root are taken from it).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: Option<String>,
    },
    /// Print the DFL bound table and the C-DFL term table for a config.
    Bounds {
        #[arg(long)]
        config: PathBuf,
    },
    /// Spectral summary of a topology, e.g. `ring:10` or `group_ring:5x2`.
    Spectral {
        #[arg(long)]
        topology: String,
        #[arg(long)]
        nodes: Option<usize>,
    },
}

const SUMMARY_HEADER: &str =
    "label,median_final_loss,median_summary_grad_norm_sq,total_bytes,diverged_seeds,output";

fn summary_line(r: &RunRecord) -> String {
    format!(
        "{},{:e},{:e},{},{},{}",
        r.label(),
        r.summary.median_final_loss,
        r.summary.median_summary_grad_norm_sq,
        r.summary.total_bytes,
        r.summary.diverged_seeds,
        r.dir().display()
    )
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn simulate(config: Option<PathBuf>, preset_name: Option<String>) -> Result<ExitCode, Error> {
    let base = match (&config, &preset_name) {
        (None, None) => {
            return Err(Error::Config {
                key: "config".into(),
                reason: "--config is required without --preset".into(),
            })
        }
        _ => load_config(config.as_ref())?,
    };
    let configs = match &preset_name {
        Some(name) => preset(name, &base)?,
        None => vec![base],
    };
    emit(&format!("{SUMMARY_HEADER}\n"));
    let mut all_diverged = false;
    for cfg in &configs {
        let record = run_experiment(cfg)?;
        all_diverged |= record.all_diverged();
        emit(&format!("{}\n", summary_line(&record)));
    }
    Ok(if all_diverged {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn bounds(config: PathBuf) -> Result<ExitCode, Error> {
    let cfg = ExperimentConfig::load(&config)?;
    let params = bound_params(&cfg)?;
    emit(&dfl_bound_table(&params));
    emit("\n");
    if params.mu > 0.0 {
        match cdfl_bound_table(&params, initial_distance_sq(&cfg)?) {
            Ok(table) => emit(&table),
            Err(e) => emit(&format!("# cdfl bound unavailable: {e}\n")),
        }
    } else {
        emit("# cdfl bound unavailable: objective is not strongly convex\n");
    }
    Ok(ExitCode::SUCCESS)
}

fn spectral(topology: String, nodes: Option<usize>) -> Result<ExitCode, Error> {
    let c = TopologySpec::parse(&topology, nodes)?.build()?;
    let s = c.spectral()?;
    emit(&format!("nodes,{}\n", c.n()));
    emit(&format!("zeta,{:e}\n", s.zeta));
    emit(&format!("beta,{:e}\n", s.beta));
    emit(&format!("rho,{:e}\n", s.rho));
    let eig: Vec<String> = s.eigenvalues.iter().map(|v| format!("{v:e}")).collect();
    emit(&format!("eigenvalues,{}\n", eig.join(" ")));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, preset } => simulate(config, preset),
        Command::Bounds { config } => bounds(config),
        Command::Spectral { topology, nodes } => spectral(topology, nodes),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. }
                | Error::Parse(_)
                | Error::Io { .. }
                | Error::InvalidTopology(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
