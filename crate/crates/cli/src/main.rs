use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use gk_hydro::harness::{self, Command, ExperimentConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Rates,
    Conductivity,
    Cltvar,
    Simulate,
    Pde,
    Interface,
    HydroCompare,
    InterfacePipeline,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Command {
        match c {
            Cmd::Rates => Command::Rates,
            Cmd::Conductivity => Command::Conductivity,
            Cmd::Cltvar => Command::Cltvar,
            Cmd::Simulate => Command::Simulate,
            Cmd::Pde => Command::Pde,
            Cmd::Interface => Command::Interface,
            Cmd::HydroCompare => Command::HydroCompare,
            Cmd::InterfacePipeline => Command::InterfacePipeline,
        }
    }
}

/// Glauber-Kawasaki lattice gas experiments.
#[derive(Debug, Parser)]
#[command(name = "gk-hydro", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `output` from the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command = Command::from(args.command);
    let result = ExperimentConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        let dir = args.out.clone().unwrap_or_else(|| cfg.output.clone());
        harness::run(command, &cfg, Some(&dir))?;
        Ok(fs::read_to_string(dir.join("report.txt"))?)
    });
    match result {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gk-hydro {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subcommand_names_match_harness() {
        let names: Vec<String> =
            Cmd::value_variants().iter().map(|c| c.to_possible_value().unwrap().get_name().to_string()).collect();
        let expected: Vec<&str> = Command::ALL.iter().map(Command::name).collect();
        assert_eq!(names, expected);
        for c in Cmd::value_variants() {
            assert_eq!(c.to_possible_value().unwrap().get_name(), Command::from(*c).name());
        }
    }
}
