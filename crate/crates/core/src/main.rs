use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hiercoh::config::{self, Experiment, PlotKind};
use hiercoh::Error;

#[derive(Parser)]
#[command(name = "hiercoh", version, about = "Coherence of a two-level atom in a leaky cavity under bath and classical noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or custom experiment and write its CSV files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        preset: Option<String>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "n-traj")]
        n_traj: Option<usize>,
        /// Worker threads, 0 for all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and check a configuration, then print it in canonical form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the classical-noise paths of the first trajectories.
    NoiseDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reshape a sweep CSV into a gnuplot matrix on stdout.
    Export {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "surface")]
        kind: Kind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Surface,
    Lines,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> hiercoh::Result<()> {
    match cmd {
        Command::Run { config, preset, out, seed, n_traj, threads } => {
            let mut overrides: Vec<(&str, String)> = Vec::new();
            if let Some(s) = seed {
                overrides.push(("sim.seed", s.to_string()));
            }
            if let Some(n) = n_traj {
                overrides.push(("sim.n_traj", n.to_string()));
            }
            if let Some(t) = threads {
                overrides.push(("sim.threads", t.to_string()));
            }
            require_file(&config)?;
            let exp = config::parse_config(&config, preset.as_deref(), &overrides)?;
            let dir = out.unwrap_or_else(|| exp.output.dir.clone());
            for path in config::run_preset(&exp, &dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Validate { config } => {
            let exp = load(&config)?;
            print!("{}", exp.emit());
            println!("# config_hash={}", exp.config.config_hash());
            Ok(())
        }
        Command::NoiseDump { config, out } => {
            let exp = load(&config)?;
            let dir = out.unwrap_or_else(|| exp.output.dir.clone());
            for path in config::noise_dump(&exp, &dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Export { csv, kind } => {
            let kind = match kind {
                Kind::Surface => PlotKind::Surface,
                Kind::Lines => PlotKind::Lines,
            };
            print!("{}", config::export_plotdata(&csv, kind)?);
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Experiment, Error> {
    require_file(path)?;
    config::parse_config(path, None, &[])
}

// a missing config is bad input, not a runtime failure
fn require_file(path: &Path) -> Result<(), Error> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("config file {} not found", path.display())))
    }
}
