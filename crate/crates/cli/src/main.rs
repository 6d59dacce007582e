use std::path::PathBuf;
use std::process::ExitCode;

use agelab::harness::{self, Recipe};
use agelab::snapshot::Snapshot;
use agelab::Error;
use clap::{Parser, Subcommand};

/// Storage-aging laboratory: simulate allocation policies under a
/// safe-write workload and measure fragmentation against storage age.
#[derive(Parser)]
#[command(name = "agelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (config file or bundled recipe name).
    Run {
        config: String,
        /// Write CSV here instead of the config's output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a grid of experiments and merge the results.
    Grid {
        grid: String,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check a config or grid without simulating.
    Validate { config: String },
    /// Rebuild object layouts from a snapshot's markers and compare them
    /// with its records.
    Scan { snapshot: PathBuf },
    /// List bundled recipes.
    Recipes,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agelab: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, csv } => {
            let mut cfg = match harness::load_recipe(&config)? {
                Recipe::Experiment(c) => c,
                Recipe::Grid(_) => return Err(Error::Usage(format!("{config} is a grid; use `agelab grid`"))),
            };
            let to_stdout = csv.is_none() && cfg.outputs.csv.is_none();
            if csv.is_some() {
                cfg.outputs.csv = csv;
            }
            let (result, store) = harness::execute(&cfg);
            match result {
                Ok(reports) => {
                    harness::write_outputs(&cfg, &reports, store.as_ref())?;
                    if to_stdout {
                        print!("{}", harness::csv(&cfg.name, &reports));
                    }
                    Ok(())
                }
                Err(e) => {
                    if let Err(io) = harness::write_snapshot(&cfg, store.as_ref()) {
                        eprintln!("agelab: {io}");
                    }
                    Err(e)
                }
            }
        }
        Command::Grid { grid, parallel, csv } => {
            let mut grid_cfg = match harness::load_recipe(&grid)? {
                Recipe::Grid(g) => g,
                Recipe::Experiment(_) => return Err(Error::Usage(format!("{grid} is not a grid; use `agelab run`"))),
            };
            let to_stdout = csv.is_none() && grid_cfg.outputs.csv.is_none();
            if csv.is_some() {
                grid_cfg.outputs.csv = csv;
            }
            let outcome = harness::run_grid(&grid_cfg, parallel)?;
            harness::write_grid_outputs(&grid_cfg, &outcome)?;
            if to_stdout {
                print!("{}", outcome.csv());
            }
            eprint!("{}", outcome.summary());
            let first_failure = outcome.failures().next().map(|(key, failure)| match failure {
                harness::CellFailure::Error(e) => e.clone(),
                harness::CellFailure::Panic(msg) => Error::InvariantViolation(format!("cell {key} panicked: {msg}")),
            });
            first_failure.map_or(Ok(()), Err)
        }
        Command::Validate { config } => {
            match harness::load_recipe(&config)? {
                Recipe::Experiment(c) => {
                    c.validate()?;
                    println!("ok: {} (occupancy {:.4})", c.name, c.occupancy());
                }
                Recipe::Grid(g) => {
                    let cells = g.expand()?;
                    for (_, c) in &cells {
                        c.validate()?;
                    }
                    println!("ok: {} ({} cells)", g.name, cells.len());
                }
            }
            Ok(())
        }
        Command::Scan { snapshot } => {
            let text = harness::read_file(&snapshot)?;
            let snap = Snapshot::from_json(&text).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", snapshot.display())),
                e => e,
            })?;
            let (_, summary) = snap.scan()?;
            println!(
                "ok: {} objects, {} fragments, layout matches records",
                summary.objects, summary.fragments
            );
            Ok(())
        }
        Command::Recipes => {
            for (name, text) in harness::RECIPES {
                let kind = match Recipe::from_json(text)? {
                    Recipe::Experiment(_) => "run",
                    Recipe::Grid(_) => "grid",
                };
                println!("{name}\t{kind}");
            }
            Ok(())
        }
    }
}
