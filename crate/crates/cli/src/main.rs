use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ktsim::accounting::Report;
use ktsim::metrics::trials_csv;
use ktsim::predict::{parse_params, predict};
use ktsim::scenario::{Overrides, Scenario, SimError, BUNDLED};
use ktsim::simnet::engine;

#[derive(Parser)]
#[command(
    name = "ktsim",
    version,
    about = "Simulate fake-key attacks against a key-transparency server"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a bundled scenario or a scenario file.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
        /// Directory for metrics.json, trials.csv and summary.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// What to print on stdout.
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Evaluate a closed-form detection probability or delay bound.
    Predict {
        /// akm, akm_general_owner, akm_general_any, akm_churn, ktaca or ktca.
        #[arg(long)]
        defense: String,
        /// Comma-separated key=value pairs; lists use `;`.
        #[arg(long, default_value = "")]
        params: String,
    },
    /// Closed-form and simulated traffic for a scenario.
    Account {
        scenario: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Names of the bundled scenarios.
    ListScenarios,
}

enum Failure {
    Violated,
    Config(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violated) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run {
            scenario,
            seed,
            trials,
            epochs,
            out,
            format,
        } => {
            let mut sc = Scenario::resolve(&scenario)?;
            sc.apply(Overrides { seed, trials, epochs })?;
            let (m, recs) = engine::run(&sc)?;
            let json = m.to_json();
            let csv = trials_csv(&recs);
            let summary = m.summary();
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(SimError::from)?;
                for (file, body) in [("metrics.json", &json), ("trials.csv", &csv), ("summary.txt", &summary)] {
                    std::fs::write(dir.join(file), body).map_err(SimError::from)?;
                }
            }
            print!(
                "{}",
                match format {
                    Format::Json => &json,
                    Format::Csv => &csv,
                    Format::Text => &summary,
                }
            );
            if m.predictions_met() {
                Ok(())
            } else {
                Err(Failure::Violated)
            }
        }
        Cmd::Predict { defense, params } => {
            let formula = if defense == "ktca" {
                "ktca_bound"
            } else {
                defense.as_str()
            };
            let p = parse_params(&params).map_err(|e| Failure::Config(e.to_string()))?;
            let r = predict(formula, &p).map_err(|e| Failure::Config(e.to_string()))?;
            println!("{} = {} = {}", r.formula, r.exact, r.value);
            Ok(())
        }
        Cmd::Account { scenario, format } => {
            let sc = Scenario::resolve(&scenario)?;
            let (m, _) = engine::run(&sc)?;
            let r = Report::new(&sc, &m);
            match format {
                Format::Text => print!("{}", r.text()),
                _ => println!("{}", serde_json::to_string_pretty(&r).expect("report serializes")),
            }
            Ok(())
        }
        Cmd::ListScenarios => {
            for name in BUNDLED {
                let sc = Scenario::resolve(name)?;
                println!("{name:<26}{}", sc.description);
            }
            Ok(())
        }
    }
}
