//! CLI. Exit codes: 0 success, 2 config error, 3 runtime abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fdprivlab::config::ExperimentSpec;
use fdprivlab::experiment::run_experiment;
use fdprivlab::report::Report;
use fdprivlab::sweep::{run_sweep, SweepAxis};
use fdprivlab::HarnessError;

#[derive(Parser)]
#[command(
    name = "fdprivlab",
    version,
    about = "Federated distillation privacy lab: runs collaborative training with planted probes and reports what the server could infer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment from a JSON config.
    Run {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for report.json, roc_*.csv, trace.ndjson.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the same experiment once per value of one config knob.
    Sweep {
        /// Path to the base experiment config.
        #[arg(long)]
        config: PathBuf,
        /// One of: round_public_count, references, local_epochs, dp_sigma.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Parent directory for the per-value runs.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_spec(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentSpec, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("read {}: {e}", path.display())))?;
    let mut spec = ExperimentSpec::from_json(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn print_summary(report: &Report) {
    let f = &report.federation;
    match (f.round0_local_accuracy, f.final_accuracy) {
        (Some(local), Some(fin)) => println!(
            "federation: {} rounds, accuracy {:.4} (local-only) -> {:.4} (collaborative)",
            f.rounds, local, fin
        ),
        _ => println!("federation: {} rounds", f.rounds),
    }
    if let Some(ldia) = &report.ldia {
        println!(
            "ldia: mean kl {:.4} (random guess {:.4}), argmax accuracy {:.2}",
            ldia.mean_kl, ldia.baseline_mean_kl, ldia.argmax_accuracy
        );
    }
    for m in &report.membership {
        println!(
            "{}: auc {:.4}, tpr@1%fpr {:.4}, balanced accuracy {:.4} ({} verdicts)",
            m.attack, m.auc, m.tpr_at_1pct_fpr, m.best_balanced_accuracy, m.verdicts
        );
    }
    for e in &report.evasion {
        match (e.auc, e.tpr_at_1pct_fpr) {
            (Some(auc), Some(tpr)) => println!(
                "evasion/{} on client {}: auc {auc:.4}, tpr@1%fpr {tpr:.4}",
                e.mode, e.client
            ),
            _ => println!(
                "evasion/{} on client {}: not scorable ({} usable references)",
                e.mode,
                e.client,
                e.references.unwrap_or(0)
            ),
        }
    }
}

fn real_main() -> Result<(), HarnessError> {
    match Cli::parse().cmd {
        Cmd::Run { config, seed, out } => {
            let spec = load_spec(&config, seed)?;
            let report = run_experiment(&spec, &out)?;
            print_summary(&report);
            println!("wrote {}", out.join("report.json").display());
            Ok(())
        }
        Cmd::Sweep { config, axis, values, seed, out } => {
            let spec = load_spec(&config, seed)?;
            let axis: SweepAxis = axis.parse()?;
            let entries = run_sweep(&spec, axis, &values, &out)?;
            for e in &entries {
                let attacks: Vec<String> =
                    e.attacks.iter().map(|a| format!("{} auc {:.4}", a.attack, a.auc)).collect();
                println!(
                    "{}={}: accuracy {}, {}",
                    e.axis,
                    e.value,
                    e.final_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                    if attacks.is_empty() { "no attacks".into() } else { attacks.join(", ") }
                );
            }
            println!("wrote {}", out.join("sweep_summary.json").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
