//! `dics` — train, evaluate, and sweep the domain-invariant class-specific
//! model on synthetic or CSV multi-domain datasets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dics_core::config::TrainConfig;
use dics_core::data::{generate, load_csv, save_csv, SyntheticSpec};
use dics_core::gradcheck::run_gradient_suite;
use dics_core::sweep::{sweep_ablation, sweep_queue, ABLATION_GRID, QUEUE_MULTIPLES};
use dics_core::train::{evaluate, load_checkpoint, resolve_results_dir, train_run};
use dics_core::{DicsError, Result};

#[derive(Parser)]
#[command(
    name = "dics",
    about = "Domain-invariant, class-specific representation learning on desk-scale benchmarks",
    version
)]
struct Cli {
    /// Results directory (overrides DICS_RESULTS_DIR; default ./results).
    #[arg(long, global = true)]
    results_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as CSV plus a metadata sidecar.
    GenerateData {
        /// Config file (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline overrides, e.g. --set data.num_classes=4.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model with leave-one-domain-out evaluation.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on one domain of a CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: usize,
    },
    /// Grid of (alpha, beta) runs; includes the (0, 0) baseline row.
    SweepAblation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Seeds per cell (base seed, base seed + 1, ...).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Queue-length sweep under a fixed seed.
    SweepQueue {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Queue capacities as multiples of the batch size.
        #[arg(long, value_delimiter = ',', default_values_t = QUEUE_MULTIPLES)]
        multiples: Vec<usize>,
    },
    /// Run the full gradient-check suite and print max errors per loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<TrainConfig> {
    let mut config = match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    config.apply_overrides(overrides)?;
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<bool> {
    let results_dir = resolve_results_dir(cli.results_dir);
    match cli.command {
        Command::GenerateData { config, set, out } => {
            let config = load_config(config.as_ref(), &set)?;
            let spec = match &config.data {
                dics_core::config::DataConfig::Synthetic(spec) => SyntheticSpec {
                    target_domain: config.target_domain,
                    seed: config.data_seed.unwrap_or(config.seed),
                    ..spec.clone()
                },
                dics_core::config::DataConfig::Csv { .. } => {
                    return Err(DicsError::InvalidConfig(
                        "generate-data needs data.source = synthetic".into(),
                    ))
                }
            };
            let dataset = generate(&spec)?;
            save_csv(&dataset, &out)?;
            println!(
                "wrote {} samples ({} domains x {} classes) to {}",
                dataset.len(),
                dataset.num_domains,
                dataset.num_classes,
                out.display()
            );
            println!("row counts per (domain, class):");
            for ((d, c), n) in dataset.counts_per_domain_class() {
                println!("  domain {d} class {c}: {n}");
            }
            Ok(true)
        }
        Command::Train { config, set } => {
            let config = load_config(config.as_ref(), &set)?;
            let artifacts = train_run(&config, Some(&results_dir))?;
            let report = &artifacts.report;
            for note in &report.notes {
                println!("note: {note}");
            }
            for record in &report.epochs {
                println!(
                    "epoch {:>3}  l_c {:.4}  l_di {:.4}  l_cs {:.4}  total {:.4}  val_acc {:.4}",
                    record.epoch,
                    record.losses.l_c,
                    record.losses.l_di,
                    record.losses.l_cs,
                    record.losses.total,
                    record.source_val_accuracy
                );
            }
            println!(
                "best source-val accuracy {:.4}; target-domain accuracy {:.4} ({:.1}s)",
                report.final_source_val_accuracy,
                report.target_accuracy,
                report.wall_clock_secs
            );
            println!("artifacts in {}", results_dir.display());
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data,
            domain,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let dataset = load_csv(&data)?;
            let accuracy = evaluate(&state, &dataset, domain)?;
            println!("domain {domain} accuracy: {accuracy:.4}");
            Ok(true)
        }
        Command::SweepAblation {
            config,
            set,
            seeds,
        } => {
            let config = load_config(config.as_ref(), &set)?;
            let table = sweep_ablation(&config, &ABLATION_GRID, seeds, Some(&results_dir))?;
            print!("{}", table.render_text());
            println!("table CSV in {}", results_dir.display());
            Ok(true)
        }
        Command::SweepQueue {
            config,
            set,
            multiples,
        } => {
            let config = load_config(config.as_ref(), &set)?;
            let table = sweep_queue(&config, &multiples, Some(&results_dir))?;
            print!("{}", table.render_text());
            println!("table CSV in {}", results_dir.display());
            Ok(true)
        }
        Command::Gradcheck { seed, instances } => {
            let reports = run_gradient_suite(seed, instances)?;
            let mut all_passed = true;
            for r in &reports {
                println!(
                    "{:<24} instances {:>3}  max rel error {:.3e}  tolerance {:.0e}  {}",
                    r.name,
                    r.instances,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed() { "pass" } else { "FAIL" }
                );
                all_passed &= r.passed();
            }
            Ok(all_passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
