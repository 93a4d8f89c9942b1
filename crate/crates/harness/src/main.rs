use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedllm_core::checkpoint::load_adapters;
use fedllm_core::fedipr::{verify, Verdict, WatermarkKey, DEFAULT_THRESHOLD};
use fedllm_harness::corpus::{generate_corpus, write_corpus, DatasetSpec};
use fedllm_harness::error::{HarnessError, Result};
use fedllm_harness::report::{load_report, paper_rows, render_comm};
use fedllm_harness::{run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedllm", version, about = "Desk-scale federated fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the metric and communication tables of a run directory.
    Report {
        dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Print the communication table for the published 6B-scale sizes instead.
        #[arg(long, conflicts_with = "dir")]
        paper: bool,
    },
    /// Check a watermark key against an adapter checkpoint. Exit 0 if owned, 1 if not.
    VerifyWatermark {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Generate the synthetic corpus for a dataset spec as JSON lines.
    GenCorpus {
        spec: PathBuf,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?.with_env_seed()?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let outcome = run_experiment(&cfg)?;
            print!("{}", load_report(&outcome.dir)?.render());
            println!("\nartifacts in {}", outcome.dir.display());
        }
        Command::Report { dir, json, paper } => {
            if paper {
                let rows = paper_rows();
                if json {
                    println!("{}", serde_json::to_string_pretty(&rows).expect("plain data"));
                } else {
                    print!("{}", render_comm(&rows));
                }
                return Ok(ExitCode::SUCCESS);
            }
            let dir = dir.ok_or_else(|| HarnessError::Config("report needs a run directory or --paper".into()))?;
            let report = load_report(&dir)?;
            if json {
                print!("{}", report.to_json());
            } else {
                print!("{}", report.render());
            }
        }
        Command::VerifyWatermark { ckpt, key, threshold } => {
            let adapters = load_adapters(&ckpt)?;
            let text = std::fs::read_to_string(&key).map_err(|e| HarnessError::io(&key, e))?;
            let key = WatermarkKey::from_json(&text)?;
            let report = verify(&adapters, &key, threshold)?;
            println!(
                "client {}: detection rate {:.4} ({}/{} bits), threshold {}: {}",
                report.client_id,
                report.detection_rate,
                report.agreements,
                report.n_bits,
                report.threshold,
                if report.verdict == Verdict::Owned { "owned" } else { "not owned" }
            );
            println!("{}", serde_json::to_string(&report).expect("plain data"));
            if report.verdict != Verdict::Owned {
                return Ok(ExitCode::from(1));
            }
        }
        Command::GenCorpus { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| HarnessError::io(&spec, e))?;
            let spec: DatasetSpec =
                serde_json::from_str(&text).map_err(|e| HarnessError::json(spec.display().to_string(), e))?;
            for name in write_corpus(&generate_corpus(&spec)?, &out)? {
                println!("{}", out.join(name).display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
