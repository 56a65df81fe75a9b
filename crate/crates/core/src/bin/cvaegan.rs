use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use cvaegan::data::write_synthetic_dataset;
use cvaegan::gradcheck::run_suite;
use cvaegan::harness::{evaluate_cmd, generate_cmd, train_classifier_cmd, train_stage1, train_stage2, TrainConfig};
use cvaegan::metrics::ClassifierTraining;
use cvaegan::data::DEFAULT_CROP_RATIO;

#[derive(Parser)]
#[command(name = "cvaegan", version, about = "Two-stage text-to-image generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled synthetic shape dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1344)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the stage-1 sketch model.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the stage-2 refiner on top of a frozen stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
    },
    /// Generate images from an embedding file.
    Generate {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute FID and IS on the held-out classes.
    Evaluate {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the evaluation classifier on every class of a dataset.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 resolution; the classifier sees images four times larger.
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> cvaegan::Result<bool> {
    match cli.command {
        Command::SynthData { out, n, size, seed } => {
            write_synthetic_dataset(&out, n, size, seed)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::TrainStage1 { config } => {
            let outcome = train_stage1(&TrainConfig::load(&config)?)?;
            println!("{}", outcome.checkpoint.display());
        }
        Command::TrainStage2 { config, stage1 } => {
            let outcome = train_stage2(&TrainConfig::load(&config)?, Some(&stage1))?;
            println!("{}", outcome.checkpoint.display());
        }
        Command::Generate {
            stage1,
            stage2,
            emb,
            n,
            seed,
            out,
        } => {
            for path in generate_cmd(&stage1, &stage2, &emb, n, seed, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate {
            stage1,
            stage2,
            data,
            classifier,
            n,
            seed,
        } => {
            let report = evaluate_cmd(&stage1, &stage2, &data, &classifier, n, seed)?;
            println!("{}", report.to_json());
        }
        Command::TrainClassifier {
            data,
            size,
            epochs,
            seed,
            out,
        } => {
            let opts = ClassifierTraining {
                epochs,
                seed,
                ..Default::default()
            };
            let outcome = train_classifier_cmd(&data, size, DEFAULT_CROP_RATIO, &opts, &out)?;
            println!("accuracy {:.4} -> {}", outcome.accuracy, outcome.checkpoint.display());
        }
        Command::Gradcheck { seeds } => {
            let start = Instant::now();
            let mut ok = true;
            for r in run_suite(seeds)? {
                let pass = r.report.passed(&r.config);
                ok &= pass;
                println!(
                    "{} seed={} {} max_rel={:.3e} checked={} kinks={}",
                    if pass { "PASS" } else { "FAIL" },
                    r.seed,
                    r.name,
                    r.report.max_rel_error,
                    r.report.checked,
                    r.report.kinks
                );
                if let (false, Some(w)) = (pass, &r.report.worst) {
                    println!(
                        "    worst {}[{}] analytic={:.6e} numeric={:.6e}",
                        w.tensor, w.index, w.analytic, w.numeric
                    );
                }
            }
            println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
