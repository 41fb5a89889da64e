use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avalign::harness::{
    evaluate_detailed, generate_dataset, load_checkpoint, read_dataset, read_fmat, run_gradcheck_suite, train,
    write_dataset, write_fmat, ExperimentConfig, CONFIG_COPY,
};
use avalign::sinkhorn::{sinkhorn_solve, SimilarityMatrix, SinkhornConfig};
use avalign::{Error, Result};

/// Entropic optimal-transport alignment toolkit.
#[derive(Parser, Debug)]
#[command(name = "avalign", version)]
struct Cli {
    /// Overrides the seed of whatever the subcommand randomizes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset described by a config's `[dataset]` table.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing metrics logs and checkpoints under the config's `output_dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split of a generated dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Forward settings; defaults to the config copy stored with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score every sample instead of the held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Solve one entropic transport problem for a similarity matrix stored as FMAT.
    SinkhornSolve {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = SinkhornConfig::default().tolerance)]
        tolerance: f64,
        #[arg(long, default_value_t = SinkhornConfig::default().max_iters)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite on the tiny model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors; help and version are not errors at all
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { spec, out } => {
            let mut cfg = ExperimentConfig::load(&spec)?;
            if let Some(seed) = cli.seed {
                cfg.dataset.seed = seed;
            }
            let data = generate_dataset(&cfg.dataset)?;
            write_dataset(&out, &data)?;
            println!(
                "wrote {} samples ({} held out) to {}",
                data.samples.len(),
                data.heldout_split().len(),
                out.display()
            );
        }
        Command::Train { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let outcome = train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&outcome.metrics).expect("metrics serialize"));
            eprintln!("{} batches, checkpoint {}", outcome.batches, outcome.final_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            all,
        } => {
            // evaluation is deterministic; the seed is accepted for interface uniformity
            let _ = cli.seed;
            let cfg = eval_config(&checkpoint, config.as_deref())?;
            let loaded = load_checkpoint(&checkpoint, Some(&cfg.hash()))?;
            for w in &loaded.warnings {
                eprintln!("warning: {w}");
            }
            let dataset = read_dataset(&data)?;
            let model = loaded.state.spec;
            let ds = &dataset.spec;
            if (ds.audio_dim, ds.visual_dim, ds.n_latent_tokens, ds.vocab_size, ds.caption_len)
                != (model.audio_dim, model.visual_dim, model.audio_tokens, model.vocab_size, model.caption_len)
            {
                return Err(Error::Argument(format!(
                    "dataset {} does not match the checkpoint's model dimensions",
                    data.display()
                )));
            }
            let samples = if all { &dataset.samples[..] } else { dataset.heldout_split() };
            let (metrics, diag) = evaluate_detailed(&loaded.state, samples, &cfg.forward_config())?;
            println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
            eprintln!(
                "{} samples, {} unconverged solves, worst residual {:.3e}",
                samples.len(),
                diag.unconverged,
                diag.worst_residual
            );
        }
        Command::SinkhornSolve {
            matrix,
            epsilon,
            tolerance,
            max_iters,
            out,
        } => {
            let _ = cli.seed;
            let cfg = SinkhornConfig {
                epsilon,
                tolerance,
                max_iters,
            };
            cfg.validate()?;
            let s = read_fmat(&matrix)?;
            let result = sinkhorn_solve(&SimilarityMatrix(s), &cfg)?;
            write_fmat(&out, result.plan.matrix())?;
            println!(
                "iterations={} residual={:e} converged={}",
                result.iterations, result.residual, result.converged
            );
        }
        Command::Gradcheck { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let suite = run_gradcheck_suite(cfg.seed, &cfg.sinkhorn, cfg.weights.tau, cfg.renormalize_rows)?;
            for r in &suite.reports {
                let tag = if r.passes(suite.tolerance) { "ok" } else { "FAIL" };
                println!("{tag:<4} {:<48} max rel error {:.3e}", r.name, r.max_rel_error);
            }
            let failed = suite.failures().count();
            println!(
                "{} checks, {failed} failed, worst {:.3e} (tolerance {:e})",
                suite.reports.len(),
                suite.worst(),
                suite.tolerance
            );
            if failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<ExperimentConfig> {
    if let Some(path) = explicit {
        return ExperimentConfig::load(path);
    }
    let stored = checkpoint.join(CONFIG_COPY);
    if stored.exists() {
        ExperimentConfig::load(&stored)
    } else {
        eprintln!("warning: no {CONFIG_COPY} in {}, using default forward settings", checkpoint.display());
        Ok(ExperimentConfig::default())
    }
}
