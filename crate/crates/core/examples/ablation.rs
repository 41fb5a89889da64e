//! Paired λ_OT and fusion-mode runs on the default synthetic task.
//!
//! `cargo run --release -p avalign-core --example ablation [seeds] [epochs] [peak_lr]`

use std::time::Instant;

use avalign::fusion::FusionMode;
use avalign::harness::{train_with, ExperimentConfig, Persistence};

fn main() -> avalign::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    for seed in 0..seeds {
        let arms = [
            (FusionMode::Ot, 0.0, false),
            (FusionMode::Ot, 0.3, false),
            (FusionMode::Ot, 0.3, true),
            (FusionMode::Cross, 0.3, false),
        ];
        for (fusion, lambda_ot, renorm) in arms {
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            cfg.dataset.seed = seed;
            cfg.fusion = fusion;
            cfg.weights.lambda_ot = lambda_ot;
            cfg.renormalize_rows = renorm;
            cfg.schedule.total_epochs = epochs;
            cfg.schedule.peak_lr = lr;
            let t = Instant::now();
            let out = train_with(&cfg, Persistence::None)?;
            println!(
                "seed={seed} fusion={:<5} λ_OT={lambda_ot:.1} renorm={renorm:<5}  align {:.3} -> {:.3}  tok {:.3} -> {:.3}  ot {:.3} ce {:.3}  ({:.1?})",
                fusion.as_str(),
                out.initial_metrics.alignment_accuracy,
                out.metrics.alignment_accuracy,
                out.initial_metrics.token_accuracy,
                out.metrics.token_accuracy,
                out.metrics.mean_ot_loss,
                out.metrics.mean_ce_loss,
                t.elapsed()
            );
        }
    }
    Ok(())
}
