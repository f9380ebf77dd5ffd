//! Train through the file-based pipeline and evaluate on queries that need
//! held-out edges. With `--link-pred-only` the model sees only one-hop
//! queries during training and is evaluated on all seven structures.
//!
//! Also shows checkpoint resumption: training stops after two epochs, is
//! resumed from the saved state and runs to completion.
//!
//! ```text
//! cargo run --release --example generate_benchmark
//! cargo run --release --example train_and_evaluate -- [--link-pred-only] [BENCHMARK_DIR]
//! ```

use std::path::PathBuf;

use mpqe::eval::EvalOptions;
use mpqe::pipeline::{self, EvalArgs, TrainArgs};
use mpqe::sampler::Split;
use mpqe::trainer::{Curriculum, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let link_pred_only = args.iter().any(|a| a == "--link-pred-only");
    let root = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mpqe-examples").join("benchmark"));
    let data_dir = root.join("queries");
    if !data_dir.join("train.jsonl").exists() {
        return Err(format!("{} has no queries; run the generate_benchmark example first", data_dir.display()).into());
    }

    let config = TrainConfig {
        dim: 32,
        batch_size: 64,
        max_epochs: 30,
        curriculum: if link_pred_only { Curriculum::LinkPredOnly } else { Curriculum::LinkPredThenAll },
        seed: 1,
        ..TrainConfig::default()
    };
    let out_dir = root.join(if link_pred_only { "run-link-pred" } else { "run" });
    let _ = std::fs::remove_file(out_dir.join(pipeline::STATE_FILE));
    let mut train =
        TrainArgs { data_dir: data_dir.clone(), out_dir: out_dir.clone(), config, resume: false, stop_after: Some(2) };
    let first = pipeline::train(&train)?;
    println!("paused after {} epochs", first.state.report.epochs().count());
    train.resume = true;
    train.stop_after = None;
    let done = pipeline::train(&train)?;
    for phase in &done.state.report.phases {
        println!(
            "phase {:?}: {} epochs, best validation AUC {:.3} at epoch {}",
            phase.phase,
            phase.epochs.len(),
            phase.best_valid_auc,
            phase.best_epoch
        );
    }

    let report = pipeline::evaluate(&EvalArgs {
        checkpoint: out_dir.join(pipeline::MODEL_FILE),
        data_dir,
        split: Split::Test,
        out_dir: out_dir.join("eval"),
        options: EvalOptions::default(),
    })?;
    print!("{}", report.to_table());
    Ok(())
}
