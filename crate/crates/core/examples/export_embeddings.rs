//! Export sampled entity embeddings with their type labels as TSV, the
//! input format of the clustering plot.
//!
//! ```text
//! cargo run --release --example train_and_evaluate
//! cargo run --release --example export_embeddings -- [BENCHMARK_DIR] [PER_TYPE]
//! ```

use std::path::PathBuf;

use mpqe::pipeline::{self, ExportArgs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let root =
        args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mpqe-examples").join("benchmark"));
    let per_type: usize = args.next().map_or(Ok(50), |a| a.parse())?;
    let out = root.join("embeddings.tsv");
    let rows = pipeline::export_embeddings(&ExportArgs {
        checkpoint: root.join("run").join(pipeline::MODEL_FILE),
        types: root.join("prepared").join("types.tsv"),
        per_type,
        seed: 0,
        out: out.clone(),
    })?;
    let text = std::fs::read_to_string(&out)?;
    let mut per_label = std::collections::BTreeMap::new();
    for line in text.lines() {
        let ty = line.split('\t').nth(1).unwrap_or_default();
        *per_label.entry(ty.to_string()).or_insert(0usize) += 1;
    }
    let columns = text.lines().next().map_or(0, |l| l.split('\t').count());
    println!("{rows} rows of {columns} columns written to {}", out.display());
    for (ty, n) in per_label {
        println!("  {ty:<10} {n}");
    }
    Ok(())
}
