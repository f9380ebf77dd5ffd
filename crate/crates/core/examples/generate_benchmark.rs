//! Build a query benchmark from a knowledge graph: hold out 10% of the edges,
//! then sample training queries from the remaining graph and validation and
//! test queries that each depend on at least one held-out edge.
//!
//! ```text
//! cargo run --release --example generate_benchmark -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use mpqe::pipeline::{self, PrepareArgs, SampleArgs};
use mpqe::query::Structure;
use mpqe::sampler::Split;
use mpqe::synthetic::community_graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mpqe-examples").join("benchmark"));
    let raw = root.join("raw");
    std::fs::create_dir_all(&raw)?;
    let g = community_graph(4, 100, 5, 8, 4, 0.9, 1);
    g.write_triples(std::fs::File::create(raw.join("triples.tsv"))?)?;
    g.write_types(std::fs::File::create(raw.join("types.tsv"))?)?;

    let stats = pipeline::prepare(&PrepareArgs {
        triples: raw.join("triples.tsv"),
        types: raw.join("types.tsv"),
        fraction: 0.1,
        seed: 0,
        out_dir: root.join("prepared"),
    })?;
    println!("{}", serde_json::to_string_pretty(&stats)?);

    let counts = pipeline::sample(&SampleArgs {
        graph_dir: root.join("prepared"),
        n_train: 28000,
        n_eval: 3300,
        seed: 0,
        out_dir: root.join("queries"),
        structures: Structure::ALL.to_vec(),
    })?;
    println!("{:<14} {:>6} {:>6} {:>6}", "structure", "train", "valid", "test");
    for s in Structure::ALL {
        let n = |m: &std::collections::BTreeMap<String, usize>| m.get(s.name()).copied().unwrap_or(0);
        println!("{:<14} {:>6} {:>6} {:>6}", s.name(), n(&counts.train), n(&counts.valid), n(&counts.test));
    }

    // Every test query must fail on the training graph for its answer.
    let (full, split) = pipeline::load_split(&root.join("queries"))?;
    let test = pipeline::load_dataset(&root.join("queries"), Split::Test)?;
    let unseen = test
        .samples
        .iter()
        .filter(|s| mpqe::sampler::evaluate_query(&split.train_graph, &s.query).binary_search(&s.answer).is_err())
        .count();
    println!("{unseen}/{} test answers need a held-out edge ({} entities)", test.len(), full.entity_count());
    println!("wrote {}", root.display());
    Ok(())
}
