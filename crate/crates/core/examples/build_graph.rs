//! Load a typed knowledge graph (or generate one), print its statistics and
//! adjacency, hold out edges and write the result as TSV.
//!
//! ```text
//! cargo run --example build_graph -- [TRIPLES TYPES] [--out DIR]
//! ```

use std::path::PathBuf;

use mpqe::kg::{load_graph, Direction, KnowledgeGraph};
use mpqe::synthetic::random_typed_graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let out = match args.iter().position(|a| a == "--out") {
        Some(i) => {
            let dir = PathBuf::from(args.remove(i + 1));
            args.remove(i);
            dir
        }
        None => std::env::temp_dir().join("mpqe-examples").join("graph"),
    };
    let g: KnowledgeGraph = match &args[..] {
        [triples, types] => load_graph(triples, types)?,
        _ => random_typed_graph(200, 4, 6, 1200, 11),
    };

    let stats = g.stats();
    println!(
        "{} entities, {} types, {} relations, {} triples",
        stats.entities, stats.entity_types, stats.relation_types, stats.triples
    );
    for t in 0..g.type_count() {
        let t = mpqe::kg::TypeId::from(t);
        println!("  type {:<12} {} entities", g.type_label(t), g.entities_of_type(t).len());
    }

    let e = mpqe::kg::EntityId::from(0usize);
    println!("edges of {}:", g.entity_label(e));
    for (r, o) in g.edges(e, Direction::Out) {
        println!("  -{}-> {}", g.relation_label(r), g.entity_label(o));
    }
    for (r, s) in g.edges(e, Direction::In) {
        println!("  <-{}- {}", g.relation_label(r), g.entity_label(s));
    }

    let split = g.remove_edges(0.1, 0)?;
    println!("held out {} edges; training graph keeps {}", split.removed.len(), split.train_graph.triples().len());

    std::fs::create_dir_all(&out)?;
    g.write_triples(std::fs::File::create(out.join("triples.tsv"))?)?;
    g.write_types(std::fs::File::create(out.join("types.tsv"))?)?;
    println!("wrote {}", out.display());
    Ok(())
}
