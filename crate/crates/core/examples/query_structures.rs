//! The seven query structures: their shapes and diameters, one sampled
//! instance of each with its exact answer set and negatives, and the JSON
//! line format used by the datasets.

use mpqe::query::{QueryNode, Structure};
use mpqe::sampler::{evaluate_query, QuerySampler};
use mpqe::synthetic::layered_graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = layered_graph(4, 40, 3, 3);
    let sampler = QuerySampler::new(&g);
    for s in Structure::ALL {
        let t = s.template();
        println!(
            "{:<14} nodes {} edges {} anchors {} diameter {}",
            s.name(),
            t.node_count(),
            t.edge_count(),
            t.anchor_count(),
            t.diameter()
        );
        let sample = match sampler.sample(s, 0) {
            Ok(sample) => sample,
            Err(e) => {
                println!("  not sampleable on this graph: {e}");
                continue;
            }
        };
        let q = &sample.query;
        for edge in &q.edges {
            let name = |i: usize| match q.nodes[i] {
                QueryNode::Constant { entity } => g.entity_label(entity).to_string(),
                QueryNode::Variable { var_type } if i == q.target => format!("?target:{}", g.type_label(var_type)),
                QueryNode::Variable { var_type } => format!("?v{i}:{}", g.type_label(var_type)),
            };
            println!("  {}({}, {})", g.relation_label(edge.relation), name(edge.src), name(edge.dst));
        }
        let answers = evaluate_query(&g, q);
        let labels: Vec<&str> = answers.iter().map(|&e| g.entity_label(e)).collect();
        println!("  answers  {labels:?}");
        println!("  positive {}", g.entity_label(sample.answer));
        println!("  negative {}", g.entity_label(sample.negative));
        if let Some(h) = sample.hard_negative {
            println!("  hard negative {} (satisfies some branches only)", g.entity_label(h));
        }
        println!("  {}", sample.to_json_line());
    }
    Ok(())
}
