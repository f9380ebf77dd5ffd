//! Compare analytic gradients of the margin loss against central finite
//! differences, for every aggregator, on all query structures sampleable
//! from a five-entity graph.
//!
//! ```text
//! cargo run --release --example gradient_check -- [DELTA]
//! ```

use mpqe::checkpoint::Vocabulary;
use mpqe::encoder::{init_params, AggregatorKind};
use mpqe::numerics::{grad_check, Parameterized};
use mpqe::query::{QuerySample, Structure};
use mpqe::sampler::QuerySampler;
use mpqe::synthetic::five_entity_graph;
use mpqe::trainer::{accumulate_gradients, loss_probe, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let delta: f64 = std::env::args().nth(1).map_or(Ok(1e-5), |a| a.parse())?;
    let g = five_entity_graph();
    let sampler = QuerySampler::new(&g);
    let mut samples = Vec::new();
    for s in Structure::ALL {
        for seed in 0..3 {
            match sampler.sample(s, seed) {
                Ok(sample) => samples.push(sample),
                Err(e) => {
                    println!("skipping {s}: {e}");
                    break;
                }
            }
        }
    }
    let batch: Vec<&QuerySample> = samples.iter().collect();
    println!("{} queries, delta {delta:e}, tolerance 1e-4", batch.len());

    for aggregator in AggregatorKind::ALL {
        let config = TrainConfig { dim: 8, layers: 3, aggregator, ..TrainConfig::default() };
        let encoder = config.encoder();
        let mut params = init_params(config.shape(&Vocabulary::of(&g)), 7);
        params.zero_grad();
        let stats = accumulate_gradients(&encoder, &mut params, &batch, true)?;
        let report = grad_check(&mut params, |p| loss_probe(&encoder, p, &batch, true), delta, 1e-4);
        println!(
            "{:<5} loss {:.4}  checked {:>5}  skipped at kinks {:>3}  max relative error {:.2e}  {}",
            aggregator.to_string(),
            stats.loss,
            report.checked,
            report.skipped_kinks,
            report.max_rel_error,
            if report.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
