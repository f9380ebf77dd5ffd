//! Fit every aggregator to one-hop queries on a ten-entity graph with
//! full-batch Adam, then score the training queries.

use mpqe::checkpoint::Vocabulary;
use mpqe::encoder::{init_params, AggregatorKind};
use mpqe::eval::{evaluate_model, EvalOptions};
use mpqe::numerics::{AdamConfig, AdamState};
use mpqe::query::{QuerySample, Structure};
use mpqe::sampler::{QueryDataset, QuerySampler, Split};
use mpqe::synthetic::ten_entity_graph;
use mpqe::trainer::{batch_loss, train_step, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = ten_entity_graph();
    let sampler = QuerySampler::new(&g);
    let samples: Vec<QuerySample> =
        (0..64).map(|seed| sampler.sample(Structure::OneChain, seed)).collect::<Result<_, _>>()?;
    let batch: Vec<&QuerySample> = samples.iter().collect();
    let dataset = QueryDataset { split: Split::Train, samples: samples.clone(), source_seed: 0 };

    for aggregator in AggregatorKind::ALL {
        let config = TrainConfig { dim: 16, aggregator, ..TrainConfig::default() };
        let encoder = config.encoder();
        let mut params = init_params(config.shape(&Vocabulary::of(&g)), 3);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let initial = batch_loss(&encoder, &params, &batch, true)?.loss;
        for _ in 0..200 {
            train_step(&encoder, &mut params, &mut adam, &batch, true)?;
        }
        let fitted = batch_loss(&encoder, &params, &batch, true)?;
        let report = evaluate_model(encoder, &params, &dataset, &g, EvalOptions::default())?;
        println!(
            "{:<5} loss {initial:.4} -> {:.2e}  active hinges {:>2}  AUC {:.3}",
            aggregator.to_string(),
            fitted.loss,
            fitted.active,
            report.macro_auc
        );
    }
    Ok(())
}
