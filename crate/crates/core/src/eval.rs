//! Ranking metrics and per-structure evaluation reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{AggregatorKind, EncodeError, Encoder, ModelParams};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::numerics::{dot, norm};
use crate::query::{QueryGraph, QuerySample, Structure};
use crate::sampler::{evaluate_query, QueryDataset};
use crate::trainer::{fit, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot compute {0} of an empty set")]
    Empty(&'static str),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("{0}")]
    Config(String),
}

/// Paired AUC: the fraction of `(positive, negative)` score pairs ranked
/// correctly, ties counting one half.
pub fn auc(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("auc"));
    }
    let total: f64 = pairs
        .iter()
        .map(|&(p, n)| {
            if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Percentile of `answer` among `pool`: `100 · (below + ties/2) / |pool|`.
/// `None` for an empty pool.
pub fn percentile_rank(answer: f64, pool: &[f64]) -> Option<f64> {
    if pool.is_empty() {
        return None;
    }
    let below = pool.iter().filter(|&&s| s < answer).count() as f64;
    let ties = pool.iter().filter(|&&s| s == answer).count() as f64;
    Some(100.0 * (below + 0.5 * ties) / pool.len() as f64)
}

/// Which negative the headline AUC of a structure compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadlineNegatives {
    /// Always the regular same-type negative.
    Regular,
    /// The hard negative when the sample has one, else the regular one.
    #[default]
    HardSubstituted,
}

impl std::str::FromStr for HeadlineNegatives {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(HeadlineNegatives::Regular),
            "hard-substituted" => Ok(HeadlineNegatives::HardSubstituted),
            _ => Err(format!("unknown negative mode `{s}` (expected regular or hard-substituted)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub headline: HeadlineNegatives,
    /// Compute average percentile ranks (needs a full candidate sweep per
    /// query).
    pub apr: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { headline: HeadlineNegatives::default(), apr: true }
    }
}

/// Scores candidate entities for queries.
pub trait Scorer: Sync {
    /// `candidates[i]` are scored against `queries[i]`.
    fn score_batch(&self, queries: &[&QueryGraph], candidates: &[Vec<EntityId>]) -> Result<Vec<Vec<f64>>, EvalError>;
}

/// Cosine scores of encoded queries against entity table rows. A zero
/// vector on either side scores 0.
pub struct ModelScorer<'a> {
    encoder: Encoder,
    params: &'a ModelParams,
    norms: Vec<f64>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(encoder: Encoder, params: &'a ModelParams) -> Self {
        let norms = (0..params.shape.entities).map(|e| norm(params.entity.value.row(e))).collect();
        ModelScorer { encoder, params, norms }
    }
}

impl Scorer for ModelScorer<'_> {
    fn score_batch(&self, queries: &[&QueryGraph], candidates: &[Vec<EntityId>]) -> Result<Vec<Vec<f64>>, EvalError> {
        let emb = self.encoder.encode_batch(queries, self.params)?;
        Ok(candidates
            .iter()
            .enumerate()
            .map(|(i, cands)| {
                let q = emb.row(i);
                let qn = norm(q);
                cands
                    .iter()
                    .map(|e| {
                        let en = self.norms[e.index()];
                        if qn == 0.0 || en == 0.0 {
                            0.0
                        } else {
                            (dot(q, self.params.entity.value.row(e.index())) / (qn * en)).clamp(-1.0, 1.0)
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

/// Scores 1 for exact answers and 0 otherwise.
pub struct OracleScorer<'g> {
    pub graph: &'g KnowledgeGraph,
}

impl Scorer for OracleScorer<'_> {
    fn score_batch(&self, queries: &[&QueryGraph], candidates: &[Vec<EntityId>]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(queries
            .iter()
            .zip(candidates)
            .map(|(q, cands)| {
                let answers = evaluate_query(self.graph, q);
                cands.iter().map(|e| if answers.binary_search(e).is_ok() { 1.0 } else { 0.0 }).collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub structure: Structure,
    pub n: usize,
    /// Headline AUC under the report's negative mode.
    pub auc: f64,
    pub regular_auc: f64,
    pub hard_auc: Option<f64>,
    pub hard_n: usize,
    /// Average percentile rank in `[0, 100]`; `None` when not computed or
    /// when every pool was empty.
    pub apr: Option<f64>,
    pub apr_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub structures: Vec<StructureReport>,
    pub macro_auc: f64,
    pub macro_apr: Option<f64>,
    /// Macro AUC over the chain structures present.
    pub chain_auc: Option<f64>,
}

struct SampleScores {
    structure: Structure,
    positive: f64,
    negative: f64,
    hard: Option<f64>,
    percentile: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

const CHUNK: usize = 256;

/// Evaluates `scorer` on every sample of `dataset`. APR pools are all
/// entities of the answer's type that are not exact answers over `g`.
pub fn evaluate(
    scorer: &dyn Scorer,
    dataset: &QueryDataset,
    g: &KnowledgeGraph,
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    for s in &dataset.samples {
        for e in [s.answer, s.negative].into_iter().chain(s.hard_negative) {
            if e.index() >= g.entity_count() {
                return Err(EvalError::Config(format!(
                    "sample refers to entity {} but the graph has {} entities",
                    e.index(),
                    g.entity_count()
                )));
            }
        }
    }
    evaluate_inner(scorer, dataset, options.apr.then_some(g), options)
}

/// AUC-only evaluation, which needs no graph.
pub fn evaluate_auc(
    scorer: &dyn Scorer,
    dataset: &QueryDataset,
    headline: HeadlineNegatives,
) -> Result<EvalReport, EvalError> {
    evaluate_inner(scorer, dataset, None, EvalOptions { headline, apr: false })
}

fn evaluate_inner(
    scorer: &dyn Scorer,
    dataset: &QueryDataset,
    apr_graph: Option<&KnowledgeGraph>,
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty("an evaluation report"));
    }
    let chunks: Vec<Vec<SampleScores>> = dataset
        .samples
        .par_chunks(CHUNK)
        .map(|chunk| score_chunk(scorer, chunk, apr_graph))
        .collect::<Result<_, _>>()?;
    let scores: Vec<SampleScores> = chunks.into_iter().flatten().collect();

    let mut structures = Vec::new();
    for s in Structure::ALL {
        let rows: Vec<&SampleScores> = scores.iter().filter(|x| x.structure == s).collect();
        if rows.is_empty() {
            continue;
        }
        let regular: Vec<(f64, f64)> = rows.iter().map(|x| (x.positive, x.negative)).collect();
        let hard: Vec<(f64, f64)> = rows.iter().filter_map(|x| x.hard.map(|h| (x.positive, h))).collect();
        let headline: Vec<(f64, f64)> = match options.headline {
            HeadlineNegatives::Regular => regular.clone(),
            HeadlineNegatives::HardSubstituted => {
                rows.iter().map(|x| (x.positive, x.hard.unwrap_or(x.negative))).collect()
            }
        };
        let percentiles: Vec<f64> = rows.iter().filter_map(|x| x.percentile).collect();
        structures.push(StructureReport {
            structure: s,
            n: rows.len(),
            auc: auc(&headline)?,
            regular_auc: auc(&regular)?,
            hard_auc: if hard.is_empty() { None } else { Some(auc(&hard)?) },
            hard_n: hard.len(),
            apr: mean(percentiles.iter().copied()),
            apr_n: percentiles.len(),
        });
    }
    let macro_auc = mean(structures.iter().map(|r| r.auc)).expect("non-empty dataset");
    let macro_apr = if options.apr {
        let aprs: Vec<f64> = structures.iter().filter_map(|r| r.apr).collect();
        mean(aprs.into_iter())
    } else {
        None
    };
    let chain_auc = mean(structures.iter().filter(|r| r.structure.is_chain()).map(|r| r.auc));
    Ok(EvalReport { options, structures, macro_auc, macro_apr, chain_auc })
}

fn score_chunk(
    scorer: &dyn Scorer,
    chunk: &[QuerySample],
    apr_graph: Option<&KnowledgeGraph>,
) -> Result<Vec<SampleScores>, EvalError> {
    let queries: Vec<&QueryGraph> = chunk.iter().map(|s| &s.query).collect();
    let mut pool_sizes = Vec::with_capacity(chunk.len());
    let candidates: Vec<Vec<EntityId>> = chunk
        .iter()
        .map(|s| {
            let mut c = vec![s.answer, s.negative];
            c.extend(s.hard_negative);
            if let Some(g) = apr_graph {
                let answers = evaluate_query(g, &s.query);
                let before = c.len();
                c.extend(g.entities_of_type(g.type_of(s.answer)).iter().filter(|e| answers.binary_search(e).is_err()));
                pool_sizes.push(c.len() - before);
            } else {
                pool_sizes.push(0);
            }
            c
        })
        .collect();
    let scores = scorer.score_batch(&queries, &candidates)?;
    Ok(chunk
        .iter()
        .zip(scores)
        .zip(pool_sizes)
        .map(|((s, sc), pool)| {
            let fixed = 2 + usize::from(s.hard_negative.is_some());
            SampleScores {
                structure: s.structure,
                positive: sc[0],
                negative: sc[1],
                hard: s.hard_negative.map(|_| sc[2]),
                percentile: apr_graph.and_then(|_| percentile_rank(sc[0], &sc[fixed..fixed + pool])),
            }
        })
        .collect())
}

/// Evaluates a trained model.
pub fn evaluate_model(
    encoder: Encoder,
    params: &ModelParams,
    dataset: &QueryDataset,
    g: &KnowledgeGraph,
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    evaluate(&ModelScorer::new(encoder, params), dataset, g, options)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

impl EvalReport {
    pub fn structure(&self, s: Structure) -> Option<&StructureReport> {
        self.structures.iter().find(|r| r.structure == s)
    }

    /// Aligned text table: one row per structure, a macro row, then a
    /// summary with AUC and APR and the chain-only versus all-structure
    /// AUC.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let opt = |x: Option<f64>, f: &dyn Fn(f64) -> String| x.map_or_else(|| "-".to_string(), f);
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>7} {:>11} {:>9} {:>7}",
            "structure", "n", "AUC", "regular AUC", "hard AUC", "APR"
        );
        for r in &self.structures {
            let _ = writeln!(
                out,
                "{:<14} {:>6} {:>7} {:>11} {:>9} {:>7}",
                r.structure.name(),
                r.n,
                pct(r.auc),
                pct(r.regular_auc),
                opt(r.hard_auc, &pct),
                opt(r.apr, &|a| format!("{a:.1}"))
            );
        }
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>7} {:>11} {:>9} {:>7}",
            "macro",
            self.structures.iter().map(|r| r.n).sum::<usize>(),
            pct(self.macro_auc),
            "",
            "",
            opt(self.macro_apr, &|a| format!("{a:.1}"))
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>7} {:>7}", "", "AUC", "APR", "ch", "all");
        let _ = writeln!(
            out,
            "{:<8} {:>7} {:>7} {:>7} {:>7}",
            "model",
            pct(self.macro_auc),
            opt(self.macro_apr, &|a| format!("{a:.1}")),
            opt(self.chain_auc, &pct),
            pct(self.macro_auc)
        );
        out
    }
}

/// AUC of one structure at one message-passing depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthCell {
    pub structure: Structure,
    pub depth: usize,
    pub auc: f64,
    /// Whether `depth` equals the structure's diameter.
    pub is_diameter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSweep {
    pub depths: Vec<usize>,
    pub cells: Vec<DepthCell>,
}

impl DepthSweep {
    pub fn auc(&self, structure: Structure, depth: usize) -> Option<f64> {
        self.cells.iter().find(|c| c.structure == structure && c.depth == depth).map(|c| c.auc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("structure,depth,auc,is_diameter\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{}", c.structure.name(), c.depth, c.auc, c.is_diameter);
        }
        out
    }
}

/// Trains one model per depth and reports per-structure AUC on `test`.
/// For the target-message aggregator the depth is forced on every query;
/// the other aggregators use that many layers.
pub fn sweep_depth(
    g: &KnowledgeGraph,
    train: &QueryDataset,
    valid: &QueryDataset,
    test: &QueryDataset,
    base: &TrainConfig,
    depths: &[usize],
) -> Result<DepthSweep, TrainError> {
    if depths.is_empty() || depths.contains(&0) {
        return Err(TrainError::Config("depths must be a non-empty list of positive integers".into()));
    }
    let mut per_depth = Vec::with_capacity(depths.len());
    for &depth in depths {
        let config = match base.aggregator {
            AggregatorKind::Tm => TrainConfig { fixed_depth: Some(depth), ..base.clone() },
            _ => TrainConfig { layers: depth, fixed_depth: None, ..base.clone() },
        };
        let (model, _) = fit(g, train, valid, &config)?;
        let report = evaluate_auc(&ModelScorer::new(model.encoder, &model.params), test, base.validation_negatives)?;
        log::info!("depth {depth}: macro auc {:.4}", report.macro_auc);
        per_depth.push(report);
    }
    let mut cells = Vec::new();
    for s in Structure::ALL {
        for (&depth, report) in depths.iter().zip(&per_depth) {
            if let Some(r) = report.structure(s) {
                cells.push(DepthCell {
                    structure: s,
                    depth,
                    auc: r.auc,
                    is_diameter: depth == s.template().diameter(),
                });
            }
        }
    }
    Ok(DepthSweep { depths: depths.to_vec(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_units() {
        assert_eq!(auc(&[(0.9, 0.1), (0.5, -0.5)]).unwrap(), 1.0);
        assert_eq!(auc(&[(0.3, 0.3), (0.0, 0.0)]).unwrap(), 0.5);
        assert_eq!(auc(&[(0.9, 0.1), (0.2, 0.4)]).unwrap(), 0.5);
        assert!(matches!(auc(&[]), Err(EvalError::Empty(_))));
    }

    #[test]
    fn percentile_units() {
        assert_eq!(percentile_rank(1.0, &[0.1, 0.2, 0.3]), Some(100.0));
        assert_eq!(percentile_rank(0.0, &[0.1, 0.2, 0.3]), Some(0.0));
        assert_eq!(percentile_rank(0.5, &[0.1, 0.2, 0.3, 0.9]), Some(75.0));
        assert_eq!(percentile_rank(0.5, &[0.5, 0.5]), Some(50.0));
        assert_eq!(percentile_rank(0.5, &[]), None);
    }

    #[test]
    fn headline_mode_parses() {
        assert_eq!("regular".parse::<HeadlineNegatives>().unwrap(), HeadlineNegatives::Regular);
        assert_eq!(serde_json::to_string(&HeadlineNegatives::HardSubstituted).unwrap(), "\"hard-substituted\"");
        assert!("both".parse::<HeadlineNegatives>().is_err());
    }
}
