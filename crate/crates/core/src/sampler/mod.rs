//! Benchmark query generation by subgraph sampling.
//!
//! A query is grounded by picking a target entity and walking the
//! template's edges backwards from it, drawing a random in-edge at each
//! step. Answers, negatives and hard negatives all come from the exact
//! oracle in [`oracle`].

mod oracle;

use std::collections::HashSet;
use std::io::{self, BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use oracle::{evaluate_query, relaxed_answers};

use crate::kg::{EdgeSplit, EntityId, KnowledgeGraph, RelationId, TypeId};
use crate::query::{QueryEdge, QueryGraph, QueryNode, QuerySample, Slot, Structure, Template};
use crate::util::derive_seed;

pub const DEFAULT_MAX_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("no {structure} subgraph found after {retries} attempts")]
    Exhausted { structure: Structure, retries: usize },
    #[error("every entity of the answer type is an answer; no negative available")]
    NoNegative,
    #[error("hard negatives need a query with an intersection")]
    NoIntersection,
    #[error("cannot sample from an empty graph")]
    EmptyGraph,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{message}; achieved counts: {}", format_counts(.achieved))]
    Generation { message: String, achieved: Vec<(Structure, usize)> },
}

fn format_counts(counts: &[(Structure, usize)]) -> String {
    counts.iter().map(|(s, n)| format!("{s}={n}")).collect::<Vec<_>>().join(", ")
}

/// Uniform draw from the entities of type `ty` that are not in `answers`
/// (sorted).
fn pick_negative<R: Rng>(
    g: &KnowledgeGraph,
    answers: &[EntityId],
    ty: TypeId,
    rng: &mut R,
) -> Result<EntityId, SampleError> {
    let pool = g.entities_of_type(ty);
    let excluded = pool.iter().filter(|e| answers.binary_search(e).is_ok()).count();
    let available = pool.len() - excluded;
    if available == 0 {
        return Err(SampleError::NoNegative);
    }
    if excluded * 2 <= pool.len() {
        loop {
            let e = pool[rng.gen_range(0..pool.len())];
            if answers.binary_search(&e).is_err() {
                return Ok(e);
            }
        }
    }
    let k = rng.gen_range(0..available);
    Ok(pool.iter().copied().filter(|e| answers.binary_search(e).is_err()).nth(k).expect("k < available"))
}

fn target_type(q: &QueryGraph) -> Option<TypeId> {
    match q.nodes.get(q.target)? {
        QueryNode::Variable { var_type } => Some(*var_type),
        QueryNode::Constant { .. } => None,
    }
}

/// Uniform over same-type entities that do not answer `q`.
pub fn sample_negative<R: Rng>(
    g: &KnowledgeGraph,
    q: &QueryGraph,
    answer: EntityId,
    rng: &mut R,
) -> Result<EntityId, SampleError> {
    let answers = evaluate_query(g, q);
    pick_negative(g, &answers, g.type_of(answer), rng)
}

fn pick_hard_negative<R: Rng>(
    g: &KnowledgeGraph,
    q: &QueryGraph,
    answers: &[EntityId],
    rng: &mut R,
) -> Result<Option<EntityId>, SampleError> {
    let relaxed = relaxed_answers(g, q).ok_or(SampleError::NoIntersection)?;
    let ty = target_type(q);
    let pool: Vec<EntityId> =
        relaxed.into_iter().filter(|e| answers.binary_search(e).is_err() && Some(g.type_of(*e)) == ty).collect();
    if pool.is_empty() {
        return Ok(None);
    }
    Ok(Some(pool[rng.gen_range(0..pool.len())]))
}

/// Uniform over entities that satisfy the query once its intersection is
/// relaxed to a disjunction, but not the query itself. `None` when no such
/// entity exists.
pub fn sample_hard_negative<R: Rng>(
    g: &KnowledgeGraph,
    q: &QueryGraph,
    _answer: EntityId,
    rng: &mut R,
) -> Result<Option<EntityId>, SampleError> {
    let answers = evaluate_query(g, q);
    pick_hard_negative(g, q, &answers, rng)
}

/// Draws groundings of query templates from one graph.
pub struct QuerySampler<'g> {
    graph: &'g KnowledgeGraph,
    max_retries: usize,
    /// Entities with enough in-edges to be the target, per in-degree.
    eligible: Vec<Vec<EntityId>>,
}

impl<'g> QuerySampler<'g> {
    pub fn new(graph: &'g KnowledgeGraph) -> Self {
        let eligible = (0..=3)
            .map(|k| {
                (0..graph.entity_count()).map(EntityId::from).filter(|&e| graph.in_degree(e) >= k.max(1)).collect()
            })
            .collect();
        QuerySampler { graph, max_retries: DEFAULT_MAX_RETRIES, eligible }
    }

    pub fn with_max_retries(mut self, retries: usize) -> Self {
        self.max_retries = retries;
        self
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        self.graph
    }

    fn ground<R: Rng>(&self, tpl: &Template, rng: &mut R) -> Option<(Vec<EntityId>, Vec<RelationId>)> {
        let g = self.graph;
        let target_in = tpl.edges.iter().filter(|(_, d)| *d == tpl.target).count();
        let pool = &self.eligible[target_in.min(3)];
        if pool.is_empty() {
            return None;
        }
        let mut bound: Vec<Option<EntityId>> = vec![None; tpl.node_count()];
        let mut relations = vec![RelationId(0); tpl.edge_count()];
        bound[tpl.target] = Some(pool[rng.gen_range(0..pool.len())]);
        let mut stack = vec![tpl.target];
        while let Some(slot) = stack.pop() {
            let incoming: Vec<usize> = (0..tpl.edge_count()).filter(|&i| tpl.edges[i].1 == slot).collect();
            if incoming.is_empty() {
                continue;
            }
            let entity = bound[slot].expect("bound before expansion");
            let degree = g.in_degree(entity);
            if degree < incoming.len() {
                return None;
            }
            let picks = rand::seq::index::sample(rng, degree, incoming.len());
            for (edge, pick) in incoming.into_iter().zip(picks.iter()) {
                let (r, src) = g.in_edge_at(entity, pick);
                relations[edge] = r;
                let src_slot = tpl.edges[edge].0;
                bound[src_slot] = Some(src);
                stack.push(src_slot);
            }
        }
        Some((bound.into_iter().map(|b| b.expect("every slot reached")).collect(), relations))
    }

    /// One sample of `structure` using `rng`, with up to `max_retries`
    /// grounding attempts.
    pub fn sample_with<R: Rng>(&self, structure: Structure, rng: &mut R) -> Result<QuerySample, SampleError> {
        let g = self.graph;
        if g.entity_count() == 0 || g.triples().is_empty() {
            return Err(SampleError::EmptyGraph);
        }
        let tpl = structure.template();
        for _ in 0..self.max_retries {
            let Some((entities, relations)) = self.ground(&tpl, rng) else {
                continue;
            };
            let query = QueryGraph {
                nodes: tpl
                    .slots
                    .iter()
                    .zip(&entities)
                    .map(|(slot, &e)| match slot {
                        Slot::Anchor => QueryNode::Constant { entity: e },
                        _ => QueryNode::Variable { var_type: g.type_of(e) },
                    })
                    .collect(),
                edges: tpl
                    .edges
                    .iter()
                    .zip(&relations)
                    .map(|(&(src, dst), &relation)| QueryEdge { src, relation, dst })
                    .collect(),
                target: tpl.target,
            };
            let answer = entities[tpl.target];
            let answers = evaluate_query(g, &query);
            debug_assert!(answers.binary_search(&answer).is_ok());
            let negative = match pick_negative(g, &answers, g.type_of(answer), rng) {
                Ok(n) => n,
                Err(SampleError::NoNegative) => continue,
                Err(e) => return Err(e),
            };
            let hard_negative =
                if structure.has_intersection() { pick_hard_negative(g, &query, &answers, rng)? } else { None };
            return Ok(QuerySample { structure, query, answer, negative, hard_negative });
        }
        Err(SampleError::Exhausted { structure, retries: self.max_retries })
    }

    pub fn sample(&self, structure: Structure, seed: u64) -> Result<QuerySample, SampleError> {
        self.sample_with(structure, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Samples one query of `structure` from `g`; deterministic in `rng_seed`.
pub fn sample_query(g: &KnowledgeGraph, structure: Structure, rng_seed: u64) -> Result<QuerySample, SampleError> {
    QuerySampler::new(g).sample(structure, rng_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, valid or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryDataset {
    pub split: Split,
    pub samples: Vec<QuerySample>,
    pub source_seed: u64,
}

impl QueryDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample counts in [`Structure::ALL`] order.
    pub fn counts(&self) -> Vec<(Structure, usize)> {
        Structure::ALL.iter().map(|&s| (s, self.samples.iter().filter(|x| x.structure == s).count())).collect()
    }

    pub fn filtered(&self, keep: impl Fn(Structure) -> bool) -> QueryDataset {
        QueryDataset {
            split: self.split,
            samples: self.samples.iter().filter(|s| keep(s.structure)).cloned().collect(),
            source_seed: self.source_seed,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for s in &self.samples {
            writeln!(w, "{}", s.to_json_line())?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, split: Split, source_seed: u64) -> io::Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s = QuerySample::from_json_line(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
            samples.push(s);
        }
        Ok(QueryDataset { split, samples, source_seed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: QueryDataset,
    pub valid: QueryDataset,
    pub test: QueryDataset,
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub structures: Vec<Structure>,
    pub max_retries: usize,
    /// Budget of evaluation candidates drawn per accepted sample before
    /// generation gives up.
    pub eval_attempts_per_sample: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            structures: Structure::ALL.to_vec(),
            max_retries: DEFAULT_MAX_RETRIES,
            eval_attempts_per_sample: 1000,
        }
    }
}

/// Splits `total` as evenly as possible over `parts`, earlier parts taking
/// the remainder.
pub fn allocate(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Generates train, validation and test query sets.
///
/// Training queries are grounded in `split.train_graph`. Evaluation queries
/// are grounded in `full` and kept only when their answer cannot be derived
/// from the training graph alone, so each one depends on at least one
/// removed edge. Evaluation samples are deduplicated, shuffled and split
/// 1:10 into validation and test.
pub fn build_datasets(
    full: &KnowledgeGraph,
    split: &EdgeSplit,
    n_train: usize,
    n_eval: usize,
    seed: u64,
    config: &GenerationConfig,
) -> Result<Datasets, SampleError> {
    if n_eval < 11 {
        return Err(SampleError::Argument(format!("n_eval must be at least 11, got {n_eval}")));
    }
    if config.structures.is_empty() {
        return Err(SampleError::Argument("no query structures requested".into()));
    }
    let structures = &config.structures;
    let train_sampler = QuerySampler::new(&split.train_graph).with_max_retries(config.max_retries);
    let full_sampler = QuerySampler::new(full).with_max_retries(config.max_retries);

    let jobs: Vec<(Structure, usize)> = structures
        .iter()
        .zip(allocate(n_train, structures.len()))
        .flat_map(|(&s, quota)| (0..quota).map(move |i| (s, i)))
        .collect();
    let train: Vec<QuerySample> = jobs
        .par_iter()
        .map(|&(s, i)| train_sampler.sample(s, derive_seed(seed, &[0, s.index() as u64, i as u64])))
        .collect::<Result<_, _>>()?;

    let eval_quotas = allocate(n_eval, structures.len());
    let per_structure: Vec<(Structure, Vec<QuerySample>)> = structures
        .par_iter()
        .zip(eval_quotas.par_iter())
        .map(|(&s, &quota)| {
            let mut seen = HashSet::new();
            let mut accepted = Vec::with_capacity(quota);
            let budget = quota.saturating_mul(config.eval_attempts_per_sample).max(config.eval_attempts_per_sample);
            for attempt in 0..budget {
                if accepted.len() == quota {
                    break;
                }
                let sample = match full_sampler.sample(s, derive_seed(seed, &[1, s.index() as u64, attempt as u64])) {
                    Ok(x) => x,
                    Err(SampleError::Exhausted { .. }) => continue,
                    Err(e) => return Err(e),
                };
                if evaluate_query(&split.train_graph, &sample.query).binary_search(&sample.answer).is_ok() {
                    continue;
                }
                if seen.insert(sample.to_json_line()) {
                    accepted.push(sample);
                }
            }
            Ok((s, accepted))
        })
        .collect::<Result<_, SampleError>>()?;

    let achieved: Vec<(Structure, usize)> = per_structure.iter().map(|(s, v)| (*s, v.len())).collect();
    if achieved.iter().zip(&eval_quotas).any(|((_, got), want)| got < want) {
        return Err(SampleError::Generation {
            message: format!("could not reach {n_eval} evaluation queries relying on removed edges"),
            achieved,
        });
    }

    let mut eval: Vec<QuerySample> = per_structure.into_iter().flat_map(|(_, v)| v).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    rand::seq::SliceRandom::shuffle(eval.as_mut_slice(), &mut rng);
    let n_valid = n_eval / 11;
    let test = eval.split_off(n_valid);
    let mut valid = eval;
    let order = |a: &QuerySample, b: &QuerySample| a.structure.cmp(&b.structure);
    valid.sort_by(order);
    let mut test = test;
    test.sort_by(order);

    Ok(Datasets {
        train: QueryDataset { split: Split::Train, samples: train, source_seed: seed },
        valid: QueryDataset { split: Split::Valid, samples: valid, source_seed: seed },
        test: QueryDataset { split: Split::Test, samples: test, source_seed: seed },
    })
}
