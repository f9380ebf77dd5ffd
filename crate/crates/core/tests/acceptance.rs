//! Acceptance criteria. Each test writes one `[PASS]`/`[FAIL]` line to
//! stdout (bypassing the test harness's capture) before asserting.
//!
//! The AIFB criteria need the dataset and hours of CPU time. They are
//! ignored by default; run them with
//!
//! ```text
//! MPQE_AIFB_DIR=/path/to/aifb cargo test --release --test acceptance -- --ignored
//! ```
//!
//! where the directory holds `triples.tsv` (`subject<TAB>relation<TAB>object`)
//! and `types.tsv` (`entity<TAB>type`).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mpqe::checkpoint::{Checkpoint, Vocabulary};
use mpqe::encoder::{init_params, AggregatorKind};
use mpqe::eval::{auc, evaluate_model, percentile_rank, sweep_depth, EvalOptions, EvalReport};
use mpqe::kg::{EntityId, KnowledgeGraph};
use mpqe::numerics::{grad_check, AdamConfig, AdamState, Parameterized};
use mpqe::pipeline::{self, EvalArgs, PrepareArgs, SampleArgs, TrainArgs};
use mpqe::query::{QueryEdge, QueryGraph, QueryNode, QuerySample, Structure};
use mpqe::sampler::{allocate, evaluate_query, relaxed_answers, QueryDataset, QuerySampler, Split};
use mpqe::synthetic::{
    community_graph, five_entity_graph, held_in_dataset, layered_graph, random_typed_graph, ten_entity_graph,
};
use mpqe::trainer::{accumulate_gradients, batch_loss, loss_probe, train_step, Curriculum, TrainConfig};
use mpqe::util::derive_seed;

fn report(criterion: &str, passed: bool, detail: &str) {
    let mark = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{mark}] {criterion}: {detail}");
    let _ = out.flush();
    assert!(passed, "{criterion}: {detail}");
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// A query over `g` written as `(src, relation, dst)` node-index edges.
fn handmade(
    g: &KnowledgeGraph,
    structure: Structure,
    anchors: &[&str],
    var_types: &[&str],
    edges: &[(usize, &str, usize)],
    answer: &str,
    negative: &str,
) -> QuerySample {
    let type_id = |label: &str| {
        let t = g.type_labels().iter().position(|l| l == label).unwrap();
        mpqe::kg::TypeId::from(t)
    };
    let mut nodes: Vec<QueryNode> =
        anchors.iter().map(|a| QueryNode::Constant { entity: g.entity_id(a).unwrap() }).collect();
    nodes.extend(var_types.iter().map(|t| QueryNode::Variable { var_type: type_id(t) }));
    let query = QueryGraph {
        target: nodes.len() - 1,
        nodes,
        edges: edges.iter().map(|&(src, r, dst)| QueryEdge { src, relation: g.relation_id(r).unwrap(), dst }).collect(),
    };
    assert!(query.validate().is_ok());
    QuerySample {
        structure,
        query,
        answer: g.entity_id(answer).unwrap(),
        negative: g.entity_id(negative).unwrap(),
        hard_negative: structure.has_intersection().then(|| g.entity_id(negative).unwrap()),
    }
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let g = five_entity_graph();
    assert_eq!((g.entity_count(), g.type_count(), g.relation_count()), (5, 2, 2));
    let sampler = &QuerySampler::new(&g);
    let mut samples: Vec<QuerySample> =
        Structure::ALL.iter().flat_map(|&s| (0..3).filter_map(move |seed| sampler.sample(s, seed).ok())).collect();
    // Shapes the toy graph cannot ground still exercise the loss.
    samples.push(handmade(
        &g,
        Structure::ThreeChain,
        &["a"],
        &["person", "person", "thing"],
        &[(0, "knows", 1), (1, "knows", 2), (2, "likes", 3)],
        "x",
        "y",
    ));
    samples.push(handmade(
        &g,
        Structure::ThreeInter,
        &["a", "b", "c"],
        &["thing"],
        &[(0, "likes", 3), (1, "likes", 3), (2, "likes", 3)],
        "y",
        "x",
    ));
    samples.push(handmade(
        &g,
        Structure::ThreeChainInter,
        &["b", "c"],
        &["person", "thing"],
        &[(0, "knows", 2), (1, "knows", 2), (2, "likes", 3)],
        "x",
        "y",
    ));
    let covered: std::collections::BTreeSet<Structure> = samples.iter().map(|s| s.structure).collect();
    assert_eq!(covered.len(), 7);
    let batch: Vec<&QuerySample> = samples.iter().collect();

    let mut details = Vec::new();
    let mut passed = true;
    for aggregator in AggregatorKind::ALL {
        let config = TrainConfig { dim: 8, layers: 3, aggregator, ..TrainConfig::default() };
        let enc = config.encoder();
        let mut p = init_params(config.shape(&Vocabulary::of(&g)), 7);
        p.zero_grad();
        accumulate_gradients(&enc, &mut p, &batch, true).unwrap();
        let r = grad_check(&mut p, |m| loss_probe(&enc, m, &batch, true), 1e-5, 1e-4);
        passed &= r.passed() && r.max_rel_error < 1e-4 && r.checked > 0;
        details
            .push(format!("{aggregator} {:.1e} ({} coords, {} at kinks)", r.max_rel_error, r.checked, r.skipped_kinks));
    }
    let elapsed = start.elapsed();
    passed &= within(elapsed, 60);
    report(
        "gradient correctness",
        passed,
        &format!("max relative error {} < 1e-4; {:.1?}", details.join(", "), elapsed),
    );
}

/// Answers by exhaustive enumeration of typed variable assignments.
fn brute_force_answers(g: &KnowledgeGraph, q: &QueryGraph) -> Vec<EntityId> {
    fn extend(g: &KnowledgeGraph, q: &QueryGraph, values: &mut Vec<Option<EntityId>>, next: usize) -> bool {
        let consistent = q.edges.iter().all(|e| match (values[e.src], values[e.dst]) {
            (Some(s), Some(o)) => g.has_edge(s, e.relation, o),
            _ => true,
        });
        if !consistent {
            return false;
        }
        let Some(i) = (next..q.nodes.len()).find(|&i| values[i].is_none()) else {
            return true;
        };
        let QueryNode::Variable { var_type } = q.nodes[i] else { unreachable!() };
        for &e in g.entities_of_type(var_type) {
            values[i] = Some(e);
            if extend(g, q, values, i + 1) {
                values[i] = None;
                return true;
            }
        }
        values[i] = None;
        false
    }
    let QueryNode::Variable { var_type } = q.nodes[q.target] else { return Vec::new() };
    let mut answers = Vec::new();
    for &t in g.entities_of_type(var_type) {
        let mut values: Vec<Option<EntityId>> = q
            .nodes
            .iter()
            .map(|n| match *n {
                QueryNode::Constant { entity } => Some(entity),
                QueryNode::Variable { .. } => None,
            })
            .collect();
        values[q.target] = Some(t);
        if extend(g, q, &mut values, 0) {
            answers.push(t);
        }
    }
    answers.sort();
    answers
}

#[test]
fn oracle_soundness() {
    let start = Instant::now();
    let g = random_typed_graph(50, 3, 6, 260, 21);
    assert_eq!(g.entity_count(), 50);
    let sampler = QuerySampler::new(&g);
    let (mut total, mut answers_ok, mut negatives_ok, mut hard_total, mut hard_ok, mut oracle_agrees) =
        (0, 0, 0, 0, 0, 0);
    for (s, n) in Structure::ALL.into_iter().zip(allocate(5000, 7)) {
        for i in 0..n {
            let sample = sampler.sample(s, derive_seed(77, &[s.index() as u64, i as u64])).unwrap();
            let answers = evaluate_query(&g, &sample.query);
            total += 1;
            oracle_agrees += usize::from(answers == brute_force_answers(&g, &sample.query));
            answers_ok += usize::from(answers.binary_search(&sample.answer).is_ok());
            negatives_ok += usize::from(
                answers.binary_search(&sample.negative).is_err()
                    && g.type_of(sample.negative) == g.type_of(sample.answer),
            );
            if let Some(h) = sample.hard_negative {
                hard_total += 1;
                let relaxed = relaxed_answers(&g, &sample.query).unwrap();
                hard_ok += usize::from(answers.binary_search(&h).is_err() && relaxed.binary_search(&h).is_ok());
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = total == 5000
        && answers_ok == total
        && negatives_ok == total
        && hard_ok == hard_total
        && hard_total > 0
        && oracle_agrees == total
        && within(elapsed, 120);
    report(
        "oracle soundness",
        passed,
        &format!(
            "{answers_ok}/{total} answers, {negatives_ok}/{total} negatives, {hard_ok}/{hard_total} hard negatives confirmed; \
             oracle equals brute force on {oracle_agrees}/{total}; {elapsed:.1?}"
        ),
    );
}

#[test]
fn toy_fit() {
    let start = Instant::now();
    let g = ten_entity_graph();
    let sampler = QuerySampler::new(&g);
    let samples: Vec<QuerySample> = (0..64).map(|i| sampler.sample(Structure::OneChain, i).unwrap()).collect();
    let batch: Vec<&QuerySample> = samples.iter().collect();
    let dataset = QueryDataset { split: Split::Train, samples: samples.clone(), source_seed: 0 };
    let mut passed = true;
    let mut details = Vec::new();
    for aggregator in AggregatorKind::ALL {
        let config = TrainConfig { dim: 16, aggregator, ..TrainConfig::default() };
        let enc = config.encoder();
        let mut p = init_params(config.shape(&Vocabulary::of(&g)), 3);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let initial = batch_loss(&enc, &p, &batch, true).unwrap().loss;
        for _ in 0..200 {
            train_step(&enc, &mut p, &mut adam, &batch, true).unwrap();
        }
        let last = batch_loss(&enc, &p, &batch, true).unwrap().loss;
        let auc = evaluate_model(enc, &p, &dataset, &g, EvalOptions::default()).unwrap().macro_auc;
        passed &= last < 0.1 * initial && auc == 1.0;
        details.push(format!("{aggregator} loss {initial:.3}->{last:.3} AUC {auc:.3}"));
    }
    let elapsed = start.elapsed();
    passed &= within(elapsed, 60);
    report("toy fit", passed, &format!("{}; {elapsed:.1?}", details.join(", ")));
}

#[test]
fn metric_units() {
    let separated = auc(&[(0.9, 0.1), (0.5, 0.4), (1.0, -1.0)]).unwrap();
    let ties = auc(&[(0.3, 0.3), (0.7, 0.7)]).unwrap();
    let mixed = auc(&[(0.9, 0.1), (0.2, 0.4)]).unwrap();
    let top = percentile_rank(0.9, &[0.1, 0.2, 0.3, 0.4]).unwrap();
    let bottom = percentile_rank(0.0, &[0.1, 0.2, 0.3, 0.4]).unwrap();
    let three_of_four = percentile_rank(0.35, &[0.1, 0.2, 0.3, 0.4]).unwrap();
    let passed =
        separated == 1.0 && ties == 0.5 && mixed == 0.5 && top == 100.0 && bottom == 0.0 && three_of_four == 75.0;
    report(
        "metric units",
        passed,
        &format!("auc {separated}/{ties}/{mixed} (want 1/0.5/0.5), apr {top}/{bottom}/{three_of_four} (want 100/0/75)"),
    );
}

#[test]
fn depth_matches_diameter() {
    let start = Instant::now();
    // Layers joined by unions of random bijections: no local structure tells
    // entities apart, so a 3-chain answer depends on the anchor 3 hops away.
    let g = layered_graph(4, 60, 3, 1);
    let all = Structure::ALL;
    let train = held_in_dataset(&g, Split::Train, &all, 2000, 1).unwrap();
    let valid = held_in_dataset(&g, Split::Valid, &all, 50, 2).unwrap();
    let test = held_in_dataset(&g, Split::Test, &all, 300, 3).unwrap();
    let config = TrainConfig {
        dim: 32,
        batch_size: 32,
        max_epochs: 100,
        patience: 10,
        curriculum: Curriculum::All,
        aggregator: AggregatorKind::Tm,
        seed: 5,
        ..TrainConfig::default()
    };
    let sweep = sweep_depth(&g, &train, &valid, &test, &config, &[1, 2, 3, 4]).unwrap();
    let at = |d| sweep.auc(Structure::ThreeChain, d).unwrap();
    let (l2, l3, l4) = (at(2), at(3), at(4));
    let elapsed = start.elapsed();
    let passed = sweep.cells.len() == 28 && l3 - l2 >= 0.05 && l4 - l3 <= 0.03 && within(elapsed, 15 * 60);
    report(
        "depth-diameter property",
        passed,
        &format!(
            "3-chain AUC L1 {:.3} L2 {l2:.3} L3 {l3:.3} L4 {l4:.3}; L3-L2 {:+.3} (>= 0.05), L4-L3 {:+.3} (<= 0.03); {elapsed:.1?}",
            at(1),
            l3 - l2,
            l4 - l3
        ),
    );
}

fn run_pipeline(root: &Path) {
    let g = community_graph(3, 40, 4, 6, 3, 0.9, 1);
    let raw = root.join("raw");
    std::fs::create_dir_all(&raw).unwrap();
    g.write_triples(std::fs::File::create(raw.join("triples.tsv")).unwrap()).unwrap();
    g.write_types(std::fs::File::create(raw.join("types.tsv")).unwrap()).unwrap();
    pipeline::prepare(&PrepareArgs {
        triples: raw.join("triples.tsv"),
        types: raw.join("types.tsv"),
        fraction: 0.1,
        seed: 1,
        out_dir: root.join("prepared"),
    })
    .unwrap();
    pipeline::sample(&SampleArgs {
        graph_dir: root.join("prepared"),
        n_train: 1400,
        n_eval: 220,
        seed: 2,
        out_dir: root.join("queries"),
        structures: Structure::ALL.to_vec(),
    })
    .unwrap();
    pipeline::train(&TrainArgs {
        data_dir: root.join("queries"),
        out_dir: root.join("run"),
        config: TrainConfig { dim: 16, batch_size: 64, max_epochs: 3, seed: 3, ..TrainConfig::default() },
        resume: false,
        stop_after: None,
    })
    .unwrap();
    pipeline::evaluate(&EvalArgs {
        checkpoint: root.join("run").join(pipeline::MODEL_FILE),
        data_dir: root.join("queries"),
        split: Split::Test,
        out_dir: root.join("eval"),
        options: EvalOptions::default(),
    })
    .unwrap();
}

/// File bytes, with the accumulated wall-clock time removed from training
/// reports and training-state checkpoints.
fn comparable_bytes(path: &Path) -> Vec<u8> {
    let name = path.file_name().unwrap().to_string_lossy();
    if name == pipeline::REPORT_FILE {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("wall_clock_seconds");
        return serde_json::to_vec(&v).unwrap();
    }
    if name == pipeline::STATE_FILE {
        let mut ck = Checkpoint::load(path).unwrap();
        ck.meta["report"].as_object_mut().unwrap().remove("wall_clock_seconds");
        let mut out = Vec::new();
        ck.write_to(&mut out).unwrap();
        return out;
    }
    std::fs::read(path).unwrap()
}

#[test]
fn determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    let mut compared = 0;
    let mut differing = Vec::new();
    for stage in ["prepared", "queries", "run", "eval"] {
        let mut names: Vec<PathBuf> = std::fs::read_dir(a.path().join(stage))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap() != pipeline::MANIFEST)
            .collect();
        names.sort();
        for path in names {
            let other = b.path().join(stage).join(path.file_name().unwrap());
            compared += 1;
            if comparable_bytes(&path) != comparable_bytes(&other) {
                differing.push(format!("{stage}/{}", path.file_name().unwrap().to_string_lossy()));
            }
        }
    }
    report(
        "determinism",
        differing.is_empty() && compared >= 13,
        &format!(
            "{compared} data, checkpoint and report files compared across two runs; differing: {differing:?} \
             (manifest timestamps and wall-clock totals excluded)"
        ),
    );
}

fn aifb_dir() -> PathBuf {
    PathBuf::from(
        std::env::var("MPQE_AIFB_DIR").expect("set MPQE_AIFB_DIR to a directory with triples.tsv and types.tsv"),
    )
}

/// Prepared and sampled AIFB data (100k training queries, 11k evaluation
/// queries), built once per test process.
fn aifb_queries() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let src = aifb_dir();
        let work =
            std::env::var("MPQE_AIFB_WORK").map(PathBuf::from).unwrap_or_else(|_| tempfile::tempdir().unwrap().keep());
        let stats = pipeline::prepare(&PrepareArgs {
            triples: src.join("triples.tsv"),
            types: src.join("types.tsv"),
            fraction: 0.1,
            seed: 0,
            out_dir: work.join("prepared"),
        })
        .unwrap();
        let mut out = std::io::stdout().lock();
        let _ = writeln!(
            out,
            "AIFB: {} entities, {} types, {} relations, {} triples; {} removed",
            stats.full.entities,
            stats.full.entity_types,
            stats.full.relation_types,
            stats.full.triples,
            stats.removed_edges
        );
        pipeline::sample(&SampleArgs {
            graph_dir: work.join("prepared"),
            n_train: 100_000,
            n_eval: 11_000,
            seed: 0,
            out_dir: work.join("queries"),
            structures: Structure::ALL.to_vec(),
        })
        .unwrap();
        work.join("queries")
    })
}

fn aifb_train_and_eval(name: &str, curriculum: Curriculum) -> EvalReport {
    let data = aifb_queries();
    let out = data.parent().unwrap().join(name);
    pipeline::train(&TrainArgs {
        data_dir: data.to_path_buf(),
        out_dir: out.clone(),
        config: TrainConfig { curriculum, ..TrainConfig::default() },
        resume: true,
        stop_after: None,
    })
    .unwrap();
    pipeline::evaluate(&EvalArgs {
        checkpoint: out.join(pipeline::MODEL_FILE),
        data_dir: data.to_path_buf(),
        split: Split::Test,
        out_dir: out.join("eval"),
        options: EvalOptions::default(),
    })
    .unwrap()
}

#[test]
#[ignore = "needs the AIFB dataset in MPQE_AIFB_DIR and several CPU hours"]
fn aifb_reproduction() {
    let start = Instant::now();
    let r = aifb_train_and_eval("tm", Curriculum::LinkPredThenAll);
    let apr = r.macro_apr.unwrap_or(f64::NAN);
    let elapsed = start.elapsed();
    report(
        "AIFB desk-scale reproduction",
        r.macro_auc >= 0.78 && apr >= 80.0,
        &format!("macro AUC {:.3} (>= 0.78), APR {apr:.1} (>= 80); {elapsed:.1?}", r.macro_auc),
    );
}

#[test]
#[ignore = "needs the AIFB dataset in MPQE_AIFB_DIR and several CPU hours"]
fn aifb_generalization() {
    let start = Instant::now();
    let r = aifb_train_and_eval("tm-link-pred", Curriculum::LinkPredOnly);
    let inter: Vec<(Structure, f64)> =
        r.structures.iter().filter(|s| s.structure.has_intersection()).map(|s| (s.structure, s.auc)).collect();
    let elapsed = start.elapsed();
    report(
        "generalization from link prediction",
        r.macro_auc >= 0.68 && inter.len() == 4 && inter.iter().all(|&(_, a)| a > 0.55),
        &format!("macro AUC {:.3} (>= 0.68), intersections {inter:?} (each > 0.55); {elapsed:.1?}", r.macro_auc),
    );
}
