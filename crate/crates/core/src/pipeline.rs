//! File-based experiment stages. Each stage reads a directory written by
//! the previous one and writes its outputs plus a `manifest.json` recording
//! the configuration, seeds, input and output digests and the upstream
//! manifest.
//!
//! Directory layout:
//!
//! | stage     | outputs                                                                          |
//! |-----------|----------------------------------------------------------------------------------|
//! | prepare   | `graph.tsv`, `types.tsv`, `train.tsv`, `removed.tsv`, `stats.json`               |
//! | sample    | `graph.tsv`, `types.tsv`, `removed.tsv`, `train.jsonl`, `valid.jsonl`, `test.jsonl` |
//! | train     | `model.ckpt`, `train_state.ckpt`, `train_report.json`                            |
//! | eval      | `eval_report.json`, `eval_report.txt`                                            |
//! | sweep     | `depth_sweep.json`, `depth_sweep.csv`                                            |
//! | export    | the TSV at `--out` and `<out>.manifest.json`                                     |

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, ModelCheckpoint, Vocabulary};
use crate::encoder::EncodeError;
use crate::eval::{evaluate_model, sweep_depth, EvalError, EvalOptions};
use crate::kg::{EdgeSplit, GraphError, GraphStats, KnowledgeGraph};
use crate::numerics::NumericsError;
use crate::query::Structure;
use crate::sampler::{build_datasets, GenerationConfig, QueryDataset, SampleError, Split};
use crate::trainer::{TrainConfig, TrainError, TrainState, Trainer};
use crate::util::{derive_seed, sha256_hex};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    /// Process exit code: 2 for bad arguments or configuration (including a
    /// checkpoint whose vocabulary does not match the data), 4 for numeric
    /// failures, 3 for everything data-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_)
            | Error::Graph(GraphError::Argument(_))
            | Error::Sample(SampleError::Argument(_))
            | Error::Train(TrainError::Config(_))
            | Error::Checkpoint(CheckpointError::Vocabulary(_))
            | Error::Train(TrainError::Checkpoint(CheckpointError::Vocabulary(_))) => 2,
            Error::Eval(EvalError::Config(_)) => 2,
            Error::Train(TrainError::Numerics(_))
            | Error::Train(TrainError::Encode(EncodeError::Numerics(_)))
            | Error::Eval(EvalError::Encode(EncodeError::Numerics(_))) => 4,
            _ => 3,
        }
    }
}

impl From<NumericsError> for Error {
    fn from(e: NumericsError) -> Self {
        Error::Train(TrainError::Numerics(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(io_err(path))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn now_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upstream {
    pub manifest_sha256: String,
    pub output_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Digest over the sorted `(name, digest)` output pairs.
    pub output_hash: String,
    pub upstream: Option<Upstream>,
    pub started_at: u64,
    pub finished_at: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, Error> {
        serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    upstream: Option<Upstream>,
    started_at: u64,
}

impl ManifestBuilder {
    fn new(command: &str, config: serde_json::Value) -> Self {
        ManifestBuilder {
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            upstream: None,
            started_at: now_seconds(),
        }
    }

    fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    fn input(&mut self, path: &Path) -> Result<(), Error> {
        self.inputs.insert(path.display().to_string(), sha256_hex(&read_bytes(path)?));
        Ok(())
    }

    /// Records the manifest in `dir`, if one exists, as upstream.
    fn upstream_from(&mut self, dir: &Path) -> Result<(), Error> {
        let path = dir.join(MANIFEST);
        if path.exists() {
            let bytes = read_bytes(&path)?;
            let m: RunManifest =
                serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            self.upstream = Some(Upstream { manifest_sha256: sha256_hex(&bytes), output_hash: m.output_hash });
        }
        Ok(())
    }

    fn finish(self, outputs: &[(&str, &Path)], manifest_path: &Path) -> Result<RunManifest, Error> {
        let mut digests = BTreeMap::new();
        for (name, path) in outputs {
            digests.insert(name.to_string(), sha256_hex(&read_bytes(path)?));
        }
        let listing: String = digests.iter().map(|(k, v)| format!("{k} {v}\n")).collect();
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            output_hash: sha256_hex(listing.as_bytes()),
            outputs: digests,
            upstream: self.upstream,
            started_at: self.started_at,
            finished_at: now_seconds(),
        };
        write_atomic(manifest_path, &to_json_bytes(&m))?;
        Ok(m)
    }
}

fn load_graph_files(triples: &Path, types: &Path) -> Result<KnowledgeGraph, Error> {
    let t = File::open(triples).map_err(io_err(triples))?;
    let y = File::open(types).map_err(io_err(types))?;
    Ok(KnowledgeGraph::read(
        BufReader::new(t),
        &triples.display().to_string(),
        BufReader::new(y),
        &types.display().to_string(),
    )?)
}

fn graph_bytes(g: &KnowledgeGraph) -> (Vec<u8>, Vec<u8>) {
    let mut triples = Vec::new();
    g.write_triples(&mut triples).expect("writing to memory");
    let mut types = Vec::new();
    g.write_types(&mut types).expect("writing to memory");
    (triples, types)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareArgs {
    pub triples: PathBuf,
    pub types: PathBuf,
    pub fraction: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub full: GraphStats,
    pub train: GraphStats,
    pub removed_edges: usize,
    pub removal_fraction: f64,
    pub seed: u64,
}

/// Normalizes the input graph, removes a random fraction of its edges and
/// writes both graphs.
pub fn prepare(args: &PrepareArgs) -> Result<PrepareStats, Error> {
    let mut manifest =
        ManifestBuilder::new("prepare", serde_json::to_value(args).expect("serializable")).seed("split", args.seed);
    manifest.input(&args.triples)?;
    manifest.input(&args.types)?;
    let raw = load_graph_files(&args.triples, &args.types)?;
    // Re-read the canonical listing so that ids match every later stage.
    let (triples, types) = graph_bytes(&raw);
    let g = KnowledgeGraph::read(triples.as_slice(), "graph.tsv", types.as_slice(), "types.tsv")?;
    let split = g.remove_edges(args.fraction, args.seed)?;

    ensure_dir(&args.out_dir)?;
    let out = |name: &str| args.out_dir.join(name);
    write_atomic(&out("graph.tsv"), &triples)?;
    write_atomic(&out("types.tsv"), &types)?;
    let mut train = Vec::new();
    split.train_graph.write_triples(&mut train).expect("writing to memory");
    write_atomic(&out("train.tsv"), &train)?;
    let mut removed = Vec::new();
    g.write_triple_list(&mut removed, &split.removed).expect("writing to memory");
    write_atomic(&out("removed.tsv"), &removed)?;
    let stats = PrepareStats {
        full: g.stats(),
        train: split.train_graph.stats(),
        removed_edges: split.removed.len(),
        removal_fraction: args.fraction,
        seed: args.seed,
    };
    write_atomic(&out("stats.json"), &to_json_bytes(&stats))?;
    let names = ["graph.tsv", "types.tsv", "train.tsv", "removed.tsv", "stats.json"];
    let paths: Vec<PathBuf> = names.iter().map(|n| out(n)).collect();
    let outputs: Vec<(&str, &Path)> = names.iter().copied().zip(paths.iter().map(PathBuf::as_path)).collect();
    manifest.finish(&outputs, &out(MANIFEST))?;
    Ok(stats)
}

/// The full graph and edge split stored in a `prepare` or `sample`
/// directory.
pub fn load_split(dir: &Path) -> Result<(KnowledgeGraph, EdgeSplit), Error> {
    let g = load_graph_files(&dir.join("graph.tsv"), &dir.join("types.tsv"))?;
    let removed_path = dir.join("removed.tsv");
    let f = File::open(&removed_path).map_err(io_err(&removed_path))?;
    let removed = g.read_triple_list(BufReader::new(f), &removed_path.display().to_string())?;
    let train_graph = g.without(&removed)?;
    let (fraction, seed) = match fs::read(dir.join("stats.json")) {
        Ok(bytes) => {
            let s: PrepareStats =
                serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("stats.json: {e}")))?;
            (s.removal_fraction, s.seed)
        }
        Err(_) => (removed.len() as f64 / g.triples().len().max(1) as f64, 0),
    };
    Ok((g, EdgeSplit { train_graph, removed, removal_fraction: fraction, seed }))
}

/// Loads the full graph of a data directory.
pub fn load_data_graph(dir: &Path) -> Result<KnowledgeGraph, Error> {
    load_graph_files(&dir.join("graph.tsv"), &dir.join("types.tsv"))
}

pub fn load_dataset(dir: &Path, split: Split) -> Result<QueryDataset, Error> {
    let path = dir.join(format!("{}.jsonl", split.name()));
    let f = File::open(&path).map_err(io_err(&path))?;
    QueryDataset::read_jsonl(BufReader::new(f), split, 0).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleArgs {
    pub graph_dir: PathBuf,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub structures: Vec<Structure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub train: BTreeMap<String, usize>,
    pub valid: BTreeMap<String, usize>,
    pub test: BTreeMap<String, usize>,
}

fn counts(d: &QueryDataset) -> BTreeMap<String, usize> {
    d.counts().into_iter().filter(|&(_, n)| n > 0).map(|(s, n)| (s.name().to_string(), n)).collect()
}

/// Generates query datasets from a `prepare` directory.
pub fn sample(args: &SampleArgs) -> Result<SampleCounts, Error> {
    let mut manifest =
        ManifestBuilder::new("sample", serde_json::to_value(args).expect("serializable")).seed("sample", args.seed);
    let (g, split) = load_split(&args.graph_dir)?;
    for name in ["graph.tsv", "types.tsv", "removed.tsv"] {
        manifest.input(&args.graph_dir.join(name))?;
    }
    manifest.upstream_from(&args.graph_dir)?;
    let config = GenerationConfig { structures: args.structures.clone(), ..GenerationConfig::default() };
    let data = build_datasets(&g, &split, args.n_train, args.n_eval, args.seed, &config)?;

    ensure_dir(&args.out_dir)?;
    let out = |name: &str| args.out_dir.join(name);
    for name in ["graph.tsv", "types.tsv", "removed.tsv"] {
        write_atomic(&out(name), &read_bytes(&args.graph_dir.join(name))?)?;
    }
    for d in [&data.train, &data.valid, &data.test] {
        let mut bytes = Vec::new();
        d.write_jsonl(&mut bytes).expect("writing to memory");
        write_atomic(&out(&format!("{}.jsonl", d.split.name())), &bytes)?;
    }
    let counts = SampleCounts { train: counts(&data.train), valid: counts(&data.valid), test: counts(&data.test) };
    manifest.config["counts"] = serde_json::to_value(&counts).expect("serializable");
    let names = ["graph.tsv", "types.tsv", "removed.tsv", "train.jsonl", "valid.jsonl", "test.jsonl"];
    let paths: Vec<PathBuf> = names.iter().map(|n| out(n)).collect();
    let outputs: Vec<(&str, &Path)> = names.iter().copied().zip(paths.iter().map(PathBuf::as_path)).collect();
    manifest.finish(&outputs, &out(MANIFEST))?;
    Ok(counts)
}

/// Reads a flat key-value training configuration (TOML, or JSON when the
/// file ends in `.json`). Missing keys take their defaults.
pub fn load_train_config(path: &Path) -> Result<TrainConfig, Error> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub config: TrainConfig,
    /// Continue from `train_state.ckpt` in the output directory.
    pub resume: bool,
    /// Stop after this many epochs in this invocation; the saved state can
    /// be resumed later.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub finished: bool,
}

pub const STATE_FILE: &str = "train_state.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "train_report.json";

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), Error> {
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).map_err(io_err(path))?;
    write_atomic(path, &bytes)
}

/// Trains on a `sample` directory, checkpointing the full training state
/// after every epoch.
pub fn train(args: &TrainArgs) -> Result<TrainOutcome, Error> {
    let mut manifest =
        ManifestBuilder::new("train", serde_json::to_value(args).expect("serializable")).seed("init", args.config.seed);
    let g = load_data_graph(&args.data_dir)?;
    for name in ["graph.tsv", "types.tsv", "train.jsonl", "valid.jsonl"] {
        manifest.input(&args.data_dir.join(name))?;
    }
    manifest.upstream_from(&args.data_dir)?;
    let train_set = load_dataset(&args.data_dir, Split::Train)?;
    let valid_set = load_dataset(&args.data_dir, Split::Valid)?;
    ensure_dir(&args.out_dir)?;
    let state_path = args.out_dir.join(STATE_FILE);

    let state = if args.resume && state_path.exists() {
        let state = TrainState::from_checkpoint(&Checkpoint::load(&state_path)?)?;
        if state.config != args.config {
            return Err(Error::Argument(format!(
                "{} was written with a different configuration",
                state_path.display()
            )));
        }
        state.vocabulary.check(&g)?;
        state
    } else {
        TrainState::new(args.config.clone(), Vocabulary::of(&g))?
    };
    let mut trainer = Trainer::resume(state, &train_set, &valid_set)?;
    let mut epochs_run = 0;
    while args.stop_after.is_none_or(|n| epochs_run < n) {
        if trainer.run_epoch()?.is_none() {
            break;
        }
        epochs_run += 1;
        save_checkpoint(&trainer.state().to_checkpoint(), &state_path)?;
    }
    let state = trainer.into_state();
    let finished = state.is_finished();
    if finished {
        save_checkpoint(&state.to_checkpoint(), &state_path)?;
        let model_path = args.out_dir.join(MODEL_FILE);
        save_checkpoint(&state.model().to_checkpoint(), &model_path)?;
        let report_path = args.out_dir.join(REPORT_FILE);
        write_atomic(&report_path, &to_json_bytes(&state.report))?;
        manifest.finish(
            &[(MODEL_FILE, &model_path), (STATE_FILE, &state_path), (REPORT_FILE, &report_path)],
            &args.out_dir.join(MANIFEST),
        )?;
    }
    Ok(TrainOutcome { state, finished })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub split: Split,
    pub out_dir: PathBuf,
    pub options: EvalOptions,
}

pub fn evaluate(args: &EvalArgs) -> Result<crate::eval::EvalReport, Error> {
    let mut manifest = ManifestBuilder::new("eval", serde_json::to_value(args).expect("serializable"));
    if args.split == Split::Train {
        log::warn!("evaluating on the training split");
    }
    manifest.input(&args.checkpoint)?;
    let dataset_path = args.data_dir.join(format!("{}.jsonl", args.split.name()));
    manifest.input(&dataset_path)?;
    if let Some(parent) = args.checkpoint.parent() {
        manifest.upstream_from(parent)?;
    }
    let model = ModelCheckpoint::load(&args.checkpoint)?;
    let g = load_data_graph(&args.data_dir)?;
    model.vocabulary.check(&g)?;
    let dataset = load_dataset(&args.data_dir, args.split)?;
    let report = evaluate_model(model.encoder, &model.params, &dataset, &g, args.options)?;

    ensure_dir(&args.out_dir)?;
    let json_path = args.out_dir.join("eval_report.json");
    let txt_path = args.out_dir.join("eval_report.txt");
    write_atomic(&json_path, &to_json_bytes(&report))?;
    write_atomic(&txt_path, report.to_table().as_bytes())?;
    manifest
        .finish(&[("eval_report.json", &json_path), ("eval_report.txt", &txt_path)], &args.out_dir.join(MANIFEST))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    pub data_dir: PathBuf,
    pub depths: Vec<usize>,
    pub out_dir: PathBuf,
    pub config: TrainConfig,
}

pub fn sweep(args: &SweepArgs) -> Result<crate::eval::DepthSweep, Error> {
    let mut manifest = ManifestBuilder::new("sweep-depth", serde_json::to_value(args).expect("serializable"))
        .seed("init", args.config.seed);
    for name in ["graph.tsv", "types.tsv", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        manifest.input(&args.data_dir.join(name))?;
    }
    manifest.upstream_from(&args.data_dir)?;
    let g = load_data_graph(&args.data_dir)?;
    let train_set = load_dataset(&args.data_dir, Split::Train)?;
    let valid_set = load_dataset(&args.data_dir, Split::Valid)?;
    let test_set = load_dataset(&args.data_dir, Split::Test)?;
    let result = sweep_depth(&g, &train_set, &valid_set, &test_set, &args.config, &args.depths)?;

    ensure_dir(&args.out_dir)?;
    let json_path = args.out_dir.join("depth_sweep.json");
    let csv_path = args.out_dir.join("depth_sweep.csv");
    write_atomic(&json_path, &to_json_bytes(&result))?;
    write_atomic(&csv_path, result.to_csv().as_bytes())?;
    manifest
        .finish(&[("depth_sweep.json", &json_path), ("depth_sweep.csv", &csv_path)], &args.out_dir.join(MANIFEST))?;
    Ok(result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportArgs {
    pub checkpoint: PathBuf,
    /// `entity\ttype` listing in entity-id order, as written by `prepare`.
    pub types: PathBuf,
    pub per_type: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes `label\ttype\tv1..vd` rows: up to `per_type` randomly chosen
/// entities of every type, in type then entity order.
pub fn export_embeddings(args: &ExportArgs) -> Result<usize, Error> {
    let mut manifest = ManifestBuilder::new("export-embeddings", serde_json::to_value(args).expect("serializable"))
        .seed("export", args.seed);
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.types)?;
    if let Some(parent) = args.checkpoint.parent() {
        manifest.upstream_from(parent)?;
    }
    let model = ModelCheckpoint::load(&args.checkpoint)?;
    let text = String::from_utf8(read_bytes(&args.types)?)
        .map_err(|e| Error::Data(format!("{}: {e}", args.types.display())))?;
    let mut rows: Vec<(&str, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split('\t').collect::<Vec<_>>()[..] {
            [e, t] => rows.push((e, t)),
            _ => return Err(Error::Data(format!("{}:{}: expected `entity<TAB>type`", args.types.display(), i + 1))),
        }
    }
    if Vocabulary::typing_digest_of(rows.iter().copied()) != model.vocabulary.typing_digest {
        return Err(CheckpointError::Vocabulary(format!(
            "{} does not list the model's entities in id order; pass the types.tsv written by prepare",
            args.types.display()
        ))
        .into());
    }
    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut type_order: Vec<&str> = Vec::new();
    for (i, &(_, t)) in rows.iter().enumerate() {
        if !by_type.contains_key(t) {
            type_order.push(t);
        }
        by_type.entry(t).or_default().push(i);
    }
    let mut out = String::new();
    let mut written = 0;
    for (k, t) in type_order.iter().enumerate() {
        let members = &by_type[t];
        let chosen: Vec<usize> = if members.len() <= args.per_type {
            members.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, &[k as u64]));
            let mut idx = rand::seq::index::sample(&mut rng, members.len(), args.per_type).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| members[i]).collect()
        };
        for e in chosen {
            out.push_str(rows[e].0);
            out.push('\t');
            out.push_str(t);
            for v in model.params.entity.value.row(e) {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
            written += 1;
        }
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_atomic(&args.out, out.as_bytes())?;
    let manifest_path = PathBuf::from(format!("{}.manifest.json", args.out.display()));
    let name = args.out.file_name().map_or_else(|| "embeddings.tsv".into(), |n| n.to_string_lossy().to_string());
    manifest.finish(&[(&name, &args.out)], &manifest_path)?;
    Ok(written)
}

/// Writes bytes to a file, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
