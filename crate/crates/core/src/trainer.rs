//! Margin-loss training with a link-prediction-first curriculum and early
//! stopping on validation AUC.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{push_params, read_params, Checkpoint, CheckpointError, ModelCheckpoint, Vocabulary};
use crate::encoder::{init_params, AggregatorKind, EncodeError, Encoder, ModelParams, ModelShape};
use crate::eval::{evaluate_auc, EvalError, HeadlineNegatives, ModelScorer};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::numerics::{
    axpy, cosine_with_grad, norm, AdamConfig, AdamState, Matrix, NumericsError, Parameterized, Probe,
};
use crate::query::{QuerySample, Structure};
use crate::sampler::QueryDataset;
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Hinge on the score gap with margin 1.
pub fn margin_loss(s_pos: f64, s_neg: f64) -> f64 {
    (1.0 - s_pos + s_neg).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Curriculum {
    /// 1-chain queries until validation stalls, then every structure.
    LinkPredThenAll,
    All,
    LinkPredOnly,
}

impl std::str::FromStr for Curriculum {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "link-pred-then-all" => Ok(Curriculum::LinkPredThenAll),
            "all" => Ok(Curriculum::All),
            "link-pred-only" => Ok(Curriculum::LinkPredOnly),
            _ => Err(format!("unknown curriculum `{s}` (expected link-pred-then-all, all or link-pred-only)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    LinkPred,
    All,
}

impl Phase {
    pub fn structures(self) -> Vec<Structure> {
        match self {
            Phase::LinkPred => vec![Structure::OneChain],
            Phase::All => Structure::ALL.to_vec(),
        }
    }
}

impl Curriculum {
    pub fn phases(self) -> Vec<Phase> {
        match self {
            Curriculum::LinkPredThenAll => vec![Phase::LinkPred, Phase::All],
            Curriculum::All => vec![Phase::All],
            Curriculum::LinkPredOnly => vec![Phase::LinkPred],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub dim: usize,
    pub layers: usize,
    pub aggregator: AggregatorKind,
    /// Message-passing steps for the target-message aggregator; `None`
    /// uses each query's diameter.
    pub fixed_depth: Option<usize>,
    pub batch_size: usize,
    /// Epoch cap per curriculum phase.
    pub max_epochs: usize,
    pub patience: usize,
    pub curriculum: Curriculum,
    pub seed: u64,
    /// Add a second hinge term against the hard negative when present.
    pub hard_negatives: bool,
    /// Negative used by the validation AUC.
    pub validation_negatives: HeadlineNegatives,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            dim: 128,
            layers: 2,
            aggregator: AggregatorKind::Tm,
            fixed_depth: None,
            batch_size: 128,
            max_epochs: 100,
            patience: 5,
            curriculum: Curriculum::LinkPredThenAll,
            seed: 0,
            hard_negatives: true,
            validation_negatives: HeadlineNegatives::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.dim == 0 || self.layers == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("dim, layers, batch_size and max_epochs must be positive");
        }
        if self.fixed_depth == Some(0) {
            return bad("fixed_depth must be positive");
        }
        if self.fixed_depth.is_some() && self.aggregator != AggregatorKind::Tm {
            return bad("fixed_depth only applies to the tm aggregator; set layers instead");
        }
        Ok(())
    }

    pub fn encoder(&self) -> Encoder {
        Encoder { aggregator: self.aggregator, fixed_depth: self.fixed_depth }
    }

    /// Model shape for a vocabulary. The target-message aggregator gets
    /// enough layers for the deepest benchmark query.
    pub fn shape(&self, vocab: &Vocabulary) -> ModelShape {
        let layers = match (self.aggregator, self.fixed_depth) {
            (AggregatorKind::Tm, Some(d)) => d,
            (AggregatorKind::Tm, None) => {
                let deepest = Structure::ALL.iter().map(|s| s.template().diameter()).max().unwrap_or(1);
                self.layers.max(deepest)
            }
            _ => self.layers,
        };
        ModelShape {
            entities: vocab.entities,
            types: vocab.types,
            relations: vocab.relations,
            dim: self.dim,
            layers,
            cmlp: self.aggregator == AggregatorKind::Cmlp,
        }
    }
}

/// Loss of one pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossStats {
    /// Mean over samples of the summed hinge terms.
    pub loss: f64,
    pub samples: usize,
    /// Hinge terms with positive value.
    pub active: usize,
    /// Branch pattern of every hinge and activation, for gradient checks.
    pub pattern: Vec<bool>,
}

/// Cosine and its gradients; a zero vector on either side scores 0 with
/// zero gradient.
fn guarded_cosine(q: &[f64], e: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    if norm(q) == 0.0 || norm(e) == 0.0 {
        return (0.0, vec![0.0; q.len()], vec![0.0; e.len()]);
    }
    cosine_with_grad(q, e).expect("non-zero norms")
}

struct LossPass {
    stats: LossStats,
    groups: Vec<(crate::encoder::Forward, Matrix)>,
    candidate_grads: Vec<(EntityId, Vec<f64>)>,
}

fn loss_pass(enc: &Encoder, p: &ModelParams, samples: &[&QuerySample], hard: bool) -> Result<LossPass, TrainError> {
    let mut by_depth: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_depth.entry(enc.depth(&s.query, p)?).or_default().push(i);
    }
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut active = 0;
    let mut hinge_pattern = Vec::new();
    let mut kink_pattern = Vec::new();
    let mut groups = Vec::new();
    let mut candidate_grads = Vec::new();
    for idx in by_depth.values() {
        let batch: Vec<&QuerySample> = idx.iter().map(|&i| samples[i]).collect();
        let queries: Vec<_> = batch.iter().map(|s| &s.query).collect();
        let fwd = enc.forward(&queries, p)?;
        let mut d_out = Matrix::zeros(batch.len(), p.dim());
        for (b, s) in batch.iter().enumerate() {
            let q = fwd.output().row(b);
            let (sp, dq_p, de_p) = guarded_cosine(q, p.entity_embedding(s.answer));
            let mut negatives = vec![s.negative];
            if hard {
                negatives.extend(s.hard_negative);
            }
            for neg in negatives {
                let (sn, dq_n, de_n) = guarded_cosine(q, p.entity_embedding(neg));
                let h = 1.0 - sp + sn;
                hinge_pattern.push(h > 0.0);
                if h > 0.0 {
                    total += h;
                    active += 1;
                    let row = d_out.row_mut(b);
                    axpy(-scale, &dq_p, row);
                    axpy(scale, &dq_n, row);
                    candidate_grads.push((s.answer, de_p.iter().map(|x| -scale * x).collect()));
                    candidate_grads.push((neg, de_n.iter().map(|x| scale * x).collect()));
                }
            }
        }
        kink_pattern.extend(fwd.kink_pattern());
        groups.push((fwd, d_out));
    }
    hinge_pattern.extend(kink_pattern);
    Ok(LossPass {
        stats: LossStats { loss: total * scale, samples: samples.len(), active, pattern: hinge_pattern },
        groups,
        candidate_grads,
    })
}

/// Batch loss without touching gradients.
pub fn batch_loss(
    enc: &Encoder,
    p: &ModelParams,
    samples: &[&QuerySample],
    hard: bool,
) -> Result<LossStats, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    Ok(loss_pass(enc, p, samples, hard)?.stats)
}

/// Loss as a gradient-check probe.
pub fn loss_probe(enc: &Encoder, p: &ModelParams, samples: &[&QuerySample], hard: bool) -> Probe {
    let stats = batch_loss(enc, p, samples, hard).expect("loss evaluation");
    Probe { value: stats.loss, pattern: stats.pattern }
}

/// Adds the batch-loss gradient to `p`'s gradient buffers.
pub fn accumulate_gradients(
    enc: &Encoder,
    p: &mut ModelParams,
    samples: &[&QuerySample],
    hard: bool,
) -> Result<LossStats, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let pass = loss_pass(enc, p, samples, hard)?;
    for (fwd, d_out) in &pass.groups {
        fwd.backward(d_out, p);
    }
    for (e, g) in &pass.candidate_grads {
        axpy(1.0, g, p.entity.grad_row_mut(e.index()));
    }
    Ok(pass.stats)
}

/// One optimizer step on a batch. A batch with every margin satisfied
/// leaves the parameters and optimizer state untouched.
pub fn train_step(
    enc: &Encoder,
    p: &mut ModelParams,
    adam: &mut AdamState,
    samples: &[&QuerySample],
    hard: bool,
) -> Result<LossStats, TrainError> {
    p.zero_grad();
    let stats = accumulate_gradients(enc, p, samples, hard)?;
    if stats.active > 0 {
        adam.step(p)?;
    }
    p.zero_grad();
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, best_epoch: 0, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub epochs: Vec<EpochRecord>,
    pub stopping_epoch: usize,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub phases: Vec<PhaseReport>,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// Every epoch in order, tagged with its phase.
    pub fn epochs(&self) -> impl Iterator<Item = (Phase, &EpochRecord)> {
        self.phases.iter().flat_map(|p| p.epochs.iter().map(move |e| (p.phase, e)))
    }
}

/// Everything needed to continue training after the last completed epoch.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub params: ModelParams,
    pub adam: AdamState,
    pub best: ModelParams,
    /// Index into the curriculum's phases; equal to its length once done.
    pub phase: usize,
    /// Epochs completed in the current phase.
    pub epoch: usize,
    pub stopper: EarlyStopping,
    pub report: TrainReport,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    config: TrainConfig,
    vocabulary: Vocabulary,
    shape: ModelShape,
    phase: usize,
    epoch: usize,
    stopper: EarlyStopping,
    report: TrainReport,
    adam_t: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, vocabulary: Vocabulary) -> Result<Self, TrainError> {
        config.validate()?;
        let params = init_params(config.shape(&vocabulary), config.seed);
        let adam = AdamState::new(adam_config(&config), &params);
        Ok(TrainState {
            stopper: EarlyStopping::new(config.patience),
            report: TrainReport { config: config.clone(), phases: Vec::new(), wall_clock_seconds: 0.0 },
            best: params.clone(),
            params,
            adam,
            phase: 0,
            epoch: 0,
            vocabulary,
            config,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.phase >= self.config.curriculum.phases().len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = StateMeta {
            kind: "train-state".into(),
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            shape: self.params.shape,
            phase: self.phase,
            epoch: self.epoch,
            stopper: self.stopper.clone(),
            report: self.report.clone(),
            adam_t: self.adam.t,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("serializable"));
        push_params(&mut ck, "param.", &self.params);
        push_params(&mut ck, "best.", &self.best);
        for (p, (m, v)) in self.params.params().iter().zip(self.adam.first.iter().zip(&self.adam.second)) {
            ck.push(format!("adam.m.{}", p.name), m);
            ck.push(format!("adam.v.{}", p.name), v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let meta: StateMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| CheckpointError::Format(format!("training state header: {e}")))?;
        if meta.kind != "train-state" {
            return Err(CheckpointError::Format(format!("expected a training state, found `{}`", meta.kind)).into());
        }
        let params = read_params(ck, "param.", meta.shape)?;
        let best = read_params(ck, "best.", meta.shape)?;
        let mut adam = AdamState::new(adam_config(&meta.config), &params);
        adam.t = meta.adam_t;
        let names: Vec<String> = params.params().iter().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            adam.first[i] = ck.tensor(&format!("adam.m.{name}"))?.clone();
            adam.second[i] = ck.tensor(&format!("adam.v.{name}"))?.clone();
        }
        Ok(TrainState {
            config: meta.config,
            vocabulary: meta.vocabulary,
            params,
            adam,
            best,
            phase: meta.phase,
            epoch: meta.epoch,
            stopper: meta.stopper,
            report: meta.report,
        })
    }

    /// The best-validation model of the latest phase.
    pub fn model(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            params: self.best.clone(),
            encoder: self.config.encoder(),
            vocabulary: self.vocabulary.clone(),
        }
    }
}

fn adam_config(c: &TrainConfig) -> AdamConfig {
    AdamConfig { lr: c.lr, ..AdamConfig::default() }
}

/// Structure-homogeneous batches for one epoch, each structure shuffled
/// independently and the structures interleaved round-robin.
pub fn epoch_batches<'a>(samples: &[&'a QuerySample], batch_size: usize, seed: u64) -> Vec<Vec<&'a QuerySample>> {
    let mut per_structure: Vec<Vec<Vec<&QuerySample>>> = Vec::new();
    for s in Structure::ALL {
        let mut mine: Vec<&QuerySample> = samples.iter().copied().filter(|x| x.structure == s).collect();
        if mine.is_empty() {
            continue;
        }
        mine.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[s.index() as u64])));
        per_structure.push(mine.chunks(batch_size).map(<[_]>::to_vec).collect());
    }
    let rounds = per_structure.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..rounds {
        for batches in &per_structure {
            if let Some(b) = batches.get(i) {
                out.push(b.clone());
            }
        }
    }
    out
}

/// Runs the curriculum over fixed train and validation sets.
pub struct Trainer<'d> {
    state: TrainState,
    train: &'d QueryDataset,
    valid: &'d QueryDataset,
}

impl<'d> Trainer<'d> {
    pub fn new(
        config: TrainConfig,
        vocabulary: Vocabulary,
        train: &'d QueryDataset,
        valid: &'d QueryDataset,
    ) -> Result<Self, TrainError> {
        Trainer::resume(TrainState::new(config, vocabulary)?, train, valid)
    }

    pub fn resume(state: TrainState, train: &'d QueryDataset, valid: &'d QueryDataset) -> Result<Self, TrainError> {
        state.config.validate()?;
        for phase in state.config.curriculum.phases() {
            let keep = phase.structures();
            if !train.samples.iter().any(|s| keep.contains(&s.structure)) {
                return Err(TrainError::Config(format!("no training queries for phase {phase:?}")));
            }
            if !valid.samples.iter().any(|s| keep.contains(&s.structure)) {
                return Err(TrainError::Config(format!("no validation queries for phase {phase:?}")));
            }
        }
        Ok(Trainer { state, train, valid })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Trains one epoch of the current phase, then validates. Returns
    /// `None` once the curriculum is complete.
    pub fn run_epoch(&mut self) -> Result<Option<(Phase, EpochRecord)>, TrainError> {
        if self.state.is_finished() {
            return Ok(None);
        }
        let started = Instant::now();
        let st = &mut self.state;
        let config = st.config.clone();
        let phase = config.curriculum.phases()[st.phase];
        let keep = phase.structures();
        let epoch = st.epoch + 1;
        let enc = config.encoder();

        let samples: Vec<&QuerySample> = self.train.samples.iter().filter(|s| keep.contains(&s.structure)).collect();
        let batches =
            epoch_batches(&samples, config.batch_size, derive_seed(config.seed, &[st.phase as u64, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in &batches {
            let stats = train_step(&enc, &mut st.params, &mut st.adam, batch, config.hard_negatives)?;
            loss_sum += stats.loss * batch.len() as f64;
        }
        let train_loss = loss_sum / samples.len() as f64;

        let valid = self.valid.filtered(|s| keep.contains(&s));
        let valid_auc = validation_auc(&enc, &st.params, &valid, config.validation_negatives)?;

        if st.phase == st.report.phases.len() {
            st.report.phases.push(PhaseReport {
                phase,
                epochs: Vec::new(),
                stopping_epoch: 0,
                best_epoch: 0,
                best_valid_auc: f64::NAN,
            });
        }
        let record = EpochRecord { epoch, train_loss, valid_auc };
        let decision = st.stopper.observe(epoch, valid_auc);
        if decision == StopDecision::Improved {
            st.best = st.params.clone();
        }
        let pr = st.report.phases.last_mut().expect("phase report");
        pr.epochs.push(record.clone());
        pr.stopping_epoch = epoch;
        pr.best_epoch = st.stopper.best_epoch;
        pr.best_valid_auc = st.stopper.best.unwrap_or(f64::NAN);
        st.epoch = epoch;
        log::info!("{phase:?} epoch {epoch}: loss {train_loss:.5}, valid auc {valid_auc:.4}");

        if decision == StopDecision::Stop || epoch >= config.max_epochs {
            st.params = st.best.clone();
            st.adam = AdamState::new(adam_config(&config), &st.params);
            st.stopper = EarlyStopping::new(config.patience);
            st.phase += 1;
            st.epoch = 0;
        }
        st.report.wall_clock_seconds += started.elapsed().as_secs_f64();
        Ok(Some((phase, record)))
    }

    /// Runs to completion, calling `after_epoch` with the state after each
    /// epoch.
    pub fn run(
        &mut self,
        mut after_epoch: impl FnMut(&TrainState) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.run_epoch()?.is_some() {
            after_epoch(&self.state)?;
        }
        Ok(())
    }
}

fn validation_auc(
    enc: &Encoder,
    p: &ModelParams,
    valid: &QueryDataset,
    headline: HeadlineNegatives,
) -> Result<f64, TrainError> {
    Ok(evaluate_auc(&ModelScorer::new(*enc, p), valid, headline)?.macro_auc)
}

/// Trains a model from scratch to completion.
pub fn fit(
    g: &KnowledgeGraph,
    train: &QueryDataset,
    valid: &QueryDataset,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainReport), TrainError> {
    let mut t = Trainer::new(config.clone(), Vocabulary::of(g), train, valid)?;
    t.run(|_| Ok(()))?;
    let state = t.into_state();
    Ok((state.model(), state.report))
}
