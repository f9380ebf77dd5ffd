//! Query encoder: node features from the entity and type tables, relational
//! graph-convolution message passing over the query graph, and an
//! aggregation of node states into a single query embedding.
//!
//! Every query edge `r(a, b)` carries a message from `a` to `b` through
//! `W_r` and one from `b` to `a` through an independent inverse matrix
//! `W_{r⁻¹}`. Messages arriving over the same relation slot are averaged.
//!
//! A batch of queries is encoded as one disjoint-union graph; each node's
//! result is computed from row-local dot products and an order-independent
//! sum, so batched and one-at-a-time encodings agree bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::EntityId;
use crate::numerics::{axpy, cosine, sum_unordered, Matrix, NumericsError, Param, Parameterized};
use crate::query::{QueryError, QueryGraph, QueryNode};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("{table} id {id} out of range (table has {len} rows)")]
    Lookup { table: &'static str, id: usize, len: usize },
    #[error("query needs {needed} message-passing layers but the model has {available}")]
    InsufficientLayers { needed: usize, available: usize },
    #[error("the cmlp aggregator needs a model built with MLP weights")]
    MissingMlp,
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Sum,
    Max,
    Cmlp,
    Tm,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] =
        [AggregatorKind::Sum, AggregatorKind::Max, AggregatorKind::Cmlp, AggregatorKind::Tm];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Sum => "sum",
            AggregatorKind::Max => "max",
            AggregatorKind::Cmlp => "cmlp",
            AggregatorKind::Tm => "tm",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggregatorKind::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown aggregator `{s}` (expected sum, max, cmlp or tm)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub entities: usize,
    pub types: usize,
    /// Relation types of the graph; the model holds twice as many relation
    /// matrices per layer to cover inverses.
    pub relations: usize,
    pub dim: usize,
    pub layers: usize,
    pub cmlp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgcnLayer {
    pub self_weight: Param,
    pub relation_weights: Vec<Param>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Param,
    pub hidden_bias: Param,
    pub output: Param,
    pub output_bias: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub entity: Param,
    pub types: Param,
    pub layers: Vec<RgcnLayer>,
    pub mlp: Option<Mlp>,
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("sized buffer")
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    uniform_matrix(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Deterministic initialization: embedding tables uniform in
/// `[-1/√d, 1/√d]`, weight matrices Glorot-uniform, biases zero.
pub fn init_params(shape: ModelShape, seed: u64) -> ModelParams {
    assert!(shape.dim > 0 && shape.layers > 0, "dimension and layer count must be positive");
    let d = shape.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb_bound = 1.0 / (d as f64).sqrt();
    let entity = Param::row_sparse("entity", uniform_matrix(shape.entities, d, emb_bound, &mut rng));
    let types = Param::row_sparse("type", uniform_matrix(shape.types, d, emb_bound, &mut rng));
    let layers = (0..shape.layers)
        .map(|l| RgcnLayer {
            self_weight: Param::new(format!("layer{l}.self"), glorot(d, d, &mut rng)),
            relation_weights: (0..2 * shape.relations)
                .map(|slot| {
                    let name = if slot < shape.relations {
                        format!("layer{l}.rel{slot}")
                    } else {
                        format!("layer{l}.rel{}_inv", slot - shape.relations)
                    };
                    Param::new(name, glorot(d, d, &mut rng))
                })
                .collect(),
        })
        .collect();
    let mlp = shape.cmlp.then(|| {
        let input = shape.layers * d;
        Mlp {
            hidden: Param::new("mlp.hidden", glorot(d, input, &mut rng)),
            hidden_bias: Param::new("mlp.hidden_bias", Matrix::zeros(1, d)),
            output: Param::new("mlp.output", glorot(d, d, &mut rng)),
            output_bias: Param::new("mlp.output_bias", Matrix::zeros(1, d)),
        }
    });
    ModelParams { shape, entity, types, layers, mlp }
}

impl Parameterized for ModelParams {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.entity, &self.types];
        for layer in &self.layers {
            out.push(&layer.self_weight);
            out.extend(layer.relation_weights.iter());
        }
        if let Some(m) = &self.mlp {
            out.extend([&m.hidden, &m.hidden_bias, &m.output, &m.output_bias]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.entity, &mut self.types];
        for layer in &mut self.layers {
            out.push(&mut layer.self_weight);
            out.extend(layer.relation_weights.iter_mut());
        }
        if let Some(m) = &mut self.mlp {
            out.extend([&mut m.hidden, &mut m.hidden_bias, &mut m.output, &mut m.output_bias]);
        }
        out
    }
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn entity_embedding(&self, e: EntityId) -> &[f64] {
        self.entity.value.row(e.index())
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Cosine score of a query embedding against an entity's table row.
pub fn score(qvec: &[f64], entity: EntityId, p: &ModelParams) -> Result<f64, EncodeError> {
    if entity.index() >= p.shape.entities {
        return Err(EncodeError::Lookup { table: "entity", id: entity.index(), len: p.shape.entities });
    }
    Ok(cosine(qvec, p.entity_embedding(entity))?)
}

struct MessageGroup {
    slot: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    weight: Vec<f64>,
}

/// Disjoint union of a batch of query graphs with relation-grouped
/// messages.
struct BatchGraph {
    nodes: Vec<QueryNode>,
    ranges: Vec<(usize, usize)>,
    targets: Vec<usize>,
    groups: Vec<MessageGroup>,
    incoming: Vec<Vec<(usize, usize)>>,
}

impl BatchGraph {
    fn build(queries: &[&QueryGraph], p: &ModelParams) -> Result<Self, EncodeError> {
        let rel_count = p.shape.relations;
        let mut nodes = Vec::new();
        let mut ranges = Vec::with_capacity(queries.len());
        let mut targets = Vec::with_capacity(queries.len());
        let mut by_slot: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for q in queries {
            q.validate().map_err(QueryError::Invalid)?;
            let offset = nodes.len();
            for node in &q.nodes {
                match *node {
                    QueryNode::Constant { entity } if entity.index() >= p.shape.entities => {
                        return Err(EncodeError::Lookup { table: "entity", id: entity.index(), len: p.shape.entities })
                    }
                    QueryNode::Variable { var_type } if var_type.index() >= p.shape.types => {
                        return Err(EncodeError::Lookup { table: "type", id: var_type.index(), len: p.shape.types })
                    }
                    _ => nodes.push(*node),
                }
            }
            for e in &q.edges {
                let r = e.relation.index();
                if r >= rel_count {
                    return Err(EncodeError::Lookup { table: "relation", id: r, len: rel_count });
                }
                by_slot.entry(r).or_default().push((offset + e.src, offset + e.dst));
                by_slot.entry(rel_count + r).or_default().push((offset + e.dst, offset + e.src));
            }
            ranges.push((offset, nodes.len()));
            targets.push(offset + q.target);
        }

        let mut incoming = vec![Vec::new(); nodes.len()];
        let mut groups = Vec::with_capacity(by_slot.len());
        for (slot, msgs) in by_slot {
            let mut per_dst: BTreeMap<usize, usize> = BTreeMap::new();
            for &(_, dst) in &msgs {
                *per_dst.entry(dst).or_default() += 1;
            }
            let gi = groups.len();
            let mut group = MessageGroup {
                slot,
                src: Vec::with_capacity(msgs.len()),
                dst: Vec::with_capacity(msgs.len()),
                weight: Vec::with_capacity(msgs.len()),
            };
            for (mi, (src, dst)) in msgs.into_iter().enumerate() {
                group.src.push(src);
                group.dst.push(dst);
                group.weight.push(1.0 / per_dst[&dst] as f64);
                incoming[dst].push((gi, mi));
            }
            groups.push(group);
        }
        Ok(BatchGraph { nodes, ranges, targets, groups, incoming })
    }

    fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

fn gather(h: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), h.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(h.row(r));
    }
    out
}

fn initial_states(bg: &BatchGraph, p: &ModelParams) -> Matrix {
    let mut h = Matrix::zeros(bg.node_count(), p.dim());
    for (v, node) in bg.nodes.iter().enumerate() {
        let src = match *node {
            QueryNode::Constant { entity } => p.entity.value.row(entity.index()),
            QueryNode::Variable { var_type } => p.types.value.row(var_type.index()),
        };
        h.row_mut(v).copy_from_slice(src);
    }
    h
}

/// Pre-activation of one message-passing step:
/// `W₀h_v + Σ_r Σ_{j∈N_v^r} W_r h_j / |N_v^r|`.
fn layer_preactivation(h: &Matrix, bg: &BatchGraph, layer: &RgcnLayer) -> Matrix {
    let self_out = h.matmul_t(&layer.self_weight.value).expect("square weights");
    let messages: Vec<Matrix> = bg
        .groups
        .iter()
        .map(|g| {
            let mut y = gather(h, &g.src).matmul_t(&layer.relation_weights[g.slot].value).expect("square weights");
            for (i, &w) in g.weight.iter().enumerate() {
                y.row_mut(i).iter_mut().for_each(|x| *x *= w);
            }
            y
        })
        .collect();
    let mut pre = Matrix::zeros(h.rows(), h.cols());
    let mut terms: Vec<&[f64]> = Vec::new();
    for v in 0..h.rows() {
        terms.clear();
        terms.push(self_out.row(v));
        terms.extend(bg.incoming[v].iter().map(|&(gi, mi)| messages[gi].row(mi)));
        sum_unordered(&terms, pre.row_mut(v));
    }
    pre
}

/// `y = W x` backward: accumulates `dW += dy ⊗ x` and `dx += Wᵀ dy`.
fn linear_backward(w: &mut Param, dy: &[f64], x: &[f64], dx: &mut [f64]) {
    let Param { value, grad, .. } = w;
    for (i, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, x, grad.row_mut(i));
            axpy(g, value.row(i), dx);
        }
    }
}

fn layer_backward(h: &Matrix, pre: &Matrix, d_out: &Matrix, bg: &BatchGraph, layer: &mut RgcnLayer) -> Matrix {
    let mut dpre = d_out.clone();
    for (g, &z) in dpre.data_mut().iter_mut().zip(pre.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let mut dh = Matrix::zeros(h.rows(), h.cols());
    for v in 0..h.rows() {
        linear_backward(&mut layer.self_weight, dpre.row(v), h.row(v), dh.row_mut(v));
    }
    let mut dy = vec![0.0; h.cols()];
    for g in &bg.groups {
        let w = &mut layer.relation_weights[g.slot];
        for i in 0..g.src.len() {
            for (o, &x) in dy.iter_mut().zip(dpre.row(g.dst[i])) {
                *o = g.weight[i] * x;
            }
            linear_backward(w, &dy, h.row(g.src[i]), dh.row_mut(g.src[i]));
        }
    }
    dh
}

/// Node features `h⁽⁰⁾` of one query: entity rows for constants, type rows
/// for variables.
pub fn init_node_features(q: &QueryGraph, p: &ModelParams) -> Result<Matrix, EncodeError> {
    let bg = BatchGraph::build(&[q], p)?;
    Ok(initial_states(&bg, p))
}

/// One message-passing step over a single query with an arbitrary
/// activation.
pub fn rgcn_layer(
    h: &Matrix,
    q: &QueryGraph,
    layer: &RgcnLayer,
    p: &ModelParams,
    activation: impl Fn(f64) -> f64,
) -> Result<Matrix, EncodeError> {
    let bg = BatchGraph::build(&[q], p)?;
    let mut out = layer_preactivation(h, &bg, layer);
    out.data_mut().iter_mut().for_each(|x| *x = activation(*x));
    Ok(out)
}

struct CmlpCache {
    z: Matrix,
    a: Matrix,
    u: Matrix,
}

/// Cached forward pass over a batch whose queries all use the same depth.
pub struct Forward {
    bg: BatchGraph,
    aggregator: AggregatorKind,
    /// `states[l]` is `h⁽ˡ⁾` for all nodes, `l = 0..=depth`.
    states: Vec<Matrix>,
    pre: Vec<Matrix>,
    cmlp: Option<CmlpCache>,
    argmax: Vec<usize>,
    output: Matrix,
}

impl Forward {
    /// Query embeddings, one row per query in batch order.
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    /// Which side of every ReLU and max the forward pass took.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.pre.iter().flat_map(|m| m.data().iter().map(|&x| x > 0.0)).collect();
        if let Some(c) = &self.cmlp {
            out.extend(c.a.data().iter().map(|&x| x > 0.0));
        }
        for &k in &self.argmax {
            out.extend((0..8).map(|b| k >> b & 1 == 1));
        }
        out
    }

    /// Accumulates parameter gradients for `d_output` (same shape as
    /// [`output`](Self::output)) into `p`.
    pub fn backward(&self, d_output: &Matrix, p: &mut ModelParams) {
        let depth = self.depth();
        let d = p.dim();
        let n = self.bg.node_count();
        // Gradient flowing into each h⁽ˡ⁾ from the readout.
        let mut dstates: Vec<Matrix> = (0..=depth).map(|_| Matrix::zeros(n, d)).collect();
        match self.aggregator {
            AggregatorKind::Sum => {
                for (b, &(lo, hi)) in self.bg.ranges.iter().enumerate() {
                    for v in lo..hi {
                        dstates[depth].row_mut(v).copy_from_slice(d_output.row(b));
                    }
                }
            }
            AggregatorKind::Max => {
                for b in 0..self.bg.ranges.len() {
                    for j in 0..d {
                        let v = self.argmax[b * d + j];
                        let cur = dstates[depth].get(v, j);
                        dstates[depth].set(v, j, cur + d_output.get(b, j));
                    }
                }
            }
            AggregatorKind::Tm => {
                for (b, &t) in self.bg.targets.iter().enumerate() {
                    axpy(1.0, d_output.row(b), dstates[depth].row_mut(t));
                }
            }
            AggregatorKind::Cmlp => {
                let cache = self.cmlp.as_ref().expect("cmlp cache");
                let mlp = p.mlp.as_mut().expect("cmlp parameters");
                let mut du = vec![0.0; d];
                let mut dz = vec![0.0; cache.z.cols()];
                for (b, &(lo, hi)) in self.bg.ranges.iter().enumerate() {
                    let dout = d_output.row(b);
                    for v in lo..hi {
                        du.iter_mut().for_each(|x| *x = 0.0);
                        linear_backward(&mut mlp.output, dout, cache.u.row(v), &mut du);
                        axpy(1.0, dout, mlp.output_bias.grad.row_mut(0));
                        for (g, &a) in du.iter_mut().zip(cache.a.row(v)) {
                            if a <= 0.0 {
                                *g = 0.0;
                            }
                        }
                        dz.iter_mut().for_each(|x| *x = 0.0);
                        linear_backward(&mut mlp.hidden, &du, cache.z.row(v), &mut dz);
                        axpy(1.0, &du, mlp.hidden_bias.grad.row_mut(0));
                        for l in 1..=depth {
                            axpy(1.0, &dz[(l - 1) * d..l * d], dstates[l].row_mut(v));
                        }
                    }
                }
            }
        }

        for l in (0..depth).rev() {
            let upstream = std::mem::replace(&mut dstates[l + 1], Matrix::zeros(0, 0));
            let dh = layer_backward(&self.states[l], &self.pre[l], &upstream, &self.bg, &mut p.layers[l]);
            axpy(1.0, dh.data(), dstates[l].data_mut());
        }

        for (v, node) in self.bg.nodes.iter().enumerate() {
            let g = dstates[0].row(v);
            let row = match *node {
                QueryNode::Constant { entity } => p.entity.grad_row_mut(entity.index()),
                QueryNode::Variable { var_type } => p.types.grad_row_mut(var_type.index()),
            };
            axpy(1.0, g, row);
        }
    }
}

/// Encoding configuration: the aggregator and, for target-message
/// readout, an optional fixed number of message-passing steps used in
/// place of the query diameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub aggregator: AggregatorKind,
    pub fixed_depth: Option<usize>,
}

impl Encoder {
    pub fn new(aggregator: AggregatorKind) -> Self {
        Encoder { aggregator, fixed_depth: None }
    }

    pub fn with_fixed_depth(mut self, depth: usize) -> Self {
        self.fixed_depth = Some(depth);
        self
    }

    /// Message-passing steps used for `q`.
    pub fn depth(&self, q: &QueryGraph, p: &ModelParams) -> Result<usize, EncodeError> {
        let available = p.layers.len();
        let needed = match self.aggregator {
            AggregatorKind::Tm => match self.fixed_depth {
                Some(d) => d,
                None => q.diameter()?,
            },
            _ => available,
        };
        if needed > available {
            return Err(EncodeError::InsufficientLayers { needed, available });
        }
        Ok(needed)
    }

    /// Forward pass over queries that share a depth.
    pub fn forward(&self, queries: &[&QueryGraph], p: &ModelParams) -> Result<Forward, EncodeError> {
        let depth = match queries.first() {
            Some(q) => self.depth(q, p)?,
            None => 0,
        };
        for q in queries.iter().skip(1) {
            let other = self.depth(q, p)?;
            assert_eq!(other, depth, "forward() needs queries of equal depth; use encode_batch");
        }
        if self.aggregator == AggregatorKind::Cmlp && p.mlp.is_none() {
            return Err(EncodeError::MissingMlp);
        }
        let bg = BatchGraph::build(queries, p)?;
        let mut states = vec![initial_states(&bg, p)];
        let mut pre = Vec::with_capacity(depth);
        for layer in &p.layers[..depth] {
            let z = layer_preactivation(states.last().unwrap(), &bg, layer);
            states.push(z.relu());
            pre.push(z);
        }

        let d = p.dim();
        let top = &states[depth];
        let mut output = Matrix::zeros(queries.len(), d);
        let mut argmax = Vec::new();
        let mut cmlp = None;
        match self.aggregator {
            AggregatorKind::Sum => {
                for (b, &(lo, hi)) in bg.ranges.iter().enumerate() {
                    let rows: Vec<&[f64]> = (lo..hi).map(|v| top.row(v)).collect();
                    sum_unordered(&rows, output.row_mut(b));
                }
            }
            AggregatorKind::Max => {
                argmax = vec![0; queries.len() * d];
                for (b, &(lo, hi)) in bg.ranges.iter().enumerate() {
                    for j in 0..d {
                        let mut best = lo;
                        for v in lo + 1..hi {
                            if top.get(v, j) > top.get(best, j) {
                                best = v;
                            }
                        }
                        argmax[b * d + j] = best;
                        output.set(b, j, top.get(best, j));
                    }
                }
            }
            AggregatorKind::Tm => {
                for (b, &t) in bg.targets.iter().enumerate() {
                    output.row_mut(b).copy_from_slice(top.row(t));
                }
            }
            AggregatorKind::Cmlp => {
                let mlp = p.mlp.as_ref().expect("checked above");
                let n = bg.node_count();
                let mut z = Matrix::zeros(n, depth * d);
                for v in 0..n {
                    for (l, state) in states[1..=depth].iter().enumerate() {
                        z.row_mut(v)[l * d..(l + 1) * d].copy_from_slice(state.row(v));
                    }
                }
                let mut a = z.matmul_t(&mlp.hidden.value)?;
                for v in 0..n {
                    axpy(1.0, mlp.hidden_bias.value.row(0), a.row_mut(v));
                }
                let u = a.relu();
                let mut o = u.matmul_t(&mlp.output.value)?;
                for v in 0..n {
                    axpy(1.0, mlp.output_bias.value.row(0), o.row_mut(v));
                }
                for (b, &(lo, hi)) in bg.ranges.iter().enumerate() {
                    let rows: Vec<&[f64]> = (lo..hi).map(|v| o.row(v)).collect();
                    sum_unordered(&rows, output.row_mut(b));
                }
                cmlp = Some(CmlpCache { z, a, u });
            }
        }
        Ok(Forward { bg, aggregator: self.aggregator, states, pre, cmlp, argmax, output })
    }

    pub fn encode(&self, q: &QueryGraph, p: &ModelParams) -> Result<Vec<f64>, EncodeError> {
        Ok(self.forward(&[q], p)?.output.row(0).to_vec())
    }

    /// Encodes any mix of queries, grouping them by depth internally. Rows
    /// follow input order.
    pub fn encode_batch(&self, queries: &[&QueryGraph], p: &ModelParams) -> Result<Matrix, EncodeError> {
        let mut by_depth: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, q) in queries.iter().enumerate() {
            by_depth.entry(self.depth(q, p)?).or_default().push(i);
        }
        let mut out = Matrix::zeros(queries.len(), p.dim());
        for idx in by_depth.values() {
            let group: Vec<&QueryGraph> = idx.iter().map(|&i| queries[i]).collect();
            let f = self.forward(&group, p)?;
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(f.output.row(k));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{RelationId, TypeId};
    use crate::numerics::relu;
    use crate::query::{QueryEdge, Structure};

    fn shape(d: usize, layers: usize) -> ModelShape {
        ModelShape { entities: 10, types: 3, relations: 2, dim: d, layers, cmlp: true }
    }

    fn set_identity(p: &mut Param) {
        p.value = Matrix::identity(p.value.rows());
    }

    fn zero(p: &mut Param) {
        p.value.fill(0.0);
    }

    fn one_chain(e: u32) -> QueryGraph {
        Structure::OneChain.template().instantiate(EntityId(e), TypeId(1), RelationId(0))
    }

    #[test]
    fn node_features_are_table_rows() {
        let p = init_params(shape(4, 2), 1);
        let h = init_node_features(&one_chain(5), &p).unwrap();
        assert_eq!(h.row(0), p.entity.value.row(5));
        assert_eq!(h.row(1), p.types.value.row(1));
        let two = Structure::TwoChain.template().instantiate(EntityId(2), TypeId(2), RelationId(1));
        let h = init_node_features(&two, &p).unwrap();
        assert_eq!(h.row(1), h.row(2));
    }

    #[test]
    fn zero_type_table_gives_zero_variables() {
        let mut p = init_params(shape(4, 2), 1);
        zero(&mut p.types);
        let h = init_node_features(&one_chain(3), &p).unwrap();
        assert!(h.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lookup_out_of_range() {
        let p = init_params(shape(4, 2), 1);
        assert!(matches!(init_node_features(&one_chain(10), &p), Err(EncodeError::Lookup { table: "entity", .. })));
    }

    #[test]
    fn isolated_node_with_identity_self_weight() {
        let mut p = init_params(shape(3, 1), 1);
        set_identity(&mut p.layers[0].self_weight);
        let q = QueryGraph { nodes: vec![QueryNode::Variable { var_type: TypeId(0) }], edges: vec![], target: 0 };
        let h = Matrix::from_rows(&[vec![0.5, 0.0, 2.0]]).unwrap();
        let out = rgcn_layer(&h, &q, &p.layers[0], &p, relu).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn single_and_double_messages() {
        let mut p = init_params(shape(3, 1), 1);
        zero(&mut p.layers[0].self_weight);
        for w in &mut p.layers[0].relation_weights {
            set_identity(w);
        }
        // one r-neighbour: target receives h_anchor
        let q = one_chain(0);
        let h = Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![3.0, 0.0, 1.0]]).unwrap();
        let out = rgcn_layer(&h, &q, &p.layers[0], &p, relu).unwrap();
        assert_eq!(out.row(1), h.row(0));
        // two r-neighbours: average
        let q = Structure::TwoInter.template().instantiate(EntityId(0), TypeId(0), RelationId(0));
        let h = Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![3.0, 0.0, 1.5], vec![9.0, 9.0, 9.0]]).unwrap();
        let out = rgcn_layer(&h, &q, &p.layers[0], &p, relu).unwrap();
        assert_eq!(out.row(2), &[2.0, 1.0, 1.0]);
    }

    #[test]
    fn degenerate_single_node_sum() {
        let mut p = init_params(shape(4, 1), 2);
        set_identity(&mut p.layers[0].self_weight);
        let q = QueryGraph { nodes: vec![QueryNode::Variable { var_type: TypeId(2) }], edges: vec![], target: 0 };
        let sum = Encoder::new(AggregatorKind::Sum).encode(&q, &p).unwrap();
        let expect: Vec<f64> = p.types.value.row(2).iter().map(|&x| relu(x)).collect();
        assert_eq!(sum, expect);
        let max = Encoder::new(AggregatorKind::Max).encode(&q, &p).unwrap();
        assert_eq!(sum, max);
    }

    #[test]
    fn tm_needs_enough_layers() {
        let p = init_params(shape(4, 2), 2);
        let q = Structure::ThreeChain.template().instantiate(EntityId(0), TypeId(0), RelationId(0));
        assert!(matches!(
            Encoder::new(AggregatorKind::Tm).encode(&q, &p),
            Err(EncodeError::InsufficientLayers { needed: 3, available: 2 })
        ));
    }

    #[test]
    fn parameter_count_includes_inverses() {
        let p = init_params(ModelShape { entities: 5, types: 2, relations: 49, dim: 8, layers: 2, cmlp: false }, 0);
        for layer in &p.layers {
            assert_eq!(1 + layer.relation_weights.len(), 99);
        }
        let p3 = init_params(ModelShape { layers: 3, ..p.shape }, 0);
        assert_eq!(p3.layers.len(), 3);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(shape(8, 2), 42);
        let b = init_params(shape(8, 2), 42);
        assert_eq!(a, b);
        let c = init_params(shape(8, 2), 43);
        assert_ne!(a, c);
    }

    #[test]
    fn scores_are_cosines() {
        let p = init_params(shape(4, 1), 3);
        let row = p.entity.value.row(4).to_vec();
        assert!((score(&row, EntityId(4), &p).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = row.iter().map(|x| -x).collect();
        assert!((score(&neg, EntityId(4), &p).unwrap() + 1.0).abs() < 1e-15);
        assert!(score(&[0.0; 4], EntityId(4), &p).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let p = init_params(shape(6, 3), 9);
        let qs: Vec<QueryGraph> = Structure::ALL
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut q = s.template().instantiate(EntityId(i as u32), TypeId(1), RelationId(0));
                for (k, e) in q.edges.iter_mut().enumerate() {
                    e.relation = RelationId::from((i + k) % 2);
                }
                q
            })
            .collect();
        let refs: Vec<&QueryGraph> = qs.iter().collect();
        for agg in AggregatorKind::ALL {
            let enc = Encoder::new(agg);
            let batch = enc.encode_batch(&refs, &p).unwrap();
            for (i, q) in qs.iter().enumerate() {
                assert_eq!(batch.row(i), enc.encode(q, &p).unwrap().as_slice(), "{agg} {i}");
            }
        }
    }

    #[test]
    fn permuted_nodes_same_embedding() {
        let p = init_params(shape(5, 3), 4);
        let q = QueryGraph {
            nodes: vec![
                QueryNode::Constant { entity: EntityId(1) },
                QueryNode::Constant { entity: EntityId(7) },
                QueryNode::Variable { var_type: TypeId(0) },
            ],
            edges: vec![
                QueryEdge { src: 0, relation: RelationId(0), dst: 2 },
                QueryEdge { src: 1, relation: RelationId(1), dst: 2 },
            ],
            target: 2,
        };
        let permuted = q.permuted(&[2, 1, 0]);
        for agg in AggregatorKind::ALL {
            let enc = Encoder::new(agg);
            assert_eq!(enc.encode(&q, &p).unwrap(), enc.encode(&permuted, &p).unwrap(), "{agg}");
        }
    }
}
