//! Typed knowledge graph: loading from TSV, relation-indexed adjacency and
//! the random edge-removal split used to build held-out evaluation queries.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl From<usize> for $name {
            fn from(i: usize) -> Self {
                $name(i as u32)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

dense_id!(
    /// Dense index of an entity, in `[0, entity_count)`.
    EntityId
);
dense_id!(
    /// Dense index of a relation type, in `[0, relation_count)`.
    RelationId
);
dense_id!(
    /// Dense index of an entity type, in `[0, type_count)`.
    TypeId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Triple { subject, relation, object }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("entity `{entity}` appears in a triple but has no type assignment")]
    Untyped { entity: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Compressed adjacency: for each entity, its edges sorted by
/// `(relation, neighbor)`.
#[derive(Debug, Clone, Default)]
struct Adjacency {
    offsets: Vec<usize>,
    relations: Vec<RelationId>,
    neighbors: Vec<EntityId>,
}

impl Adjacency {
    fn build(entity_count: usize, edges: impl Iterator<Item = (EntityId, RelationId, EntityId)>) -> Self {
        let mut rows: Vec<Vec<(RelationId, EntityId)>> = vec![Vec::new(); entity_count];
        for (v, r, u) in edges {
            rows[v.index()].push((r, u));
        }
        let mut adj = Adjacency { offsets: Vec::with_capacity(entity_count + 1), ..Default::default() };
        adj.offsets.push(0);
        for mut row in rows {
            row.sort_unstable();
            for (r, u) in row {
                adj.relations.push(r);
                adj.neighbors.push(u);
            }
            adj.offsets.push(adj.relations.len());
        }
        adj
    }

    fn span(&self, v: EntityId) -> (usize, usize) {
        (self.offsets[v.index()], self.offsets[v.index() + 1])
    }

    fn by_relation(&self, v: EntityId, r: RelationId) -> &[EntityId] {
        let (lo, hi) = self.span(v);
        let rels = &self.relations[lo..hi];
        let start = rels.partition_point(|x| *x < r);
        let end = rels.partition_point(|x| *x <= r);
        &self.neighbors[lo + start..lo + end]
    }

    fn edges(&self, v: EntityId) -> impl Iterator<Item = (RelationId, EntityId)> + '_ {
        let (lo, hi) = self.span(v);
        self.relations[lo..hi].iter().copied().zip(self.neighbors[lo..hi].iter().copied())
    }

    fn degree(&self, v: EntityId) -> usize {
        let (lo, hi) = self.span(v);
        hi - lo
    }

    fn edge_at(&self, v: EntityId, k: usize) -> (RelationId, EntityId) {
        let (lo, _) = self.span(v);
        (self.relations[lo + k], self.neighbors[lo + k])
    }
}

/// Counts mirroring the usual dataset statistics table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub entity_types: usize,
    pub triples: usize,
    pub relation_types: usize,
}

/// A typed, directed, relation-labelled multigraph (without duplicate triples).
///
/// Immutable after construction. Entity, relation and type ids are dense and
/// stable; the label tables map them back to the source strings.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    type_labels: Vec<String>,
    type_of: Vec<TypeId>,
    triples: Vec<Triple>,
    out_adj: Adjacency,
    in_adj: Adjacency,
    by_type: Vec<Vec<EntityId>>,
}

impl KnowledgeGraph {
    /// Builds a graph from already-interned parts. Duplicate triples are
    /// dropped (first occurrence wins) with a warning.
    pub fn from_parts(
        entity_labels: Vec<String>,
        relation_labels: Vec<String>,
        type_labels: Vec<String>,
        type_of: Vec<TypeId>,
        triples: Vec<Triple>,
    ) -> Result<Self, GraphError> {
        if type_of.len() != entity_labels.len() {
            return Err(GraphError::Argument(format!(
                "{} entities but {} type assignments",
                entity_labels.len(),
                type_of.len()
            )));
        }
        let n = entity_labels.len();
        if let Some(t) = type_of.iter().find(|t| t.index() >= type_labels.len()) {
            return Err(GraphError::Argument(format!("type id {t} out of range")));
        }
        for t in &triples {
            if t.subject.index() >= n || t.object.index() >= n {
                return Err(GraphError::Argument(format!("triple {t:?} references an unknown entity")));
            }
            if t.relation.index() >= relation_labels.len() {
                return Err(GraphError::Argument(format!("triple {t:?} references an unknown relation")));
            }
        }

        let mut seen = HashSet::with_capacity(triples.len());
        let before = triples.len();
        let triples: Vec<Triple> = triples.into_iter().filter(|t| seen.insert(*t)).collect();
        if triples.len() != before {
            log::warn!("dropped {} duplicate triples", before - triples.len());
        }

        let out_adj = Adjacency::build(n, triples.iter().map(|t| (t.subject, t.relation, t.object)));
        let in_adj = Adjacency::build(n, triples.iter().map(|t| (t.object, t.relation, t.subject)));
        let mut by_type = vec![Vec::new(); type_labels.len()];
        for (e, t) in type_of.iter().enumerate() {
            by_type[t.index()].push(EntityId::from(e));
        }

        Ok(KnowledgeGraph { entity_labels, relation_labels, type_labels, type_of, triples, out_adj, in_adj, by_type })
    }

    /// Reads a graph from a triple stream (`subject\trelation\tobject`) and
    /// an entity-type stream (`entity\ttype`).
    ///
    /// Entity ids follow first appearance in the triples, then any
    /// entities listed only in the types stream, in that stream's order.
    /// Relation ids follow first appearance in the triples; type ids follow
    /// first appearance in the types stream.
    pub fn read<T: BufRead, Y: BufRead>(
        triples: T,
        triples_name: &str,
        types: Y,
        types_name: &str,
    ) -> Result<Self, GraphError> {
        let mut type_ids: HashMap<String, TypeId> = HashMap::new();
        let mut type_labels = Vec::new();
        let mut declared: Vec<(String, TypeId)> = Vec::new();
        let mut declared_idx: HashMap<String, usize> = HashMap::new();

        for (lineno, line) in types.lines().enumerate() {
            let line = line.map_err(|source| GraphError::Io { path: types_name.to_string(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
                return Err(GraphError::Parse {
                    path: types_name.to_string(),
                    line: lineno + 1,
                    message: format!("expected `entity<TAB>type`, got {line:?}"),
                });
            }
            let ty = *type_ids.entry(fields[1].to_string()).or_insert_with(|| {
                type_labels.push(fields[1].to_string());
                TypeId::from(type_labels.len() - 1)
            });
            match declared_idx.get(fields[0]) {
                Some(&i) if declared[i].1 != ty => {
                    return Err(GraphError::Parse {
                        path: types_name.to_string(),
                        line: lineno + 1,
                        message: format!("entity `{}` assigned two different types", fields[0]),
                    })
                }
                Some(_) => {}
                None => {
                    declared_idx.insert(fields[0].to_string(), declared.len());
                    declared.push((fields[0].to_string(), ty));
                }
            }
        }

        let mut entity_ids: HashMap<String, EntityId> = HashMap::new();
        let mut entity_labels: Vec<String> = Vec::new();
        let mut type_of: Vec<TypeId> = Vec::new();
        let mut relation_ids: HashMap<String, RelationId> = HashMap::new();
        let mut relation_labels: Vec<String> = Vec::new();
        let mut parsed = Vec::new();

        let mut intern =
            |label: &str, entity_labels: &mut Vec<String>, type_of: &mut Vec<TypeId>| -> Result<EntityId, GraphError> {
                if let Some(&id) = entity_ids.get(label) {
                    return Ok(id);
                }
                let ty = match declared_idx.get(label) {
                    Some(&i) => declared[i].1,
                    None => return Err(GraphError::Untyped { entity: label.to_string() }),
                };
                let id = EntityId::from(entity_labels.len());
                entity_labels.push(label.to_string());
                type_of.push(ty);
                entity_ids.insert(label.to_string(), id);
                Ok(id)
            };

        for (lineno, line) in triples.lines().enumerate() {
            let line = line.map_err(|source| GraphError::Io { path: triples_name.to_string(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(GraphError::Parse {
                    path: triples_name.to_string(),
                    line: lineno + 1,
                    message: format!("expected `subject<TAB>relation<TAB>object`, got {line:?}"),
                });
            }
            let s = intern(fields[0], &mut entity_labels, &mut type_of)?;
            let r = *relation_ids.entry(fields[1].to_string()).or_insert_with(|| {
                relation_labels.push(fields[1].to_string());
                RelationId::from(relation_labels.len() - 1)
            });
            let o = intern(fields[2], &mut entity_labels, &mut type_of)?;
            parsed.push(Triple::new(s, r, o));
        }

        for (label, _) in &declared {
            intern(label, &mut entity_labels, &mut type_of)?;
        }

        KnowledgeGraph::from_parts(entity_labels, relation_labels, type_labels, type_of, parsed)
    }

    /// Writes triples as `subject\trelation\tobject` lines, in stored order.
    pub fn write_triples<W: Write>(&self, mut w: W) -> io::Result<()> {
        self.write_triple_list(&mut w, &self.triples)
    }

    pub fn write_triple_list<W: Write>(&self, mut w: W, triples: &[Triple]) -> io::Result<()> {
        for t in triples {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entity_labels[t.subject.index()],
                self.relation_labels[t.relation.index()],
                self.entity_labels[t.object.index()]
            )?;
        }
        Ok(())
    }

    /// Writes `entity\ttype` lines in entity-id order.
    pub fn write_types<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (label, ty) in self.entity_labels.iter().zip(&self.type_of) {
            writeln!(w, "{}\t{}", label, self.type_labels[ty.index()])?;
        }
        Ok(())
    }

    pub fn entity_count(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn type_count(&self) -> usize {
        self.type_labels.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn type_of(&self, e: EntityId) -> TypeId {
        self.type_of[e.index()]
    }

    pub fn entities_of_type(&self, t: TypeId) -> &[EntityId] {
        &self.by_type[t.index()]
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        &self.entity_labels[e.index()]
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relation_labels[r.index()]
    }

    pub fn type_label(&self, t: TypeId) -> &str {
        &self.type_labels[t.index()]
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entity_labels
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    pub fn type_labels(&self) -> &[String] {
        &self.type_labels
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_labels.iter().position(|l| l == label).map(EntityId::from)
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_labels.iter().position(|l| l == label).map(RelationId::from)
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            entities: self.entity_count(),
            entity_types: self.type_count(),
            triples: self.triples.len(),
            relation_types: self.relation_count(),
        }
    }

    /// Neighbours of `v` through relation `r` in the given direction,
    /// sorted by id.
    pub fn neighbors(&self, v: EntityId, r: RelationId, direction: Direction) -> Result<&[EntityId], GraphError> {
        if v.index() >= self.entity_count() {
            return Err(GraphError::Argument(format!("entity id {v} out of range")));
        }
        if r.index() >= self.relation_count() {
            return Err(GraphError::Argument(format!("relation id {r} out of range")));
        }
        Ok(self.neighbors_unchecked(v, r, direction))
    }

    #[inline]
    pub(crate) fn neighbors_unchecked(&self, v: EntityId, r: RelationId, direction: Direction) -> &[EntityId] {
        match direction {
            Direction::Out => self.out_adj.by_relation(v, r),
            Direction::In => self.in_adj.by_relation(v, r),
        }
    }

    pub fn has_edge(&self, s: EntityId, r: RelationId, o: EntityId) -> bool {
        self.out_adj.by_relation(s, r).binary_search(&o).is_ok()
    }

    /// All `(relation, neighbour)` pairs of `v` in one direction.
    pub fn edges(&self, v: EntityId, direction: Direction) -> impl Iterator<Item = (RelationId, EntityId)> + '_ {
        match direction {
            Direction::Out => self.out_adj.edges(v),
            Direction::In => self.in_adj.edges(v),
        }
    }

    pub fn in_degree(&self, v: EntityId) -> usize {
        self.in_adj.degree(v)
    }

    pub(crate) fn in_edge_at(&self, v: EntityId, k: usize) -> (RelationId, EntityId) {
        self.in_adj.edge_at(v, k)
    }

    /// A graph with the same vocabularies and the given triples removed.
    pub fn without(&self, removed: &[Triple]) -> Result<Self, GraphError> {
        let drop: HashSet<Triple> = removed.iter().copied().collect();
        let kept = self.triples.iter().copied().filter(|t| !drop.contains(t)).collect();
        KnowledgeGraph::from_parts(
            self.entity_labels.clone(),
            self.relation_labels.clone(),
            self.type_labels.clone(),
            self.type_of.clone(),
            kept,
        )
    }

    /// Parses triples written by [`write_triple_list`](Self::write_triple_list)
    /// against this graph's vocabularies.
    pub fn read_triple_list<R: BufRead>(&self, r: R, name: &str) -> Result<Vec<Triple>, GraphError> {
        let ents: HashMap<&str, EntityId> =
            self.entity_labels.iter().enumerate().map(|(i, l)| (l.as_str(), EntityId::from(i))).collect();
        let rels: HashMap<&str, RelationId> =
            self.relation_labels.iter().enumerate().map(|(i, l)| (l.as_str(), RelationId::from(i))).collect();
        let mut out = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|source| GraphError::Io { path: name.to_string(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| GraphError::Parse { path: name.to_string(), line: lineno + 1, message };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {line:?}")));
            }
            let s = ents.get(f[0]).ok_or_else(|| parse_err(format!("unknown entity `{}`", f[0])))?;
            let p = rels.get(f[1]).ok_or_else(|| parse_err(format!("unknown relation `{}`", f[1])))?;
            let o = ents.get(f[2]).ok_or_else(|| parse_err(format!("unknown entity `{}`", f[2])))?;
            out.push(Triple::new(*s, *p, *o));
        }
        Ok(out)
    }

    /// Removes `round(fraction * |E|)` triples chosen uniformly without
    /// replacement. Entity ids and type assignments are unchanged.
    pub fn remove_edges(&self, fraction: f64, seed: u64) -> Result<EdgeSplit, GraphError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(GraphError::Argument(format!("removal fraction must lie in (0, 1), got {fraction}")));
        }
        let total = self.triples.len();
        let count = (fraction * total as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, total, count).into_vec();
        picked.sort_unstable();
        let removed: Vec<Triple> = picked.iter().map(|&i| self.triples[i]).collect();
        let train_graph = self.without(&removed)?;
        Ok(EdgeSplit { train_graph, removed, removal_fraction: fraction, seed })
    }
}

/// Loads a graph from a triples TSV and an entity-type TSV.
pub fn load_graph(triples_path: impl AsRef<Path>, types_path: impl AsRef<Path>) -> Result<KnowledgeGraph, GraphError> {
    let open = |p: &Path| -> Result<BufReader<File>, GraphError> {
        File::open(p).map(BufReader::new).map_err(|source| GraphError::Io { path: p.display().to_string(), source })
    };
    let tp: PathBuf = triples_path.as_ref().to_path_buf();
    let yp: PathBuf = types_path.as_ref().to_path_buf();
    KnowledgeGraph::read(open(&tp)?, &tp.display().to_string(), open(&yp)?, &yp.display().to_string())
}

/// Result of [`KnowledgeGraph::remove_edges`].
#[derive(Debug, Clone)]
pub struct EdgeSplit {
    pub train_graph: KnowledgeGraph,
    pub removed: Vec<Triple>,
    pub removal_fraction: f64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(triples: &str, types: &str) -> KnowledgeGraph {
        KnowledgeGraph::read(triples.as_bytes(), "triples", types.as_bytes(), "types").unwrap()
    }

    #[test]
    fn counts_small_fixture() {
        let g = graph("a\tr\tb\nb\tr\tc\na\ts\tc\n", "a\tt\nb\tt\nc\tt\n");
        assert_eq!(g.entity_count(), 3);
        assert_eq!(g.relation_count(), 2);
        assert_eq!(g.type_count(), 1);
        assert_eq!(g.triples().len(), 3);
    }

    #[test]
    fn empty_inputs_give_empty_graph() {
        let g = graph("", "");
        assert_eq!(g.stats(), GraphStats { entities: 0, entity_types: 0, triples: 0, relation_types: 0 });
    }

    #[test]
    fn untyped_entity_is_named() {
        let err = KnowledgeGraph::read("a\tr\tb\n".as_bytes(), "t", "a\tx\n".as_bytes(), "y").unwrap_err();
        match err {
            GraphError::Untyped { entity } => assert_eq!(entity, "b"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err =
            KnowledgeGraph::read("a\tr\tb\nbroken line\n".as_bytes(), "t", "a\tx\nb\tx\n".as_bytes(), "y").unwrap_err();
        match err {
            GraphError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn type_only_entities_are_isolated_nodes() {
        let g = graph("a\tr\tb\n", "a\tx\nb\tx\nlonely\ty\n");
        assert_eq!(g.entity_count(), 3);
        let lonely = g.entity_id("lonely").unwrap();
        assert_eq!(lonely, EntityId(2));
        let r = g.relation_id("r").unwrap();
        assert!(g.neighbors(lonely, r, Direction::Out).unwrap().is_empty());
        assert!(g.neighbors(lonely, r, Direction::In).unwrap().is_empty());
    }

    #[test]
    fn duplicates_are_dropped() {
        let g = graph("a\tr\tb\na\tr\tb\n", "a\tx\nb\tx\n");
        assert_eq!(g.triples().len(), 1);
    }

    #[test]
    fn neighbor_lookup() {
        let g = graph("a\tr\tb\na\tr\tc\n", "a\tx\nb\tx\nc\tx\n");
        let (a, b, c) = (EntityId(0), EntityId(1), EntityId(2));
        let r = RelationId(0);
        assert_eq!(g.neighbors(a, r, Direction::Out).unwrap(), &[b, c]);
        assert_eq!(g.neighbors(b, r, Direction::In).unwrap(), &[a]);
        assert!(g.neighbors(EntityId(9), r, Direction::Out).is_err());
        assert!(g.neighbors(a, RelationId(4), Direction::Out).is_err());
    }

    #[test]
    fn removal_rounds_and_is_deterministic() {
        let mut lines = String::new();
        let mut types = String::new();
        for i in 0..11 {
            types.push_str(&format!("e{i}\tt\n"));
        }
        for i in 0..10 {
            lines.push_str(&format!("e{i}\tr\te{}\n", i + 1));
        }
        let g = graph(&lines, &types);
        let a = g.remove_edges(0.1, 7).unwrap();
        let b = g.remove_edges(0.1, 7).unwrap();
        assert_eq!(a.removed.len(), 1);
        assert_eq!(a.removed, b.removed);
        assert_eq!(a.train_graph.triples(), b.train_graph.triples());
        assert_eq!(a.train_graph.entity_count(), g.entity_count());
        assert!(g.remove_edges(0.0, 1).is_err());
        assert!(g.remove_edges(1.0, 1).is_err());
    }
}
