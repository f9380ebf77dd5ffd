//! Query graphs for conjunctive queries, the seven benchmark structures and
//! their JSON Lines serialization.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, RelationId, TypeId};

/// A node of a query graph: either a constant entity (anchor) or a typed
/// variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum QueryNode {
    #[serde(rename = "const")]
    Constant { entity: EntityId },
    #[serde(rename = "var")]
    Variable {
        #[serde(rename = "type")]
        var_type: TypeId,
    },
}

impl QueryNode {
    pub fn is_variable(&self) -> bool {
        matches!(self, QueryNode::Variable { .. })
    }
}

/// One predicate `relation(src, dst)`. Serialized as `[src, rel, dst]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, RelationId, usize)", into = "(usize, RelationId, usize)")]
pub struct QueryEdge {
    pub src: usize,
    pub relation: RelationId,
    pub dst: usize,
}

impl From<(usize, RelationId, usize)> for QueryEdge {
    fn from((src, relation, dst): (usize, RelationId, usize)) -> Self {
        QueryEdge { src, relation, dst }
    }
}

impl From<QueryEdge> for (usize, RelationId, usize) {
    fn from(e: QueryEdge) -> Self {
        (e.src, e.relation, e.dst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryGraph {
    pub nodes: Vec<QueryNode>,
    pub edges: Vec<QueryEdge>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    TargetOutOfBounds(usize),
    TargetNotVariable,
    EdgeOutOfBounds(usize),
    SelfLoop(usize),
    Cyclic,
    Disconnected,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "query has no nodes"),
            Violation::TargetOutOfBounds(t) => write!(f, "target index {t} out of bounds"),
            Violation::TargetNotVariable => write!(f, "target is not a variable"),
            Violation::EdgeOutOfBounds(e) => write!(f, "edge {e} has an endpoint out of bounds"),
            Violation::SelfLoop(e) => write!(f, "edge {e} is a self loop"),
            Violation::Cyclic => write!(f, "query graph has a directed cycle"),
            Violation::Disconnected => write!(f, "query graph is not connected"),
        }
    }
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("invalid query graph: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("unknown query structure `{0}`")]
    UnknownStructure(String),
}

impl QueryGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Checks acyclicity, connectivity, endpoint bounds and that the target
    /// is a variable. All violations are reported.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        let n = self.nodes.len();
        if n == 0 {
            return Err(vec![Violation::Empty]);
        }
        if self.target >= n {
            violations.push(Violation::TargetOutOfBounds(self.target));
        } else if !self.nodes[self.target].is_variable() {
            violations.push(Violation::TargetNotVariable);
        }
        let mut edges_ok = true;
        for (i, e) in self.edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                violations.push(Violation::EdgeOutOfBounds(i));
                edges_ok = false;
            } else if e.src == e.dst {
                violations.push(Violation::SelfLoop(i));
                edges_ok = false;
            }
        }
        if edges_ok {
            if !is_acyclic(n, &self.edges) {
                violations.push(Violation::Cyclic);
            }
            if !is_connected(n, &self.edges) {
                violations.push(Violation::Disconnected);
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// Longest shortest path between two nodes of the undirected view.
    pub fn diameter(&self) -> Result<usize, QueryError> {
        if let Err(v) = self.validate() {
            return Err(QueryError::Invalid(v));
        }
        undirected_diameter(self.nodes.len(), &self.edges).ok_or(QueryError::Invalid(vec![Violation::Disconnected]))
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.dst == node).count()
    }

    /// Nodes with two or more incoming predicates.
    pub fn intersection_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&v| self.in_degree(v) >= 2).collect()
    }

    /// The same query with nodes relisted: node `order[i]` of `self` becomes
    /// node `i` of the result. Edge order is preserved.
    pub fn permuted(&self, order: &[usize]) -> QueryGraph {
        assert_eq!(order.len(), self.nodes.len());
        let mut new_index = vec![usize::MAX; order.len()];
        for (i, &old) in order.iter().enumerate() {
            new_index[old] = i;
        }
        QueryGraph {
            nodes: order.iter().map(|&old| self.nodes[old]).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| QueryEdge { src: new_index[e.src], relation: e.relation, dst: new_index[e.dst] })
                .collect(),
            target: new_index[self.target],
        }
    }

    /// Keeps only the listed edges, then restricts to the connected
    /// component of the target. Node order is preserved.
    pub fn restricted_to(&self, keep_edges: &[usize]) -> QueryGraph {
        let edges: Vec<QueryEdge> = keep_edges.iter().map(|&i| self.edges[i]).collect();
        let n = self.nodes.len();
        let adj = undirected_adjacency(n, &edges);
        let mut reach = vec![false; n];
        let mut queue = VecDeque::from([self.target]);
        reach[self.target] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !reach[u] {
                    reach[u] = true;
                    queue.push_back(u);
                }
            }
        }
        let mut new_index = vec![usize::MAX; n];
        let mut nodes = Vec::new();
        for v in 0..n {
            if reach[v] {
                new_index[v] = nodes.len();
                nodes.push(self.nodes[v]);
            }
        }
        QueryGraph {
            nodes,
            edges: edges
                .iter()
                .filter(|e| reach[e.src])
                .map(|e| QueryEdge { src: new_index[e.src], relation: e.relation, dst: new_index[e.dst] })
                .collect(),
            target: new_index[self.target],
        }
    }
}

fn undirected_adjacency(n: usize, edges: &[QueryEdge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.src].push(e.dst);
        adj[e.dst].push(e.src);
    }
    adj
}

fn is_acyclic(n: usize, edges: &[QueryEdge]) -> bool {
    let mut indeg = vec![0usize; n];
    for e in edges {
        indeg[e.dst] += 1;
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = queue.pop_front() {
        seen += 1;
        for e in edges.iter().filter(|e| e.src == v) {
            indeg[e.dst] -= 1;
            if indeg[e.dst] == 0 {
                queue.push_back(e.dst);
            }
        }
    }
    seen == n
}

fn bfs_distances(adj: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        let d = dist[v].unwrap();
        for &u in &adj[v] {
            if dist[u].is_none() {
                dist[u] = Some(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

fn is_connected(n: usize, edges: &[QueryEdge]) -> bool {
    n == 0 || bfs_distances(&undirected_adjacency(n, edges), 0).iter().all(Option::is_some)
}

/// `None` when the undirected view is disconnected.
fn undirected_diameter(n: usize, edges: &[QueryEdge]) -> Option<usize> {
    let adj = undirected_adjacency(n, edges);
    let mut best = 0;
    for v in 0..n {
        for d in bfs_distances(&adj, v) {
            best = best.max(d?);
        }
    }
    Some(best)
}

/// The seven benchmark query shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Structure {
    OneChain,
    TwoChain,
    ThreeChain,
    TwoInter,
    ThreeInter,
    ThreeInterChain,
    ThreeChainInter,
}

impl Structure {
    pub const ALL: [Structure; 7] = [
        Structure::OneChain,
        Structure::TwoChain,
        Structure::ThreeChain,
        Structure::TwoInter,
        Structure::ThreeInter,
        Structure::ThreeInterChain,
        Structure::ThreeChainInter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Structure::OneChain => "1-chain",
            Structure::TwoChain => "2-chain",
            Structure::ThreeChain => "3-chain",
            Structure::TwoInter => "2-inter",
            Structure::ThreeInter => "3-inter",
            Structure::ThreeInterChain => "3-inter_chain",
            Structure::ThreeChainInter => "3-chain_inter",
        }
    }

    pub fn index(self) -> usize {
        Structure::ALL.iter().position(|s| *s == self).unwrap()
    }

    pub fn is_chain(self) -> bool {
        matches!(self, Structure::OneChain | Structure::TwoChain | Structure::ThreeChain)
    }

    pub fn has_intersection(self) -> bool {
        !self.is_chain()
    }

    pub fn template(self) -> Template {
        use Slot::*;
        // Anchors first, target last; edges are (src, dst) slot pairs.
        let (slots, edges): (Vec<Slot>, Vec<(usize, usize)>) = match self {
            Structure::OneChain => (vec![Anchor, Target], vec![(0, 1)]),
            Structure::TwoChain => (vec![Anchor, Variable, Target], vec![(0, 1), (1, 2)]),
            Structure::ThreeChain => (vec![Anchor, Variable, Variable, Target], vec![(0, 1), (1, 2), (2, 3)]),
            Structure::TwoInter => (vec![Anchor, Anchor, Target], vec![(0, 2), (1, 2)]),
            Structure::ThreeInter => (vec![Anchor, Anchor, Anchor, Target], vec![(0, 3), (1, 3), (2, 3)]),
            Structure::ThreeInterChain => (vec![Anchor, Anchor, Variable, Target], vec![(0, 3), (1, 2), (2, 3)]),
            Structure::ThreeChainInter => (vec![Anchor, Anchor, Variable, Target], vec![(0, 2), (1, 2), (2, 3)]),
        };
        Template { structure: self, target: slots.len() - 1, slots, edges }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Structure {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Structure::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| QueryError::UnknownStructure(s.to_string()))
    }
}

impl Serialize for Structure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Structure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Anchor,
    Variable,
    Target,
}

/// A query shape with unbound entities and relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub structure: Structure,
    pub slots: Vec<Slot>,
    pub edges: Vec<(usize, usize)>,
    pub target: usize,
}

impl Template {
    pub fn node_count(&self) -> usize {
        self.slots.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.slots.iter().filter(|s| **s == Slot::Anchor).count()
    }

    /// Binds the template with placeholder entity/type/relation ids.
    pub fn instantiate(&self, entity: EntityId, var_type: TypeId, relation: RelationId) -> QueryGraph {
        QueryGraph {
            nodes: self
                .slots
                .iter()
                .map(|s| match s {
                    Slot::Anchor => QueryNode::Constant { entity },
                    _ => QueryNode::Variable { var_type },
                })
                .collect(),
            edges: self.edges.iter().map(|&(src, dst)| QueryEdge { src, relation, dst }).collect(),
            target: self.target,
        }
    }

    pub fn diameter(&self) -> usize {
        self.instantiate(EntityId(0), TypeId(0), RelationId(0)).diameter().expect("templates are valid")
    }
}

pub fn structure_templates() -> Vec<Template> {
    Structure::ALL.iter().map(|s| s.template()).collect()
}

/// A query with its ground-truth answer and sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuerySample {
    pub structure: Structure,
    #[serde(flatten)]
    pub query: QueryGraph,
    pub answer: EntityId,
    #[serde(rename = "neg")]
    pub negative: EntityId,
    #[serde(rename = "hard_neg")]
    pub hard_negative: Option<EntityId>,
}

impl QuerySample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("query samples always serialize")
    }

    pub fn from_json_line(line: &str) -> serde_json::Result<Self> {
        serde_json::from_str(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_templates() {
        let t = structure_templates();
        assert_eq!(t.len(), 7);
        let one = Structure::OneChain.template();
        assert_eq!((one.node_count(), one.edge_count(), one.anchor_count()), (2, 1, 1));
        let ci = Structure::ThreeChainInter.template();
        assert_eq!((ci.node_count(), ci.edge_count(), ci.anchor_count()), (4, 3, 2));
    }

    #[test]
    fn template_diameters() {
        let expect = [
            (Structure::OneChain, 1),
            (Structure::TwoChain, 2),
            (Structure::ThreeChain, 3),
            (Structure::TwoInter, 2),
            (Structure::ThreeInter, 2),
            (Structure::ThreeInterChain, 3),
            (Structure::ThreeChainInter, 2),
        ];
        for (s, d) in expect {
            assert_eq!(s.template().diameter(), d, "{s}");
        }
    }

    #[test]
    fn target_is_last_and_has_no_outgoing_edge() {
        for t in structure_templates() {
            assert_eq!(t.target, t.node_count() - 1);
            assert!(t.edges.iter().all(|&(src, _)| src != t.target));
            assert!(t.instantiate(EntityId(1), TypeId(0), RelationId(0)).validate().is_ok());
        }
    }

    #[test]
    fn two_cycle_is_rejected() {
        let mut q = Structure::OneChain.template().instantiate(EntityId(0), TypeId(0), RelationId(0));
        q.edges.push(QueryEdge { src: 1, relation: RelationId(0), dst: 0 });
        assert_eq!(q.validate(), Err(vec![Violation::Cyclic]));
    }

    #[test]
    fn disjoint_chains_are_rejected() {
        let one = Structure::OneChain.template().instantiate(EntityId(0), TypeId(0), RelationId(0));
        let mut q = one.clone();
        q.nodes.extend(one.nodes.iter().copied());
        q.edges.push(QueryEdge { src: 2, relation: RelationId(0), dst: 3 });
        assert_eq!(q.validate(), Err(vec![Violation::Disconnected]));
        assert!(q.diameter().is_err());
    }

    #[test]
    fn constant_target_is_rejected() {
        let mut q = Structure::OneChain.template().instantiate(EntityId(0), TypeId(0), RelationId(0));
        q.target = 0;
        assert_eq!(q.validate(), Err(vec![Violation::TargetNotVariable]));
    }

    #[test]
    fn json_line_shape() {
        let s = QuerySample {
            structure: Structure::TwoInter,
            query: QueryGraph {
                nodes: vec![
                    QueryNode::Constant { entity: EntityId(4) },
                    QueryNode::Constant { entity: EntityId(5) },
                    QueryNode::Variable { var_type: TypeId(1) },
                ],
                edges: vec![
                    QueryEdge { src: 0, relation: RelationId(2), dst: 2 },
                    QueryEdge { src: 1, relation: RelationId(3), dst: 2 },
                ],
                target: 2,
            },
            answer: EntityId(7),
            negative: EntityId(8),
            hard_negative: None,
        };
        let line = s.to_json_line();
        assert_eq!(
            line,
            r#"{"structure":"2-inter","nodes":[{"kind":"const","entity":4},{"kind":"const","entity":5},{"kind":"var","type":1}],"edges":[[0,2,2],[1,3,2]],"target":2,"answer":7,"neg":8,"hard_neg":null}"#
        );
        assert_eq!(QuerySample::from_json_line(&line).unwrap(), s);
    }
}
