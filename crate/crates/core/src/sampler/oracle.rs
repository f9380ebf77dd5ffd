//! Exact logical answering of conjunctive queries.
//!
//! Variable domains start from the entities of the variable's type (or from
//! the neighbour lists of adjacent constants), are pruned to arc
//! consistency, and each surviving target candidate is confirmed by a
//! backtracking search that always branches on the variable with the
//! fewest consistent candidates.

use crate::kg::{Direction, EntityId, KnowledgeGraph, RelationId};
use crate::query::{QueryGraph, QueryNode};

/// Exact answer set of `q` over `g`, sorted by id. Variables only bind to
/// entities of their declared type.
pub fn evaluate_query(g: &KnowledgeGraph, q: &QueryGraph) -> Vec<EntityId> {
    let n = q.nodes.len();
    if n == 0 || q.target >= n {
        return Vec::new();
    }
    for node in &q.nodes {
        match *node {
            QueryNode::Constant { entity } if entity.index() >= g.entity_count() => return Vec::new(),
            QueryNode::Variable { var_type } if var_type.index() >= g.type_count() => return Vec::new(),
            _ => {}
        }
    }
    if q.edges.iter().any(|e| e.relation.index() >= g.relation_count()) {
        return Vec::new();
    }

    let mut domains = match initial_domains(g, q) {
        Some(d) => d,
        None => return Vec::new(),
    };
    if !arc_consistency(g, q, &mut domains) {
        return Vec::new();
    }

    let mut assignment: Vec<Option<EntityId>> = q
        .nodes
        .iter()
        .map(|node| match *node {
            QueryNode::Constant { entity } => Some(entity),
            QueryNode::Variable { .. } => None,
        })
        .collect();

    let mut answers = Vec::new();
    for &candidate in &domains[q.target].clone() {
        assignment[q.target] = Some(candidate);
        if consistent_with_assigned(g, q, &assignment, q.target) && search(g, q, &domains, &mut assignment) {
            answers.push(candidate);
        }
        for (v, node) in q.nodes.iter().enumerate() {
            if node.is_variable() {
                assignment[v] = None;
            }
        }
    }
    answers
}

fn intersect_sorted(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().copied().filter(|x| large.binary_search(x).is_ok()).collect()
}

fn any_common(a: &[EntityId], b: &[EntityId]) -> bool {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().any(|x| large.binary_search(x).is_ok())
}

fn initial_domains(g: &KnowledgeGraph, q: &QueryGraph) -> Option<Vec<Vec<EntityId>>> {
    let mut domains = Vec::with_capacity(q.nodes.len());
    for (v, node) in q.nodes.iter().enumerate() {
        match *node {
            QueryNode::Constant { entity } => domains.push(vec![entity]),
            QueryNode::Variable { var_type } => {
                let mut domain: Option<Vec<EntityId>> = None;
                for e in &q.edges {
                    let list: &[EntityId] = match (e.src == v, e.dst == v) {
                        (false, true) => match q.nodes[e.src] {
                            QueryNode::Constant { entity } => g.neighbors_unchecked(entity, e.relation, Direction::Out),
                            _ => continue,
                        },
                        (true, false) => match q.nodes[e.dst] {
                            QueryNode::Constant { entity } => g.neighbors_unchecked(entity, e.relation, Direction::In),
                            _ => continue,
                        },
                        _ => continue,
                    };
                    let mut list = list.to_vec();
                    list.dedup();
                    domain = Some(match domain {
                        None => list,
                        Some(d) => intersect_sorted(&d, &list),
                    });
                }
                let domain = match domain {
                    Some(d) => d.into_iter().filter(|x| g.type_of(*x) == var_type).collect(),
                    None => g.entities_of_type(var_type).to_vec(),
                };
                domains.push(domain);
            }
        }
    }
    if domains.iter().any(Vec::is_empty) {
        return None;
    }
    Some(domains)
}

/// Prunes domains until every edge is arc consistent. Returns false when a
/// domain empties.
fn arc_consistency(g: &KnowledgeGraph, q: &QueryGraph, domains: &mut [Vec<EntityId>]) -> bool {
    let mut changed = true;
    while changed {
        changed = false;
        for e in &q.edges {
            let (src, dst, r) = (e.src, e.dst, e.relation);
            let kept: Vec<EntityId> = domains[src]
                .iter()
                .copied()
                .filter(|&x| any_common(g.neighbors_unchecked(x, r, Direction::Out), &domains[dst]))
                .collect();
            if kept.len() != domains[src].len() {
                domains[src] = kept;
                changed = true;
            }
            let kept: Vec<EntityId> = domains[dst]
                .iter()
                .copied()
                .filter(|&y| any_common(g.neighbors_unchecked(y, r, Direction::In), &domains[src]))
                .collect();
            if kept.len() != domains[dst].len() {
                domains[dst] = kept;
                changed = true;
            }
            if domains[src].is_empty() || domains[dst].is_empty() {
                return false;
            }
        }
    }
    true
}

fn consistent_with_assigned(g: &KnowledgeGraph, q: &QueryGraph, assignment: &[Option<EntityId>], v: usize) -> bool {
    q.edges.iter().filter(|e| e.src == v || e.dst == v).all(|e| match (assignment[e.src], assignment[e.dst]) {
        (Some(s), Some(o)) => g.has_edge(s, e.relation, o),
        _ => true,
    })
}

/// Candidates for unassigned variable `v` consistent with its assigned
/// neighbours.
fn candidates(
    g: &KnowledgeGraph,
    q: &QueryGraph,
    domains: &[Vec<EntityId>],
    assignment: &[Option<EntityId>],
    v: usize,
) -> Vec<EntityId> {
    let mut anchored: Option<(EntityId, RelationId, Direction)> = None;
    for e in &q.edges {
        if e.dst == v {
            if let Some(s) = assignment[e.src] {
                anchored = Some((s, e.relation, Direction::Out));
                break;
            }
        } else if e.src == v {
            if let Some(o) = assignment[e.dst] {
                anchored = Some((o, e.relation, Direction::In));
                break;
            }
        }
    }
    let base: Vec<EntityId> = match anchored {
        Some((u, r, dir)) => intersect_sorted(g.neighbors_unchecked(u, r, dir), &domains[v]),
        None => domains[v].clone(),
    };
    base.into_iter()
        .filter(|&x| {
            q.edges.iter().all(|e| {
                if e.dst == v {
                    assignment[e.src].is_none_or(|s| g.has_edge(s, e.relation, x))
                } else if e.src == v {
                    assignment[e.dst].is_none_or(|o| g.has_edge(x, e.relation, o))
                } else {
                    true
                }
            })
        })
        .collect()
}

fn search(g: &KnowledgeGraph, q: &QueryGraph, domains: &[Vec<EntityId>], assignment: &mut [Option<EntityId>]) -> bool {
    let mut best: Option<(usize, Vec<EntityId>)> = None;
    for v in 0..q.nodes.len() {
        if assignment[v].is_some() {
            continue;
        }
        let c = candidates(g, q, domains, assignment, v);
        if c.is_empty() {
            return false;
        }
        if best.as_ref().is_none_or(|(_, b)| c.len() < b.len()) {
            best = Some((v, c));
        }
    }
    let Some((v, cands)) = best else {
        return true;
    };
    for x in cands {
        assignment[v] = Some(x);
        if search(g, q, domains, assignment) {
            assignment[v] = None;
            return true;
        }
    }
    assignment[v] = None;
    false
}

/// Answers of the query after relaxing each intersection to a disjunction:
/// the union, over every incoming branch of every intersection node, of the
/// answers of the query keeping only that branch. `None` for chain-only
/// queries.
pub fn relaxed_answers(g: &KnowledgeGraph, q: &QueryGraph) -> Option<Vec<EntityId>> {
    let inter = q.intersection_nodes();
    if inter.is_empty() {
        return None;
    }
    let mut union: Vec<EntityId> = Vec::new();
    for &x in &inter {
        let incoming: Vec<usize> = (0..q.edges.len()).filter(|&i| q.edges[i].dst == x).collect();
        for &branch in &incoming {
            let keep: Vec<usize> = (0..q.edges.len()).filter(|i| !incoming.contains(i) || *i == branch).collect();
            let sub = q.restricted_to(&keep);
            union.extend(evaluate_query(g, &sub));
        }
    }
    union.sort_unstable();
    union.dedup();
    Some(union)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::TypeId;
    use crate::query::QueryEdge;

    fn g(triples: &str, types: &str) -> KnowledgeGraph {
        KnowledgeGraph::read(triples.as_bytes(), "t", types.as_bytes(), "y").unwrap()
    }

    /// Brute force over every binding of every variable.
    fn brute_force(g: &KnowledgeGraph, q: &QueryGraph) -> Vec<EntityId> {
        let vars: Vec<usize> = (0..q.nodes.len()).filter(|&v| q.nodes[v].is_variable()).collect();
        let mut assignment: Vec<EntityId> = q
            .nodes
            .iter()
            .map(|n| match *n {
                QueryNode::Constant { entity } => entity,
                QueryNode::Variable { .. } => EntityId(0),
            })
            .collect();
        let n = g.entity_count();
        let mut answers = Vec::new();
        let total = n.pow(vars.len() as u32);
        for code in 0..total {
            let mut c = code;
            for &v in &vars {
                assignment[v] = EntityId::from(c % n);
                c /= n;
            }
            let typed = vars.iter().all(|&v| match q.nodes[v] {
                QueryNode::Variable { var_type } => g.type_of(assignment[v]) == var_type,
                _ => true,
            });
            if typed && q.edges.iter().all(|e| g.has_edge(assignment[e.src], e.relation, assignment[e.dst])) {
                answers.push(assignment[q.target]);
            }
        }
        answers.sort_unstable();
        answers.dedup();
        answers
    }

    #[test]
    fn projects_query() {
        let kg = g(
            "alice\tworks_on\tt1\nbob\tworks_on\tt1\np1\trelated\tt1\np2\trelated\tt2\n",
            "alice\tperson\nbob\tperson\nt1\ttopic\nt2\ttopic\np1\tproject\np2\tproject\n",
        );
        let alice = kg.entity_id("alice").unwrap();
        let bob = kg.entity_id("bob").unwrap();
        let works = kg.relation_id("works_on").unwrap();
        let related = kg.relation_id("related").unwrap();
        let topic = TypeId(1);
        let project = TypeId(2);
        assert_eq!(kg.type_label(topic), "topic");
        assert_eq!(kg.type_label(project), "project");
        // Nodes: alice, bob, T, P (target).
        let q = QueryGraph {
            nodes: vec![
                QueryNode::Constant { entity: alice },
                QueryNode::Constant { entity: bob },
                QueryNode::Variable { var_type: topic },
                QueryNode::Variable { var_type: project },
            ],
            edges: vec![
                QueryEdge { src: 0, relation: works, dst: 2 },
                QueryEdge { src: 1, relation: works, dst: 2 },
                QueryEdge { src: 3, relation: related, dst: 2 },
            ],
            target: 3,
        };
        let p1 = kg.entity_id("p1").unwrap();
        assert_eq!(evaluate_query(&kg, &q), vec![p1]);
        assert_eq!(brute_force(&kg, &q), vec![p1]);
    }

    #[test]
    fn missing_edge_gives_empty_set() {
        let kg = g("a\tr\tb\n", "a\tx\nb\tx\n");
        let q = QueryGraph {
            nodes: vec![QueryNode::Constant { entity: EntityId(1) }, QueryNode::Variable { var_type: TypeId(0) }],
            edges: vec![QueryEdge { src: 0, relation: RelationId(0), dst: 1 }],
            target: 1,
        };
        assert!(evaluate_query(&kg, &q).is_empty());
    }

    #[test]
    fn intersection_with_shared_answer() {
        let kg = g("a\tr\tc\nb\ts\tc\n", "a\tx\nb\tx\nc\tx\n");
        let id = |l: &str| kg.entity_id(l).unwrap();
        let q = QueryGraph {
            nodes: vec![
                QueryNode::Constant { entity: id("a") },
                QueryNode::Constant { entity: id("b") },
                QueryNode::Variable { var_type: TypeId(0) },
            ],
            edges: vec![
                QueryEdge { src: 0, relation: kg.relation_id("r").unwrap(), dst: 2 },
                QueryEdge { src: 1, relation: kg.relation_id("s").unwrap(), dst: 2 },
            ],
            target: 2,
        };
        assert_eq!(evaluate_query(&kg, &q), vec![id("c")]);
    }

    #[test]
    fn relaxed_answers_are_branch_union() {
        // branch 1 (r from x) yields {a, b}; branch 2 (s from y) yields {b, c}.
        let kg = g("x\tr\ta\nx\tr\tb\ny\ts\tb\ny\ts\tc\n", "x\tsrc\ny\tsrc\na\tdst\nb\tdst\nc\tdst\n");
        let id = |l: &str| kg.entity_id(l).unwrap();
        let q = QueryGraph {
            nodes: vec![
                QueryNode::Constant { entity: id("x") },
                QueryNode::Constant { entity: id("y") },
                QueryNode::Variable { var_type: TypeId(1) },
            ],
            edges: vec![
                QueryEdge { src: 0, relation: kg.relation_id("r").unwrap(), dst: 2 },
                QueryEdge { src: 1, relation: kg.relation_id("s").unwrap(), dst: 2 },
            ],
            target: 2,
        };
        assert_eq!(evaluate_query(&kg, &q), vec![id("b")]);
        let mut expect = vec![id("a"), id("b"), id("c")];
        expect.sort();
        assert_eq!(relaxed_answers(&kg, &q).unwrap(), expect);
    }

    #[test]
    fn oracle_matches_brute_force_on_random_graphs() {
        use crate::query::Structure;
        use crate::synthetic::random_typed_graph;
        for seed in 0..6 {
            let kg = random_typed_graph(9, 2, 3, 28, seed);
            for s in Structure::ALL {
                let tpl = s.template();
                for r in 0..kg.relation_count() {
                    for e in 0..kg.entity_count() {
                        let mut q = tpl.instantiate(EntityId::from(e), TypeId(0), RelationId::from(r));
                        // vary relations and types across edges/nodes
                        for (k, edge) in q.edges.iter_mut().enumerate() {
                            edge.relation = RelationId::from((r + k) % kg.relation_count());
                        }
                        for (k, node) in q.nodes.iter_mut().enumerate() {
                            match node {
                                QueryNode::Variable { var_type } => *var_type = TypeId::from((e + k) % kg.type_count()),
                                QueryNode::Constant { entity } => {
                                    *entity = EntityId::from((e + 3 * k) % kg.entity_count())
                                }
                            }
                        }
                        assert_eq!(evaluate_query(&kg, &q), brute_force(&kg, &q), "{s} seed {seed}");
                    }
                }
            }
        }
    }
}
