//! Generated knowledge graphs for tests, examples and desk-scale
//! experiments.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple, TypeId};
use crate::query::Structure;
use crate::sampler::{QueryDataset, QuerySampler, SampleError, Split};
use crate::util::derive_seed;

/// Random typed graph. Entities get types round-robin; every relation has a
/// fixed (subject type, object type) signature. The first relations link
/// the types in a cycle, so paths of any length exist; the remaining
/// signatures are drawn at random. Triples
/// are drawn uniformly under those signatures until `n_triples` distinct
/// ones exist (or the signatures are saturated).
pub fn random_typed_graph(
    n_entities: usize,
    n_types: usize,
    n_relations: usize,
    n_triples: usize,
    seed: u64,
) -> KnowledgeGraph {
    assert!(n_entities >= n_types && n_types > 0 && n_relations > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let type_of: Vec<TypeId> = (0..n_entities).map(|i| TypeId::from(i % n_types)).collect();
    let by_type: Vec<Vec<EntityId>> =
        (0..n_types).map(|t| (0..n_entities).filter(|i| i % n_types == t).map(EntityId::from).collect()).collect();
    let signatures: Vec<(usize, usize)> =
        (0..n_relations)
            .map(|r| {
                if r < n_types {
                    (r, (r + 1) % n_types)
                } else {
                    (rng.gen_range(0..n_types), rng.gen_range(0..n_types))
                }
            })
            .collect();
    let capacity: usize = signatures.iter().map(|&(a, b)| by_type[a].len() * by_type[b].len()).sum();
    let target = n_triples.min(capacity);

    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(target);
    while triples.len() < target {
        let r = rng.gen_range(0..n_relations);
        let (st, ot) = signatures[r];
        let s = *by_type[st].choose(&mut rng).unwrap();
        let o = *by_type[ot].choose(&mut rng).unwrap();
        let t = Triple::new(s, RelationId::from(r), o);
        if seen.insert(t) {
            triples.push(t);
        }
    }
    KnowledgeGraph::from_parts(
        (0..n_entities).map(|i| format!("e{i}")).collect(),
        (0..n_relations).map(|i| format!("r{i}")).collect(),
        (0..n_types).map(|i| format!("t{i}")).collect(),
        type_of,
        triples,
    )
    .expect("generated parts are consistent")
}

/// A layered graph: `layers` entity types of `width` entities each, and one
/// relation from layer `l` to layer `l + 1`. Each relation is the union of
/// `fanout` random bijections, so every entity has exactly `fanout`
/// successors and `fanout` predecessors, and no two entities of a layer
/// can be told apart by local structure alone. The answer to a
/// chain query over `k` hops therefore depends on the anchor's identity
/// `k` hops away.
pub fn layered_graph(layers: usize, width: usize, fanout: usize, seed: u64) -> KnowledgeGraph {
    assert!(layers >= 2 && fanout <= width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entity = |layer: usize, i: usize| EntityId::from(layer * width + i);
    let mut triples = Vec::new();
    for l in 0..layers - 1 {
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        let mut added = 0;
        while added < fanout {
            let mut perm: Vec<usize> = (0..width).collect();
            perm.shuffle(&mut rng);
            if (0..width).any(|i| seen.contains(&(i, perm[i]))) {
                continue;
            }
            for (i, &j) in perm.iter().enumerate() {
                seen.insert((i, j));
                triples.push(Triple::new(entity(l, i), RelationId::from(l), entity(l + 1, j)));
            }
            added += 1;
        }
    }
    KnowledgeGraph::from_parts(
        (0..layers * width).map(|i| format!("L{}_{}", i / width, i % width)).collect(),
        (0..layers - 1).map(|l| format!("next{l}")).collect(),
        (0..layers).map(|l| format!("layer{l}")).collect(),
        (0..layers * width).map(|i| TypeId::from(i / width)).collect(),
        triples,
    )
    .expect("generated parts are consistent")
}

/// A typed graph with latent communities, so that held-out edges are
/// predictable from the rest. Each of the `n_types` types has `per_type`
/// entities, entity `i` belonging to community `i % communities`. Relation
/// `r` links type `r % n_types` to type `(r + 1 + r / n_types) % n_types`
/// and maps community `c` to community `(c + r) % communities`: each source
/// entity gets `degree` distinct objects, drawn from the mapped community
/// with probability `homophily` and uniformly otherwise.
pub fn community_graph(
    n_types: usize,
    per_type: usize,
    communities: usize,
    n_relations: usize,
    degree: usize,
    homophily: f64,
    seed: u64,
) -> KnowledgeGraph {
    assert!(n_types > 0 && communities > 0 && per_type >= communities && n_relations > 0);
    assert!(degree <= per_type / communities, "degree exceeds community size");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entity = |t: usize, i: usize| EntityId::from(t * per_type + i);
    let members = |c: usize| (0..per_type).filter(move |i| i % communities == c);
    let mut triples = Vec::new();
    for r in 0..n_relations {
        let (st, ot) = (r % n_types, (r + 1 + r / n_types) % n_types);
        for i in 0..per_type {
            let home: Vec<usize> = members((i % communities + r) % communities).collect();
            let mut chosen = HashSet::new();
            while chosen.len() < degree {
                let j =
                    if rng.gen_bool(homophily) { *home.choose(&mut rng).unwrap() } else { rng.gen_range(0..per_type) };
                if !(st == ot && i == j) {
                    chosen.insert(j);
                }
            }
            let mut chosen: Vec<usize> = chosen.into_iter().collect();
            chosen.sort_unstable();
            triples.extend(chosen.into_iter().map(|j| Triple::new(entity(st, i), RelationId::from(r), entity(ot, j))));
        }
    }
    KnowledgeGraph::from_parts(
        (0..n_types * per_type).map(|i| format!("t{}_e{}", i / per_type, i % per_type)).collect(),
        (0..n_relations).map(|r| format!("r{r}")).collect(),
        (0..n_types).map(|t| format!("t{t}")).collect(),
        (0..n_types * per_type).map(|i| TypeId::from(i / per_type)).collect(),
        triples,
    )
    .expect("generated parts are consistent")
}

fn from_fixture(triples: &str, types: &str) -> KnowledgeGraph {
    KnowledgeGraph::read(triples.as_bytes(), "fixture", types.as_bytes(), "fixture").expect("fixture parses")
}

/// Five entities, two types, two relations.
pub fn five_entity_graph() -> KnowledgeGraph {
    from_fixture(
        "a\tlikes\tx\na\tlikes\ty\nb\tlikes\ty\nb\tknows\ta\nc\tknows\ta\nc\tlikes\tx\nc\tknows\tb\n",
        "a\tperson\nb\tperson\nc\tperson\nx\tthing\ny\tthing\n",
    )
}

/// Ten entities (four people, six items), two relations.
pub fn ten_entity_graph() -> KnowledgeGraph {
    from_fixture(
        "p0\tbuys\ti0\np0\tbuys\ti1\np1\tbuys\ti2\np1\tbuys\ti3\np2\tbuys\ti4\np2\tbuys\ti0\n\
         p3\tbuys\ti5\np3\tbuys\ti2\np0\tfollows\tp1\np1\tfollows\tp2\np2\tfollows\tp3\np3\tfollows\tp0\n",
        "p0\tperson\np1\tperson\np2\tperson\np3\tperson\ni0\titem\ni1\titem\ni2\titem\ni3\titem\ni4\titem\ni5\titem\n",
    )
}

/// `per_structure` queries of each structure sampled from `g` itself, with
/// query `i` of structure `s` drawn from `derive_seed(seed, [s, i])`.
///
/// Unlike [`crate::sampler::build_datasets`] there is no held-out edge
/// requirement, so every split tests recall of the observed graph.
pub fn held_in_dataset(
    g: &KnowledgeGraph,
    split: Split,
    structures: &[Structure],
    per_structure: usize,
    seed: u64,
) -> Result<QueryDataset, SampleError> {
    let sampler = QuerySampler::new(g);
    let mut samples = Vec::with_capacity(structures.len() * per_structure);
    for &s in structures {
        for i in 0..per_structure {
            samples.push(sampler.sample(s, derive_seed(seed, &[s.index() as u64, i as u64]))?);
        }
    }
    Ok(QueryDataset { split, samples, source_seed: seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Direction;

    #[test]
    fn layered_graph_is_regular() {
        let g = layered_graph(4, 12, 3, 5);
        assert_eq!(g.entity_count(), 48);
        assert_eq!(g.triples().len(), 3 * 12 * 3);
        for l in 0..3 {
            for i in 0..12 {
                let e = EntityId::from(l * 12 + i);
                assert_eq!(g.neighbors(e, RelationId::from(l), Direction::Out).unwrap().len(), 3);
                let f = EntityId::from((l + 1) * 12 + i);
                assert_eq!(g.neighbors(f, RelationId::from(l), Direction::In).unwrap().len(), 3);
            }
        }
    }

    #[test]
    fn random_graph_respects_counts() {
        let g = random_typed_graph(50, 3, 5, 300, 1);
        assert_eq!(g.entity_count(), 50);
        assert_eq!(g.type_count(), 3);
        assert_eq!(g.triples().len(), 300);
    }

    #[test]
    fn fixtures_load() {
        let five = five_entity_graph();
        assert_eq!((five.entity_count(), five.type_count(), five.relation_count()), (5, 2, 2));
        let ten = ten_entity_graph();
        assert_eq!(ten.entity_count(), 10);
    }
}
