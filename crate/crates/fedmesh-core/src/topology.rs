//! Overlay graph construction: who exchanges models with whom.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{TopologyKind, TopologySpec};

/// Default edge probability for the random topology.
pub const DEFAULT_EDGE_PROBABILITY: f64 = 0.5;
/// Connectivity rejection-sampling budget for random graphs.
const MAX_RANDOM_ATTEMPTS: u64 = 1000;

/// Undirected overlay graph. Edges are stored as `(i, j)` with `i < j`,
/// sorted; the structure is immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyGraph {
    pub n: u16,
    pub edges: Vec<(u16, u16)>,
    pub kind: TopologyKind,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("ring topology requires at least 3 nodes, have {0}")]
    RingTooSmall(u16),
    #[error("topology requires at least 1 node")]
    Empty,
    #[error("hub id {hub} out of range for {n} nodes")]
    HubOutOfRange { hub: u16, n: u16 },
    #[error("random topology failed to connect within {0} attempts")]
    NotConnected(u64),
    #[error("node id {id} out of range for {n} nodes")]
    NodeOutOfRange { id: u16, n: u16 },
}

/// Builds the overlay for `n` nodes.
///
/// `random` draws an Erdős–Rényi G(n, p) graph and regenerates with an
/// incremented sub-seed until connected. A single-node graph is allowed
/// (empty edge set) so degenerate one-node scenarios can run.
pub fn build_topology(spec: &TopologySpec, n: u16) -> Result<TopologyGraph, TopologyError> {
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    let edges = match spec.kind {
        TopologyKind::Fully => {
            let mut edges = Vec::with_capacity(n as usize * (n as usize - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    edges.push((i, j));
                }
            }
            edges
        }
        TopologyKind::Star => {
            let hub = spec.hub_id.unwrap_or(0);
            if hub >= n {
                return Err(TopologyError::HubOutOfRange { hub, n });
            }
            let mut edges: Vec<(u16, u16)> = (0..n)
                .filter(|&i| i != hub)
                .map(|i| (hub.min(i), hub.max(i)))
                .collect();
            edges.sort_unstable();
            edges
        }
        TopologyKind::Ring => {
            if n < 3 {
                return Err(TopologyError::RingTooSmall(n));
            }
            let mut edges: Vec<(u16, u16)> = (0..n - 1).map(|i| (i, i + 1)).collect();
            edges.push((0, n - 1));
            edges.sort_unstable();
            edges
        }
        TopologyKind::Random => {
            let p = spec.edge_probability.unwrap_or(DEFAULT_EDGE_PROBABILITY);
            let mut attempt = 0u64;
            loop {
                if attempt >= MAX_RANDOM_ATTEMPTS {
                    return Err(TopologyError::NotConnected(MAX_RANDOM_ATTEMPTS));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt));
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in (i + 1)..n {
                        if rng.random::<f64>() < p {
                            edges.push((i, j));
                        }
                    }
                }
                if connected(n, &edges) {
                    break edges;
                }
                attempt += 1;
            }
        }
    };
    Ok(TopologyGraph {
        n,
        edges,
        kind: spec.kind,
        seed: spec.seed,
    })
}

/// Neighbor ids of `id`, ascending. Ascending order fixes message ordering
/// for reproducibility.
pub fn neighbors(g: &TopologyGraph, id: u16) -> Result<Vec<u16>, TopologyError> {
    if id >= g.n {
        return Err(TopologyError::NodeOutOfRange { id, n: g.n });
    }
    let mut out: Vec<u16> = g
        .edges
        .iter()
        .filter_map(|&(a, b)| {
            if a == id {
                Some(b)
            } else if b == id {
                Some(a)
            } else {
                None
            }
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// True iff every node is reachable from node 0.
pub fn is_connected(g: &TopologyGraph) -> bool {
    connected(g.n, &g.edges)
}

fn connected(n: u16, edges: &[(u16, u16)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n as usize];
    for &(a, b) in edges {
        adj[a as usize].push(b);
        adj[b as usize].push(a);
    }
    let mut seen = vec![false; n as usize];
    let mut queue = std::collections::VecDeque::from([0u16]);
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v as usize] {
            if !seen[w as usize] {
                seen[w as usize] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == n as usize
}

impl TopologyGraph {
    pub fn degree(&self, id: u16) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == id || b == id).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TopologyKind) -> TopologySpec {
        TopologySpec {
            kind,
            edge_probability: None,
            hub_id: None,
            seed: 0,
        }
    }

    /// Independent connectivity oracle: union-find over the edge set.
    fn uf_connected(n: u16, edges: &[(u16, u16)]) -> bool {
        let mut parent: Vec<u16> = (0..n).collect();
        fn find(parent: &mut Vec<u16>, x: u16) -> u16 {
            let mut r = x;
            while parent[r as usize] != r {
                r = parent[r as usize];
            }
            let mut c = x;
            while parent[c as usize] != r {
                let next = parent[c as usize];
                parent[c as usize] = r;
                c = next;
            }
            r
        }
        for &(a, b) in edges {
            let ra = find(&mut parent, a);
            let rb = find(&mut parent, b);
            parent[ra as usize] = rb;
        }
        let root = find(&mut parent, 0);
        (0..n).all(|i| find(&mut parent, i) == root)
    }

    #[test]
    fn ring_of_four() {
        let g = build_topology(&spec(TopologyKind::Ring), 4).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
        for i in 0..4 {
            assert_eq!(g.degree(i), 2);
        }
    }

    #[test]
    fn ring_too_small() {
        assert!(matches!(
            build_topology(&spec(TopologyKind::Ring), 2),
            Err(TopologyError::RingTooSmall(2))
        ));
    }

    #[test]
    fn star_of_four_hub_zero() {
        let g = build_topology(&spec(TopologyKind::Star), 4).unwrap();
        assert_eq!(g.degree(0), 3);
        for i in 1..4 {
            assert_eq!(g.degree(i), 1);
        }
    }

    #[test]
    fn star_hub_out_of_range() {
        let mut s = spec(TopologyKind::Star);
        s.hub_id = Some(9);
        assert!(matches!(
            build_topology(&s, 4),
            Err(TopologyError::HubOutOfRange { hub: 9, n: 4 })
        ));
    }

    #[test]
    fn fully_connected_four_has_six_edges() {
        let g = build_topology(&spec(TopologyKind::Fully), 4).unwrap();
        assert_eq!(g.edges.len(), 6);
    }

    #[test]
    fn random_graph_is_connected() {
        let mut s = spec(TopologyKind::Random);
        s.seed = 42;
        s.edge_probability = Some(0.5);
        let g = build_topology(&s, 6).unwrap();
        assert!(uf_connected(6, &g.edges));
    }

    #[test]
    fn neighbor_sets() {
        let ring = build_topology(&spec(TopologyKind::Ring), 4).unwrap();
        assert_eq!(neighbors(&ring, 2).unwrap(), vec![1, 3]);
        let star = build_topology(&spec(TopologyKind::Star), 4).unwrap();
        assert_eq!(neighbors(&star, 0).unwrap(), vec![1, 2, 3]);
        let fully = build_topology(&spec(TopologyKind::Fully), 4).unwrap();
        assert_eq!(neighbors(&fully, 1).unwrap(), vec![0, 2, 3]);
        assert!(neighbors(&fully, 4).is_err());
    }

    #[test]
    fn neighbors_are_symmetric() {
        let mut s = spec(TopologyKind::Random);
        s.seed = 7;
        let g = build_topology(&s, 8).unwrap();
        for i in 0..8 {
            for j in neighbors(&g, i).unwrap() {
                assert!(neighbors(&g, j).unwrap().contains(&i));
            }
        }
    }

    #[test]
    fn is_connected_basics() {
        let ring = build_topology(&spec(TopologyKind::Ring), 5).unwrap();
        assert!(is_connected(&ring));
        let disconnected = TopologyGraph {
            n: 2,
            edges: vec![],
            kind: TopologyKind::Random,
            seed: 0,
        };
        assert!(!is_connected(&disconnected));
    }

    #[test]
    fn random_rejection_loop_connects_many_seeds() {
        for seed in 0..100u64 {
            let n = 2 + (seed % 15) as u16;
            let s = TopologySpec {
                kind: TopologyKind::Random,
                edge_probability: Some(0.5),
                hub_id: None,
                seed,
            };
            let g = build_topology(&s, n).unwrap();
            assert!(uf_connected(n, &g.edges), "seed {seed} n {n}");
            assert!(is_connected(&g));
        }
    }

    #[test]
    fn degree_sum_is_twice_edge_count() {
        for kind in [TopologyKind::Fully, TopologyKind::Star, TopologyKind::Ring, TopologyKind::Random] {
            for n in 3..10u16 {
                let g = build_topology(&spec(kind), n).unwrap();
                let degree_sum: usize = (0..n).map(|i| g.degree(i)).sum();
                assert_eq!(degree_sum, 2 * g.edges.len(), "{kind} n={n}");
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let mut s = spec(TopologyKind::Random);
        s.seed = 99;
        let a = build_topology(&s, 9).unwrap();
        let b = build_topology(&s, 9).unwrap();
        assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn no_self_loops_or_duplicates() {
        for seed in 0..20u64 {
            let s = TopologySpec {
                kind: TopologyKind::Random,
                edge_probability: Some(0.4),
                hub_id: None,
                seed,
            };
            let g = build_topology(&s, 10).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            for &(a, b) in &g.edges {
                assert!(a < b);
                assert!(seen.insert((a, b)));
            }
        }
    }

    #[test]
    fn single_node_graph_is_trivially_connected() {
        let g = build_topology(&spec(TopologyKind::Fully), 1).unwrap();
        assert!(g.edges.is_empty());
        assert!(is_connected(&g));
    }
}
