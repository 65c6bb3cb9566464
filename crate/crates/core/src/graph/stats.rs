use std::collections::{BTreeSet, VecDeque};

use crate::{Error, Result};

use super::{EntityId, ModalityStore, SnapshotSequence, Triple};

pub const DEFAULT_M_REF: usize = 4;
pub const DEFAULT_N_REF: usize = 8;

/// Per-entity statistics for one snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphStats {
    /// Undirected multigraph degree over cumulative train triples.
    pub degree: Vec<u32>,
    /// Distinct neighbours / (n - 1).
    pub degree_centrality: Vec<f64>,
    /// Brandes betweenness normalized by (n-1)(n-2)/2.
    pub betweenness: Vec<f64>,
    /// Modality richness M(e).
    pub richness: Vec<f64>,
}

impl GraphStats {
    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }
}

/// Simple undirected adjacency (no self-loops, no parallel edges).
pub(crate) fn simple_adjacency(n: usize, triples: &[Triple]) -> Vec<Vec<u32>> {
    let mut sets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for t in triples {
        if t.head != t.tail {
            sets[t.head as usize].insert(t.tail);
            sets[t.tail as usize].insert(t.head);
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Normalized betweenness of an unweighted undirected graph (Brandes).
pub fn betweenness(adj: &[Vec<u32>]) -> Vec<f64> {
    let n = adj.len();
    let mut cb = vec![0.0; n];
    if n < 3 {
        return cb;
    }
    let mut sigma = vec![0.0f64; n];
    let mut dist = vec![-1i64; n];
    let mut delta = vec![0.0f64; n];
    let mut preds: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    for s in 0..n {
        for v in 0..n {
            sigma[v] = 0.0;
            dist[v] = -1;
            delta[v] = 0.0;
            preds[v].clear();
        }
        order.clear();
        sigma[s] = 1.0;
        dist[s] = 0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in &adj[v] {
                let w = w as usize;
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v as u32);
                }
            }
        }
        for &w in order.iter().rev() {
            for &v in &preds[w] {
                let v = v as usize;
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                cb[w] += delta[w];
            }
        }
    }
    // each unordered pair was counted from both endpoints
    let norm = ((n - 1) * (n - 2)) as f64 / 2.0;
    for v in cb.iter_mut() {
        *v = (*v / 2.0 / norm).clamp(0.0, 1.0);
    }
    cb
}

fn richness(store: &ModalityStore, e: EntityId, m_ref: usize, n_ref: usize) -> f64 {
    let v = if store.has_visual(e) {
        (store.visual_count(e) as f64 / m_ref as f64).min(1.0)
    } else {
        0.0
    };
    let t = if store.has_text(e) {
        (store.text_count(e) as f64 / n_ref as f64).min(1.0)
    } else {
        0.0
    };
    0.5 * v + 0.5 * t
}

/// Statistics of snapshot `i` over its cumulative train triples.
pub fn compute_graph_stats(
    seq: &SnapshotSequence,
    i: usize,
    store: &ModalityStore,
    m_ref: usize,
    n_ref: usize,
) -> Result<GraphStats> {
    if m_ref == 0 || n_ref == 0 {
        return Err(Error::InvalidArgument("m_ref and n_ref must be ≥ 1".into()));
    }
    let n = seq.get(i)?.entity_count;
    let train = seq.cumulative_train(i);
    let mut degree = vec![0u32; n];
    for t in &train {
        degree[t.head as usize] += 1;
        degree[t.tail as usize] += 1;
    }
    let adj = simple_adjacency(n, &train);
    let degree_centrality = if n >= 2 {
        adj.iter().map(|a| a.len() as f64 / (n - 1) as f64).collect()
    } else {
        vec![0.0; n]
    };
    let betweenness = betweenness(&adj);
    let richness = (0..n as EntityId).map(|e| richness(store, e, m_ref, n_ref)).collect();
    Ok(GraphStats {
        degree,
        degree_centrality,
        betweenness,
        richness,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{SnapshotSequence, SnapshotSplits};
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    /// All-pairs BFS; counts shortest paths through each vertex directly.
    fn brute_betweenness(adj: &[Vec<u32>]) -> Vec<f64> {
        let n = adj.len();
        let mut dist = vec![vec![usize::MAX; n]; n];
        let mut count = vec![vec![0.0f64; n]; n];
        for s in 0..n {
            dist[s][s] = 0;
            count[s][s] = 1.0;
            let mut frontier = vec![s];
            let mut d = 0;
            while !frontier.is_empty() {
                let mut next = Vec::new();
                for &v in &frontier {
                    for &w in &adj[v] {
                        let w = w as usize;
                        if dist[s][w] == usize::MAX {
                            dist[s][w] = d + 1;
                            next.push(w);
                        }
                        if dist[s][w] == d + 1 {
                            count[s][w] += count[s][v];
                        }
                    }
                }
                next.sort();
                next.dedup();
                frontier = next;
                d += 1;
            }
        }
        let mut out = vec![0.0; n];
        if n < 3 {
            return out;
        }
        for v in 0..n {
            for s in 0..n {
                for t in (s + 1)..n {
                    if s == v || t == v || dist[s][t] == usize::MAX {
                        continue;
                    }
                    if dist[s][v] != usize::MAX && dist[v][t] != usize::MAX && dist[s][v] + dist[v][t] == dist[s][t] {
                        out[v] += count[s][v] * count[v][t] / count[s][t];
                    }
                }
            }
            out[v] /= ((n - 1) * (n - 2)) as f64 / 2.0;
        }
        out
    }

    fn seq_of(n: usize, triples: Vec<Triple>) -> SnapshotSequence {
        SnapshotSequence::from_splits(vec![SnapshotSplits {
            entity_count: n,
            relation_count: 1,
            train: triples,
            delta_entities: (0..n as u32).collect(),
            ..Default::default()
        }])
        .unwrap()
    }

    #[test]
    fn path_center_has_full_betweenness() {
        let seq = seq_of(3, vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)]);
        let st = compute_graph_stats(&seq, 0, &ModalityStore::new(1, 1), 4, 8).unwrap();
        assert_eq!(st.betweenness, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn star_center_degree_centrality() {
        let edges = (1..5).map(|l| Triple::new(0, 0, l)).collect();
        let seq = seq_of(5, edges);
        let st = compute_graph_stats(&seq, 0, &ModalityStore::new(1, 1), 4, 8).unwrap();
        assert_eq!(st.degree_centrality[0], 1.0);
        assert_eq!(st.degree[0], 4);
        assert_eq!(st.degree_centrality[1], 0.25);
    }

    #[test]
    fn richness_arms() {
        let mut store = ModalityStore::new(2, 2);
        store
            .set_visual(0, Tensor::matrix(4, 2, vec![0.1; 8]).unwrap(), None)
            .unwrap();
        store
            .set_text(1, Tensor::matrix(4, 2, vec![0.1; 8]).unwrap(), None)
            .unwrap();
        let seq = seq_of(2, vec![Triple::new(0, 0, 1)]);
        let st = compute_graph_stats(&seq, 0, &store, 4, 8).unwrap();
        assert_eq!(st.richness, vec![0.5, 0.25]);
        assert_eq!(st.betweenness, vec![0.0, 0.0]);
    }

    #[test]
    fn multigraph_degree_counts_parallel_edges_and_loops() {
        let seq = seq_of(
            3,
            vec![Triple::new(0, 0, 1), Triple::new(1, 0, 0), Triple::new(2, 0, 2)],
        );
        let st = compute_graph_stats(&seq, 0, &ModalityStore::new(1, 1), 4, 8).unwrap();
        assert_eq!(st.degree, vec![2, 2, 2]);
        assert_eq!(st.degree_centrality, vec![0.5, 0.5, 0.0]);
    }

    proptest! {
        #[test]
        fn brandes_matches_brute_force(n in 1usize..50, edges in proptest::collection::vec((0u32..50, 0u32..50), 0..120)) {
            let triples: Vec<Triple> = edges
                .into_iter()
                .map(|(a, b)| Triple::new(a % n as u32, 0, b % n as u32))
                .collect();
            let adj = simple_adjacency(n, &triples);
            let fast = betweenness(&adj);
            let slow = brute_betweenness(&adj);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }
}
