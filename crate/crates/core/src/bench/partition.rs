//! Entity arrival order and the three evolution strategies.

use std::collections::VecDeque;

use rand::Rng;

use super::BaseKG;
use crate::seed;

/// Undirected neighbour lists (sorted, deduplicated, self-loops dropped).
pub fn undirected_adjacency(base: &BaseKG) -> Vec<Vec<u32>> {
    let mut adj = vec![Vec::new(); base.entity_count];
    for t in &base.triples {
        if t.head != t.tail {
            adj[t.head as usize].push(t.tail);
            adj[t.tail as usize].push(t.head);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

/// Seeded BFS from a random entity among the highest-degree tenth; components
/// the walk does not reach are started from their highest-degree entity.
/// Returns base entity ids in arrival order.
pub fn arrival_order(base: &BaseKG, rng_seed: u64) -> Vec<u32> {
    let n = base.entity_count;
    if n == 0 {
        return Vec::new();
    }
    let adj = undirected_adjacency(base);
    let mut by_degree: Vec<u32> = (0..n as u32).collect();
    by_degree.sort_by(|&a, &b| adj[b as usize].len().cmp(&adj[a as usize].len()).then(a.cmp(&b)));
    let top = (n / 10).max(1);
    let mut rng = seed::rng(rng_seed, "bench.root", 0);
    let root = by_degree[rng.gen_range(0..top)];
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    let mut starts = std::iter::once(root).chain(by_degree.iter().copied());
    while order.len() < n {
        let Some(s) = starts.find(|&s| !seen[s as usize]) else {
            break;
        };
        seen[s as usize] = true;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &v in &adj[u as usize] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    order
}

/// Position of each base entity in `order`.
pub fn arrival_rank(order: &[u32]) -> Vec<usize> {
    let mut rank = vec![0; order.len()];
    for (k, &e) in order.iter().enumerate() {
        rank[e as usize] = k;
    }
    rank
}

/// Cumulative entity boundaries `b_0 < … = n` for the entity strategy.
pub fn entity_boundaries(n: usize, cumulative: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = cumulative
        .iter()
        .map(|f| ((f * n as f64).round() as usize).min(n))
        .collect();
    if let Some(l) = out.last_mut() {
        *l = n;
    }
    for k in 1..out.len() {
        out[k] = out[k].max(out[k - 1]);
    }
    out
}

/// Boundaries chosen greedily so that the number of triples whose later
/// endpoint arrives before `b_i` best matches `cumulative[i]·|T|`.
/// `last_arrival[k]` = arrival position of triple k's later endpoint.
pub fn triple_boundaries(n: usize, last_arrival: &[usize], cumulative: &[f64]) -> Vec<usize> {
    let mut hist = vec![0usize; n + 1];
    for &a in last_arrival {
        hist[a + 1] += 1;
    }
    // count[b] = triples with last arrival < b
    let mut count = vec![0usize; n + 1];
    for b in 1..=n {
        count[b] = count[b - 1] + hist[b];
    }
    let total = last_arrival.len() as f64;
    let mut out = Vec::with_capacity(cumulative.len());
    let mut lo = 0usize;
    for (k, f) in cumulative.iter().enumerate() {
        if k + 1 == cumulative.len() {
            out.push(n);
            break;
        }
        let target = f * total;
        let mut best = lo;
        let mut best_err = f64::INFINITY;
        for (b, &c) in count.iter().enumerate().skip(lo) {
            let err = (c as f64 - target).abs();
            if err < best_err {
                best_err = err;
                best = b;
            }
            if c as f64 > target {
                break;
            }
        }
        out.push(best);
        lo = best;
    }
    out
}

/// Snapshot index of each triple given cumulative entity boundaries.
pub fn assign_triples(last_arrival: &[usize], boundaries: &[usize]) -> Vec<usize> {
    last_arrival
        .iter()
        .map(|&a| {
            boundaries
                .iter()
                .position(|&b| a < b)
                .expect("boundary covers all entities")
        })
        .collect()
}

/// Cumulative shares from per-snapshot shares.
pub fn cumulate(shares: &[f64]) -> Vec<f64> {
    let total: f64 = shares.iter().sum();
    let mut acc = 0.0;
    shares
        .iter()
        .map(|s| {
            acc += s / total;
            acc
        })
        .collect()
}
