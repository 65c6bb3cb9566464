//! Importance-weighted replay memory with recency-biased allocation, and the
//! contrastive and score-consistency replay losses.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{GraphStats, ModalityStore, SnapshotSequence, Triple};
use crate::numerics::{Tape, Tensor, Var, SMOOTH_L1_BETA};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Hard upper bound on B.
    pub capacity_cap: usize,
    /// B as a fraction of historical train triples (before the cap).
    pub history_fraction: f64,
    /// InfoNCE temperature τ.
    pub tau: f64,
    /// Fraction ρ of each batch drawn from the buffer.
    pub rho: f64,
    pub smooth_l1_beta: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity_cap: 10_000,
            history_fraction: 0.2,
            tau: 0.1,
            rho: 0.25,
            smooth_l1_beta: SMOOTH_L1_BETA,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.history_fraction) {
            return Err(Error::InvalidArgument(
                "rho and history_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// B for a history of `historical_train` triples.
    pub fn capacity(&self, historical_train: usize) -> usize {
        ((historical_train as f64 * self.history_fraction).floor() as usize).min(self.capacity_cap)
    }
}

/// ((deg(h) + deg(t)) / 2) · (1 + visual/text presence indicators of both endpoints).
pub fn triple_importance(t: &Triple, stats: &GraphStats, store: &ModalityStore) -> f64 {
    let deg = (f64::from(stats.degree[t.head as usize]) + f64::from(stats.degree[t.tail as usize])) / 2.0;
    let flags = [
        store.has_visual(t.head),
        store.has_visual(t.tail),
        store.has_text(t.head),
        store.has_text(t.tail),
    ];
    deg * (1.0 + flags.iter().filter(|&&f| f).count() as f64)
}

/// Real-valued shares (j+1)·B / Σ_k (k+1) for j < i.
pub fn ideal_shares(i: usize, capacity: usize) -> Vec<f64> {
    let total: usize = (1..=i).sum();
    (0..i)
        .map(|j| (j + 1) as f64 * capacity as f64 / total as f64)
        .collect()
}

/// Integer allocation: floors of the ideal shares, remainder one unit at a
/// time to the most recent snapshots.
pub fn allocate_capacity(i: usize, capacity: usize) -> Vec<usize> {
    if i == 0 {
        return Vec::new();
    }
    let total: usize = (1..=i).sum();
    let mut alloc: Vec<usize> = (0..i).map(|j| (j + 1) * capacity / total).collect();
    let mut rest = capacity - alloc.iter().sum::<usize>();
    let mut j = i;
    while rest > 0 {
        j = if j == 0 { i - 1 } else { j - 1 };
        alloc[j] += 1;
        rest -= 1;
    }
    alloc
}

/// Samples `k` items without replacement with probability proportional to
/// `weights` (exponential-key reservoir). Returns indices in key order.
pub fn weighted_sample<R: Rng>(weights: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keys.into_iter().take(k).map(|(_, i)| i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayEntry {
    pub triple: Triple,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplaySlot {
    pub snapshot: usize,
    pub capacity: usize,
    pub entries: Vec<ReplayEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub slots: Vec<ReplaySlot>,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.slots.iter().map(|s| s.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triples(&self) -> Vec<Triple> {
        self.slots
            .iter()
            .flat_map(|s| s.entries.iter().map(|e| e.triple))
            .collect()
    }

    /// `provenance_snapshot, head, relation, tail, importance_weight` rows, tab-separated.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("provenance_snapshot\thead\trelation\ttail\timportance_weight\n");
        for slot in &self.slots {
            for e in &slot.entries {
                s.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    slot.snapshot, e.triple.head, e.triple.relation, e.triple.tail, e.weight
                ));
            }
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Builds the buffer for snapshot `i` from the new train triples of every
/// earlier snapshot. `stats[j]` are the statistics of snapshot j.
pub fn fill_buffer(
    seq: &SnapshotSequence,
    i: usize,
    stats: &[GraphStats],
    store: &ModalityStore,
    capacity: usize,
    rng_seed: u64,
) -> Result<ReplayBuffer> {
    if i == 0 {
        return Ok(ReplayBuffer {
            capacity,
            slots: Vec::new(),
        });
    }
    if stats.len() < i {
        return Err(Error::InvalidArgument(format!(
            "need statistics for {i} snapshots, got {}",
            stats.len()
        )));
    }
    let alloc = allocate_capacity(i, capacity);
    let mut slots = Vec::with_capacity(i);
    for (j, &cap) in alloc.iter().enumerate() {
        let pool = seq.get(j)?.new_train();
        let weights: Vec<f64> = pool.iter().map(|t| triple_importance(t, &stats[j], store)).collect();
        let k = cap.min(pool.len());
        let mut rng = seed::rng(rng_seed, "replay.fill", ((i as u64) << 32) | j as u64);
        let picks = weighted_sample(&weights, k, &mut rng);
        slots.push(ReplaySlot {
            snapshot: j,
            capacity: cap,
            entries: picks
                .into_iter()
                .map(|p| ReplayEntry {
                    triple: pool[p],
                    weight: weights[p],
                })
                .collect(),
        });
    }
    Ok(ReplayBuffer { capacity, slots })
}

/// Per-epoch replay draws: without replacement, reshuffled when exhausted.
pub struct ReplayStream {
    triples: Vec<Triple>,
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl ReplayStream {
    pub fn new(buffer: &ReplayBuffer, rng_seed: u64, epoch: u64) -> Self {
        let triples = buffer.triples();
        let mut rng = seed::rng(rng_seed, "replay.stream", epoch);
        let mut order: Vec<usize> = (0..triples.len()).collect();
        order.shuffle(&mut rng);
        ReplayStream {
            triples,
            order,
            pos: 0,
            rng,
        }
    }

    pub fn take(&mut self, n: usize) -> Vec<Triple> {
        let mut out = Vec::with_capacity(n);
        if self.triples.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.triples[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}

/// Sorted unique entity ids of `triples`.
pub fn unique_entities(triples: &[Triple]) -> Vec<usize> {
    let set: BTreeSet<usize> = triples
        .iter()
        .flat_map(|t| [t.head as usize, t.tail as usize])
        .collect();
    set.into_iter().collect()
}

/// InfoNCE over the unique replay entities: current encodings as queries,
/// detached frozen encodings as keys, cosine similarity / τ.
pub fn replay_embedding_loss(tape: &mut Tape, cur_e: Var, frozen_e: Var, unique: &[usize], tau: f64) -> Var {
    if unique.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let q = tape.gather_rows(cur_e, unique);
    let k = tape.gather_rows(frozen_e, unique);
    let k = tape.stop_gradient(k);
    let q = tape.normalize_rows(q);
    let k = tape.normalize_rows(k);
    let logits = tape.matmul_nt(q, k);
    let logits = tape.scale(logits, 1.0 / tau);
    let targets: Vec<usize> = (0..unique.len()).collect();
    let ce = tape.cross_entropy_rows(logits, &targets);
    tape.mean_all(ce)
}

/// Mean SmoothL1(S^(i), sg(S^(i-1))) over all replay triples.
pub fn replay_score_loss(tape: &mut Tape, cur_scores: Var, frozen_scores: Var, beta: f64) -> Var {
    if tape.value(cur_scores).is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let f = tape.stop_gradient(frozen_scores);
    let rows = tape.smooth_l1_rows(cur_scores, f, beta);
    tape.mean_all(rows)
}

#[derive(Clone, Copy, Debug)]
pub struct MmcrTerms {
    pub l_rep_emb: Var,
    pub l_rep_score: Var,
    pub total: Var,
}

impl MmcrTerms {
    pub fn zeros(tape: &mut Tape) -> Self {
        let z = tape.constant(Tensor::scalar(0.0));
        MmcrTerms {
            l_rep_emb: z,
            l_rep_score: z,
            total: z,
        }
    }
}

/// L_MMCR = L_rep_emb + L_rep_score.
pub fn mmcr_terms(
    tape: &mut Tape,
    cur_e: Var,
    frozen_e: Var,
    cur_scores: Option<Var>,
    frozen_scores: Var,
    replay: &[Triple],
    cfg: &ReplayConfig,
) -> MmcrTerms {
    if replay.is_empty() {
        return MmcrTerms::zeros(tape);
    }
    let unique = unique_entities(replay);
    let l_rep_emb = replay_embedding_loss(tape, cur_e, frozen_e, &unique, cfg.tau);
    let l_rep_score = match cur_scores {
        Some(s) => replay_score_loss(tape, s, frozen_scores, cfg.smooth_l1_beta),
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let total = tape.add(l_rep_emb, l_rep_score);
    MmcrTerms {
        l_rep_emb,
        l_rep_score,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn importance_arithmetic() {
        let st = GraphStats {
            degree: vec![4, 2, 1, 1, 8, 4],
            degree_centrality: vec![0.0; 6],
            betweenness: vec![0.0; 6],
            richness: vec![0.0; 6],
        };
        let mut store = ModalityStore::new(1, 1);
        for e in 0..2 {
            store
                .set_visual(e, Tensor::matrix(1, 1, vec![1.0]).unwrap(), None)
                .unwrap();
            store
                .set_text(e, Tensor::matrix(1, 1, vec![1.0]).unwrap(), None)
                .unwrap();
        }
        assert_eq!(triple_importance(&Triple::new(0, 0, 1), &st, &store), 15.0);
        assert_eq!(triple_importance(&Triple::new(2, 0, 3), &st, &store), 1.0);
        let empty = ModalityStore::new(1, 1);
        assert_eq!(
            triple_importance(&Triple::new(4, 0, 5), &st, &empty),
            2.0 * triple_importance(&Triple::new(0, 0, 1), &st, &empty)
        );
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_capacity(3, 60), vec![10, 20, 30]);
        assert_eq!(allocate_capacity(2, 10), vec![3, 7]);
        assert!(allocate_capacity(0, 10).is_empty());
        assert_eq!(ideal_shares(3, 60), vec![10.0, 20.0, 30.0]);
    }

    /// Exact inclusion probabilities of successive weighted sampling, by
    /// enumerating ordered draws.
    pub(crate) fn exact_inclusion(w: &[f64], k: usize) -> Vec<f64> {
        fn rec(w: &[f64], k: usize, taken: &mut Vec<usize>, p: f64, out: &mut [f64]) {
            if taken.len() == k {
                for &i in taken.iter() {
                    out[i] += p;
                }
                return;
            }
            let rest: f64 = (0..w.len()).filter(|i| !taken.contains(i)).map(|i| w[i]).sum();
            for i in 0..w.len() {
                if !taken.contains(&i) {
                    taken.push(i);
                    rec(w, k, taken, p * w[i] / rest, out);
                    taken.pop();
                }
            }
        }
        let mut out = vec![0.0; w.len()];
        rec(w, k, &mut Vec::new(), 1.0, &mut out);
        out
    }

    /// Pearson statistic of inclusion counts over `draws` seeded samples.
    pub(crate) fn inclusion_chi2(w: &[f64], k: usize, draws: u64) -> f64 {
        let exact = exact_inclusion(w, k);
        let mut counts = vec![0usize; w.len()];
        for s in 0..draws {
            let mut rng = seed::rng(s, "replay.test", 0);
            for i in weighted_sample(w, k, &mut rng) {
                counts[i] += 1;
            }
        }
        counts
            .iter()
            .zip(&exact)
            .map(|(&c, &p)| {
                let e = p * draws as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum()
    }

    // χ²(0.99, df = 9)
    const CHI2_99_DF9: f64 = 21.666;

    #[test]
    fn exact_oracle_sanity() {
        let u = exact_inclusion(&[1.0; 10], 3);
        assert!(u.iter().all(|p| (p - 0.3).abs() < 1e-12));
        let mut w = vec![1.0; 11];
        w[4] = 100.0;
        assert!((exact_inclusion(&w, 1)[4] - 100.0 / 110.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_give_uniform_inclusion() {
        let x = inclusion_chi2(&[1.0; 10], 3, 10_000);
        assert!(x < CHI2_99_DF9, "{x}");
    }

    #[test]
    fn skewed_weights_match_exact_inclusion() {
        let w: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let x = inclusion_chi2(&w, 3, 10_000);
        assert!(x < CHI2_99_DF9, "{x}");
    }

    #[test]
    fn dominant_weight_matches_w_over_sum() {
        let mut w = vec![1.0; 11];
        w[4] = 100.0;
        let n = 10_000;
        let hits = (0..n)
            .filter(|&s| weighted_sample(&w, 1, &mut seed::rng(s, "t", 0)) == vec![4])
            .count();
        let p = 100.0 / 110.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 4.0 * sd, "{hits}");
    }

    #[test]
    fn allocation_exhaustive() {
        for i in 1..=6 {
            for b in 0..=100 {
                let a = allocate_capacity(i, b);
                assert_eq!(a.iter().sum::<usize>(), b);
                assert!(a.windows(2).all(|p| p[0] <= p[1]), "i={i} b={b} {a:?}");
                for (x, y) in a.iter().zip(ideal_shares(i, b)) {
                    assert!((*x as f64 - y).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn info_nce_closed_forms() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap());
        let l = replay_embedding_loss(&mut tape, one, one, &[0], 0.1);
        assert_eq!(tape.item(l), 0.0);
        let same = tape.constant(Tensor::matrix(4, 2, vec![1.0; 8]).unwrap());
        let l = replay_embedding_loss(&mut tape, same, same, &[0, 1, 2, 3], 0.1);
        assert!((tape.item(l) - 4f64.ln()).abs() < 1e-12);
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = replay_embedding_loss(&mut tape, eye, eye, &[0, 1], 1.0);
        let closed = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((tape.item(l) - closed).abs() < 1e-15);
    }

    #[test]
    fn stream_cycles_without_replacement() {
        let buf = ReplayBuffer {
            capacity: 3,
            slots: vec![ReplaySlot {
                snapshot: 0,
                capacity: 3,
                entries: (0..3)
                    .map(|i| ReplayEntry {
                        triple: Triple::new(i, 0, i),
                        weight: 1.0,
                    })
                    .collect(),
            }],
        };
        let mut s = ReplayStream::new(&buf, 1, 0);
        let mut first = s.take(3);
        first.sort();
        assert_eq!(first, buf.triples());
        assert_eq!(s.take(5).len(), 5);
        assert!(ReplayStream::new(&ReplayBuffer::default(), 1, 0).take(4).is_empty());
    }

    proptest::proptest! {
        #[test]
        fn allocation_sums_and_grows(i in 1usize..12, b in 0usize..500) {
            let a = allocate_capacity(i, b);
            proptest::prop_assert_eq!(a.len(), i);
            proptest::prop_assert_eq!(a.iter().sum::<usize>(), b);
            proptest::prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn sample_is_distinct_and_skips_zero_weight(
            w in proptest::collection::vec(0.0f64..5.0, 1..30),
            k in 0usize..30,
            s in 0u64..1000,
        ) {
            let mut rng = crate::seed::rng(s, "prop.sample", 0);
            let got = weighted_sample(&w, k, &mut rng);
            proptest::prop_assert_eq!(got.len(), k.min(w.len()));
            let mut d = got.clone();
            d.sort();
            d.dedup();
            proptest::prop_assert_eq!(d.len(), got.len());
            // zero-weight items only once every positive one is taken
            let positive = w.iter().filter(|&&x| x > 0.0).count();
            for (pos, &i) in got.iter().enumerate() {
                proptest::prop_assert!(w[i] > 0.0 || pos >= positive);
            }
        }
    }
}
