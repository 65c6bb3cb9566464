//! Train/valid/test splitting with relation-closure repair.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::graph::{RelationId, Triple};
use crate::seed;

/// Split sizes for `n` items: floors of the exact shares, remainder one unit
/// at a time to the largest shares first (train, then valid, then test on ties).
pub fn split_sizes(n: usize, ratio: [usize; 3]) -> [usize; 3] {
    let total: usize = ratio.iter().sum();
    let mut sizes = ratio.map(|r| n * r / total);
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| ratio[b].cmp(&ratio[a]).then(a.cmp(&b)));
    let mut k = 0;
    while rest > 0 {
        sizes[order[k % 3]] += 1;
        rest -= 1;
        k += 1;
    }
    sizes
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

/// Seeded shuffle and 3-way split of `triples`. Any valid/test triple whose
/// relation does not occur in `prior_train_relations` or this split's train
/// is swapped with a train triple whose relation stays covered.
pub fn split_snapshot(
    triples: &[Triple],
    ratio: [usize; 3],
    prior_train_relations: &HashMap<RelationId, usize>,
    rng_seed: u64,
    index: u64,
) -> Split {
    let mut v = triples.to_vec();
    v.shuffle(&mut seed::rng(rng_seed, "bench.split", index));
    let [a, b, _] = split_sizes(v.len(), ratio);
    let test = v.split_off(a + b);
    let valid = v.split_off(a);
    let mut s = Split { train: v, valid, test };
    let mut cover: HashMap<RelationId, usize> = prior_train_relations.clone();
    for t in &s.train {
        *cover.entry(t.relation).or_default() += 1;
    }
    for which in 0..2 {
        let mut k = 0;
        loop {
            let list = if which == 0 { &s.valid } else { &s.test };
            if k >= list.len() {
                break;
            }
            let t = list[k];
            if cover.get(&t.relation).copied().unwrap_or(0) > 0 {
                k += 1;
                continue;
            }
            // a train triple whose relation stays covered without it
            let swap = s
                .train
                .iter()
                .position(|x| cover.get(&x.relation).copied().unwrap_or(0) >= 2 && x.relation != t.relation);
            let list = if which == 0 { &mut s.valid } else { &mut s.test };
            match swap {
                Some(p) => {
                    let back = s.train[p];
                    s.train[p] = t;
                    list[k] = back;
                    *cover.get_mut(&back.relation).unwrap() -= 1;
                }
                None => {
                    list.remove(k);
                    s.train.push(t);
                }
            }
            *cover.entry(t.relation).or_default() += 1;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remainder_rule() {
        assert_eq!(split_sizes(5, [3, 1, 1]), [3, 1, 1]);
        assert_eq!(split_sizes(7, [3, 1, 1]), [5, 1, 1]);
        assert_eq!(split_sizes(9, [3, 1, 1]), [6, 2, 1]);
        assert_eq!(split_sizes(0, [3, 1, 1]), [0, 0, 0]);
    }

    #[test]
    fn closure_repair_moves_unseen_relations_to_train() {
        let mut tr: Vec<Triple> = (0..20).map(|i| Triple::new(i, 0, i + 1)).collect();
        tr.push(Triple::new(50, 7, 51));
        for s in 0..20 {
            let sp = split_snapshot(&tr, [3, 1, 1], &HashMap::new(), s, 0);
            assert!(sp.train.iter().any(|t| t.relation == 7));
            assert_eq!(sp.train.len() + sp.valid.len() + sp.test.len(), 21);
            assert_eq!(sp.train.len(), 13);
        }
    }

    proptest::proptest! {
        #[test]
        fn sizes_partition_within_one(n in 0usize..10_000, a in 1usize..6, b in 1usize..6, c in 1usize..6) {
            let sz = split_sizes(n, [a, b, c]);
            proptest::prop_assert_eq!(sz.iter().sum::<usize>(), n);
            let total = (a + b + c) as f64;
            for (s, r) in sz.iter().zip([a, b, c]) {
                proptest::prop_assert!((*s as f64 - n as f64 * r as f64 / total).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
