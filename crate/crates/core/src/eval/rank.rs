//! Filtered ranking with mean tie ranks.

use std::collections::HashMap;

use crate::backbone::Scorer;
use crate::graph::{EntityId, RelationId, Triple};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// `(h, r, ?)`
    Tail,
    /// `(?, r, t)`
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub direction: Direction,
    /// Known entity: the head for tail queries, the tail for head queries.
    pub anchor: EntityId,
    pub relation: RelationId,
}

impl Query {
    pub fn tail(t: &Triple) -> Self {
        Query {
            direction: Direction::Tail,
            anchor: t.head,
            relation: t.relation,
        }
    }

    pub fn head(t: &Triple) -> Self {
        Query {
            direction: Direction::Head,
            anchor: t.tail,
            relation: t.relation,
        }
    }

    pub fn gold(&self, t: &Triple) -> EntityId {
        match self.direction {
            Direction::Tail => t.tail,
            Direction::Head => t.head,
        }
    }
}

/// Known answers per query, used to remove other true answers from ranking.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    map: HashMap<Query, Vec<EntityId>>,
}

impl FilterIndex {
    pub fn new<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut map: HashMap<Query, Vec<EntityId>> = HashMap::new();
        for t in triples {
            map.entry(Query::tail(t)).or_default().push(t.tail);
            map.entry(Query::head(t)).or_default().push(t.head);
        }
        for v in map.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        FilterIndex { map }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn answers(&self, q: &Query) -> &[EntityId] {
        self.map.get(q).map_or(&[], Vec::as_slice)
    }
}

/// `1 + |better| + |tied| / 2` over candidates not in `filtered` (gold always kept).
pub fn rank_from_scores(scores: &[f64], gold: EntityId, filtered: &[EntityId]) -> Result<f64> {
    let g = gold as usize;
    let Some(&gs) = scores.get(g) else {
        return Err(Error::OutOfRange(format!("gold {gold} of {} candidates", scores.len())));
    };
    if !gs.is_finite() {
        return Err(Error::NonFinite(format!("score of gold entity {gold}")));
    }
    let mut better = 0usize;
    let mut tied = 0usize;
    for (c, &s) in scores.iter().enumerate() {
        if c == g {
            continue;
        }
        if s > gs {
            better += 1;
        } else if s == gs {
            tied += 1;
        }
    }
    // subtract filtered candidates that were counted
    for &f in filtered {
        let c = f as usize;
        if c == g || c >= scores.len() {
            continue;
        }
        if scores[c] > gs {
            better -= 1;
        } else if scores[c] == gs {
            tied -= 1;
        }
    }
    Ok(1.0 + better as f64 + tied as f64 / 2.0)
}

/// Best candidate after filtering (ties broken by lowest id).
pub fn filtered_top1(scores: &[f64], gold: EntityId, filtered: &[EntityId]) -> EntityId {
    let mut best: Option<(usize, f64)> = None;
    let mut fi = 0;
    for (c, &s) in scores.iter().enumerate() {
        while fi < filtered.len() && (filtered[fi] as usize) < c {
            fi += 1;
        }
        let is_filtered = fi < filtered.len() && filtered[fi] as usize == c && c != gold as usize;
        if is_filtered {
            continue;
        }
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map_or(gold, |(c, _)| c as EntityId)
}

pub fn query_scores(scorer: &Scorer, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
    let tails: Vec<(EntityId, RelationId)> = queries
        .iter()
        .filter(|q| q.direction == Direction::Tail)
        .map(|q| (q.anchor, q.relation))
        .collect();
    let heads: Vec<(EntityId, RelationId)> = queries
        .iter()
        .filter(|q| q.direction == Direction::Head)
        .map(|q| (q.anchor, q.relation))
        .collect();
    let ts = scorer.score_tails_batch(&tails)?;
    let hs = scorer.score_heads_batch(&heads)?;
    let (mut ti, mut hi) = (0, 0);
    Ok(queries
        .iter()
        .map(|q| match q.direction {
            Direction::Tail => {
                ti += 1;
                ts.row_slice(ti - 1).to_vec()
            }
            Direction::Head => {
                hi += 1;
                hs.row_slice(hi - 1).to_vec()
            }
        })
        .collect())
}

/// Filtered rank of the gold answer of one query.
pub fn rank_query(scorer: &Scorer, query: Query, gold: EntityId, filter: &FilterIndex) -> Result<f64> {
    let scores = query_scores(scorer, &[query])?;
    rank_from_scores(&scores[0], gold, filter.answers(&query))
}

/// Tail and head ranks of each triple, in input order (tail first).
pub fn rank_triples(scorer: &Scorer, triples: &[Triple], filter: &FilterIndex) -> Result<Vec<f64>> {
    let mut ranks = Vec::with_capacity(2 * triples.len());
    for chunk in triples.chunks(256) {
        let queries: Vec<Query> = chunk.iter().flat_map(|t| [Query::tail(t), Query::head(t)]).collect();
        let scores = query_scores(scorer, &queries)?;
        for (k, q) in queries.iter().enumerate() {
            let t = &chunk[k / 2];
            ranks.push(rank_from_scores(&scores[k], q.gold(t), filter.answers(q))?);
        }
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_and_filter_rules() {
        assert_eq!(rank_from_scores(&[0.1, 0.9, 0.3], 1, &[]).unwrap(), 1.0);
        assert_eq!(rank_from_scores(&[0.5, 0.5, 0.1], 0, &[]).unwrap(), 1.5);
        assert_eq!(rank_from_scores(&[0.2, 0.9, 0.5], 0, &[]).unwrap(), 3.0);
        assert_eq!(rank_from_scores(&[0.2, 0.9, 0.5], 0, &[1]).unwrap(), 2.0);
        // gold listed in the filter is never removed
        assert_eq!(rank_from_scores(&[0.2, 0.9, 0.5], 0, &[0, 1, 2]).unwrap(), 1.0);
        assert!(rank_from_scores(&[f64::NAN], 0, &[]).is_err());
        assert!(rank_from_scores(&[1.0], 3, &[]).is_err());
    }

    #[test]
    fn top1_skips_filtered() {
        assert_eq!(filtered_top1(&[0.2, 0.9, 0.5], 0, &[1]), 2);
        assert_eq!(filtered_top1(&[0.2, 0.9, 0.5], 1, &[1]), 1);
        assert_eq!(filtered_top1(&[0.5, 0.5], 1, &[]), 0);
    }

    #[test]
    fn filter_index_collects_both_directions() {
        let tr = [Triple::new(0, 0, 1), Triple::new(0, 0, 2), Triple::new(3, 0, 2)];
        let f = FilterIndex::new(&tr);
        assert_eq!(f.answers(&Query::tail(&tr[0])), &[1, 2]);
        assert_eq!(f.answers(&Query::head(&tr[1])), &[0, 3]);
        assert!(FilterIndex::empty().answers(&Query::tail(&tr[0])).is_empty());
    }

    proptest::proptest! {
        #[test]
        fn rank_bounded_by_unfiltered_candidates(
            scores in proptest::collection::vec(-3i32..3, 1..40),
            gold in 0usize..40,
            mask in proptest::collection::vec(proptest::bool::ANY, 40),
        ) {
            let gold = gold % scores.len();
            let s: Vec<f64> = scores.iter().map(|&x| f64::from(x)).collect();
            let filtered: Vec<EntityId> =
                (0..s.len()).filter(|&c| c != gold && mask[c]).map(|c| c as EntityId).collect();
            let r = rank_from_scores(&s, gold as EntityId, &filtered).unwrap();
            let kept = s.len() - filtered.len();
            proptest::prop_assert!(r >= 1.0 && r <= kept as f64);
            // filtering a candidate never makes the rank worse
            let r0 = rank_from_scores(&s, gold as EntityId, &[]).unwrap();
            proptest::prop_assert!(r <= r0);
        }
    }
}
