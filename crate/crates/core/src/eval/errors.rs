//! Top-1 error taxonomy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelParams, Scorer};
use crate::curriculum::mm_similarity;
use crate::graph::{compute_graph_stats, EntityId, ModalityStore, SnapshotSequence, Triple};
use crate::{Error, Result};

use super::rank::{filtered_top1, query_scores, Direction, FilterIndex, Query};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Forgetting,
    ColdStart,
    CrossModalAmbiguity,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub triple: Triple,
    pub direction: String,
    /// Snapshot whose test split holds the triple.
    pub snapshot: usize,
    pub gold: EntityId,
    pub predicted: EntityId,
    pub category: ErrorCategory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorThresholds {
    pub cold_start_degree: u32,
    pub similarity: f64,
    pub eta_v: f64,
    pub eta_t: f64,
}

impl Default for ErrorThresholds {
    fn default() -> Self {
        ErrorThresholds {
            cold_start_degree: 2,
            similarity: 0.8,
            eta_v: 0.5,
            eta_t: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub counts: BTreeMap<ErrorCategory, usize>,
    pub records: Vec<ErrorRecord>,
    /// False when some historical checkpoint was missing, so forgetting
    /// could not be attributed for its snapshot.
    pub forgetting_available: bool,
    pub total_queries: usize,
}

impl ErrorHistogram {
    pub fn total_errors(&self) -> usize {
        self.counts.values().sum()
    }
}

fn top1_all(scorer: &Scorer, triples: &[Triple], filter: &FilterIndex) -> Result<Vec<(Query, EntityId, EntityId)>> {
    let mut out = Vec::with_capacity(2 * triples.len());
    for chunk in triples.chunks(256) {
        let queries: Vec<Query> = chunk.iter().flat_map(|t| [Query::tail(t), Query::head(t)]).collect();
        let scores = query_scores(scorer, &queries)?;
        for (k, q) in queries.iter().enumerate() {
            let gold = q.gold(&chunk[k / 2]);
            out.push((*q, gold, filtered_top1(&scores[k], gold, filter.answers(q))));
        }
    }
    Ok(out)
}

/// Classifies every filtered top-1 error of θ_i on test_0..=test_i.
/// `history[j]` is θ_j when available (`history[i]` is ignored; `current` is used).
pub fn classify_errors(
    current: &ModelParams,
    history: &[Option<&ModelParams>],
    seq: &SnapshotSequence,
    i: usize,
    store: &ModalityStore,
    th: &ErrorThresholds,
) -> Result<ErrorHistogram> {
    let snap = seq.get(i)?;
    let filter = FilterIndex::new(&seq.cumulative_triples(i));
    let stats = compute_graph_stats(seq, i, store, 1, 1)?;
    let mut is_new = vec![false; snap.entity_count];
    for &e in &snap.delta_entities {
        is_new[e as usize] = true;
    }
    let cold = |e: EntityId| is_new[e as usize] && stats.degree[e as usize] <= th.cold_start_degree;
    let scorer = Scorer::new(current, store);
    let mut hist = ErrorHistogram {
        forgetting_available: true,
        ..Default::default()
    };
    for j in 0..=i {
        let test = &seq.get(j)?.test;
        let now = top1_all(&scorer, test, &filter)?;
        let before = if j < i {
            match history.get(j).copied().flatten() {
                Some(p) => {
                    let fj = FilterIndex::new(&seq.cumulative_triples(j));
                    Some(top1_all(&Scorer::new(p, store), test, &fj)?)
                }
                None => {
                    hist.forgetting_available = false;
                    None
                }
            }
        } else {
            None
        };
        hist.total_queries += now.len();
        for (k, &(q, gold, pred)) in now.iter().enumerate() {
            if pred == gold {
                continue;
            }
            let was_right = before.as_ref().is_some_and(|b| b[k].2 == b[k].1);
            let category = if was_right {
                ErrorCategory::Forgetting
            } else if cold(gold) || cold(q.anchor) {
                ErrorCategory::ColdStart
            } else if mm_similarity(pred, gold, store, th.eta_v, th.eta_t) >= th.similarity {
                ErrorCategory::CrossModalAmbiguity
            } else {
                ErrorCategory::Other
            };
            *hist.counts.entry(category).or_default() += 1;
            hist.records.push(ErrorRecord {
                triple: test[k / 2],
                direction: match q.direction {
                    Direction::Tail => "tail".into(),
                    Direction::Head => "head".into(),
                },
                snapshot: j,
                gold,
                predicted: pred,
                category,
            });
        }
    }
    if hist.records.len() != hist.total_errors() {
        return Err(Error::Contract("error histogram does not conserve counts".into()));
    }
    Ok(hist)
}
