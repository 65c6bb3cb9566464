//! Continual metric matrix and its summaries.

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelParams, Scorer};
use crate::graph::{ModalityStore, SnapshotSequence, Triple};
use crate::{Error, Result};

use super::rank::{rank_triples, FilterIndex};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl Cell {
    pub fn from_ranks(ranks: &[f64]) -> Self {
        if ranks.is_empty() {
            return Cell::default();
        }
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Cell {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            queries: ranks.len(),
        }
    }

    pub fn is_consistent(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.mrr)
            && unit(self.hits10)
            && self.hits1 <= self.hits3
            && self.hits3 <= self.hits10
            && self.mrr >= self.hits1
    }
}

/// `rows[i][j]` holds the metrics of θ_i on test_j, `j ≤ i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMatrix {
    pub snapshots: usize,
    pub rows: Vec<Vec<Cell>>,
}

impl MetricMatrix {
    pub fn new(snapshots: usize) -> Self {
        MetricMatrix {
            snapshots,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<Cell>) -> Result<()> {
        let i = self.rows.len();
        if row.len() != i + 1 {
            return Err(Error::Contract(format!(
                "row {i} needs {} cells, got {}",
                i + 1,
                row.len()
            )));
        }
        if i >= self.snapshots {
            return Err(Error::Contract(format!("matrix already has {} rows", self.snapshots)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Cell> {
        self.rows.get(i).and_then(|r| r.get(j))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.snapshots
    }

    /// Populated exactly on `j ≤ i`.
    pub fn is_lower_triangular(&self) -> bool {
        self.rows.iter().enumerate().all(|(i, r)| r.len() == i + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

/// Unweighted mean over the last available row.
pub fn avg_metrics(m: &MetricMatrix) -> Option<Averages> {
    let row = m.rows.last()?;
    let n = row.len() as f64;
    let mean = |f: fn(&Cell) -> f64| row.iter().map(f).sum::<f64>() / n;
    Some(Averages {
        mrr: mean(|c| c.mrr),
        hits1: mean(|c| c.hits1),
        hits3: mean(|c| c.hits3),
        hits10: mean(|c| c.hits10),
    })
}

/// Mean of `MRR[T-1][j] − MRR[j][j]` over `j < T-1`; `None` for fewer than two rows.
pub fn bwt(m: &MetricMatrix) -> Option<f64> {
    let t = m.rows.len();
    if t < 2 {
        return None;
    }
    let last = &m.rows[t - 1];
    Some((0..t - 1).map(|j| last[j].mrr - m.rows[j][j].mrr).sum::<f64>() / (t - 1) as f64)
}

/// `MRR[j..][j]`.
pub fn forgetting_curve(m: &MetricMatrix, j: usize) -> Vec<f64> {
    m.rows.iter().skip(j).map(|r| r[j].mrr).collect()
}

/// `(M[i][i], mean_{j<i} M[i][j])`.
pub fn new_vs_old(m: &MetricMatrix, i: usize) -> Option<(f64, Option<f64>)> {
    let row = m.rows.get(i)?;
    let old = (i > 0).then(|| row[..i].iter().map(|c| c.mrr).sum::<f64>() / i as f64);
    Some((row[i].mrr, old))
}

/// Filtered metrics of `params` on `triples`, both query directions.
pub fn evaluate_triples(
    params: &ModelParams,
    store: &ModalityStore,
    triples: &[Triple],
    filter: &FilterIndex,
) -> Result<Cell> {
    let scorer = Scorer::new(params, store);
    let ranks = rank_triples(&scorer, triples, filter)?;
    Ok(Cell::from_ranks(&ranks))
}

/// Row `i` of the matrix: θ_i on test_0..=test_i, filtered by all triples of
/// the observed snapshots.
pub fn evaluate_model(
    params: &ModelParams,
    seq: &SnapshotSequence,
    i: usize,
    store: &ModalityStore,
) -> Result<Vec<Cell>> {
    seq.get(i)?;
    let known = seq.cumulative_triples(i);
    let filter = FilterIndex::new(&known);
    let scorer = Scorer::new(params, store);
    (0..=i)
        .map(|j| {
            let ranks = rank_triples(&scorer, &seq.get(j)?.test, &filter)?;
            Ok(Cell::from_ranks(&ranks))
        })
        .collect()
}
