//! Evolving snapshot sequences, validation, deltas and graph statistics.

mod io;
mod modality;
mod stats;
mod validate;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{load_sequence, read_meta, read_triples, save_sequence, write_triples, SequenceMeta};
pub use modality::{EntityModality, ModalityStore};
pub use stats::{betweenness, compute_graph_stats, GraphStats, DEFAULT_M_REF, DEFAULT_N_REF};
pub use validate::{validate_sequence, ValidationReport, Violation, ViolationKind};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple { head, relation, tail }
    }
}

/// Input for one snapshot before deduplication. `bridges` must also be listed in `train`.
#[derive(Clone, Debug, Default)]
pub struct SnapshotSplits {
    pub entity_count: usize,
    pub relation_count: usize,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub bridges: Vec<Triple>,
    pub delta_entities: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub index: usize,
    /// Cumulative |E_i|.
    pub entity_count: usize,
    /// Cumulative |R_i|.
    pub relation_count: usize,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub delta_entities: Vec<EntityId>,
    pub delta_triples: Vec<Triple>,
    pub bridges: Vec<Triple>,
}

impl Snapshot {
    /// Every triple listed in this snapshot's splits, bridges included.
    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Training triples that are new at this snapshot (bridges excluded).
    pub fn new_train(&self) -> Vec<Triple> {
        let bridges: HashSet<&Triple> = self.bridges.iter().collect();
        self.train.iter().filter(|t| !bridges.contains(t)).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSequence {
    snapshots: Vec<Snapshot>,
}

impl SnapshotSequence {
    /// Builds a sequence, dropping duplicate triples (with a warning) and
    /// deriving each snapshot's ΔT from the cumulative sets.
    pub fn from_splits(parts: Vec<SnapshotSplits>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("empty snapshot sequence".into()));
        }
        let mut seen: HashSet<Triple> = HashSet::new();
        let mut snapshots = Vec::with_capacity(parts.len());
        for (i, p) in parts.into_iter().enumerate() {
            let bridge_set: HashSet<Triple> = p.bridges.iter().copied().collect();
            let mut bridges = Vec::new();
            let mut bridge_seen = HashSet::new();
            let mut fresh: HashSet<Triple> = HashSet::new();
            let mut dropped = 0usize;
            let mut keep = |list: Vec<Triple>, allow_bridges: bool, bridges: &mut Vec<Triple>| {
                let mut out = Vec::with_capacity(list.len());
                for t in list {
                    if allow_bridges && bridge_set.contains(&t) {
                        if bridge_seen.insert(t) {
                            bridges.push(t);
                            out.push(t);
                        } else {
                            dropped += 1;
                        }
                        continue;
                    }
                    if seen.contains(&t) || !fresh.insert(t) {
                        dropped += 1;
                        continue;
                    }
                    out.push(t);
                }
                out
            };
            let train = keep(p.train, true, &mut bridges);
            let valid = keep(p.valid, false, &mut bridges);
            let test = keep(p.test, false, &mut bridges);
            if dropped > 0 {
                log::warn!("snapshot {i}: dropped {dropped} duplicate triples");
            }
            // bridges named but absent from train are kept so validation can report them
            for b in &p.bridges {
                if !bridge_seen.contains(b) {
                    bridges.push(*b);
                }
            }
            let delta_triples: Vec<Triple> = train
                .iter()
                .chain(&valid)
                .chain(&test)
                .filter(|t| fresh.contains(t))
                .copied()
                .collect();
            seen.extend(fresh);
            seen.extend(bridge_seen);
            snapshots.push(Snapshot {
                index: i,
                entity_count: p.entity_count,
                relation_count: p.relation_count,
                train,
                valid,
                test,
                delta_entities: p.delta_entities,
                delta_triples,
                bridges,
            });
        }
        Ok(SnapshotSequence { snapshots })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn get(&self, i: usize) -> Result<&Snapshot> {
        self.snapshots
            .get(i)
            .ok_or_else(|| Error::OutOfRange(format!("snapshot {i} of {}", self.snapshots.len())))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("sequence is nonempty")
    }

    /// T_i: all triples of snapshots 0..=i.
    pub fn cumulative_triples(&self, i: usize) -> HashSet<Triple> {
        self.snapshots[..=i]
            .iter()
            .flat_map(|s| s.all_triples().copied())
            .collect()
    }

    /// Union of train splits of snapshots 0..=i, deduplicated, in first-seen order.
    pub fn cumulative_train(&self, i: usize) -> Vec<Triple> {
        let mut seen = HashSet::new();
        self.snapshots[..=i]
            .iter()
            .flat_map(|s| s.train.iter().copied())
            .filter(|t| seen.insert(*t))
            .collect()
    }

    /// Entity count of snapshot i-1 (0 for i = 0).
    pub fn old_entity_count(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.snapshots[i - 1].entity_count
        }
    }

    pub fn old_relation_count(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.snapshots[i - 1].relation_count
        }
    }
}

/// ΔE_i and ΔT_i of one snapshot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delta {
    pub entities: Vec<EntityId>,
    pub triples: Vec<Triple>,
}

/// Recomputes ΔE_i = E_i \ E_{i-1} and ΔT_i = T_i \ T_{i-1} from the cumulative
/// sets. The sequence must validate cleanly.
pub fn compute_deltas(seq: &SnapshotSequence) -> Result<Vec<Delta>> {
    let report = validate_sequence(seq);
    if !report.is_valid() {
        return Err(Error::Contract(format!(
            "compute_deltas on an invalid sequence: {}",
            report.violations[0]
        )));
    }
    let mut prev: HashSet<Triple> = HashSet::new();
    let mut prev_entities = 0usize;
    let mut out = Vec::with_capacity(seq.len());
    for (i, s) in seq.snapshots().iter().enumerate() {
        let cum = seq.cumulative_triples(i);
        let mut triples: Vec<Triple> = cum.difference(&prev).copied().collect();
        triples.sort_unstable();
        let entities = (prev_entities as EntityId..s.entity_count as EntityId).collect();
        out.push(Delta { entities, triples });
        prev = cum;
        prev_entities = s.entity_count;
    }
    Ok(out)
}

/// E_{i-1} as a list of ids (empty for i = 0).
pub fn old_entity_set(seq: &SnapshotSequence, i: usize) -> Result<Vec<EntityId>> {
    seq.get(i)?;
    Ok((0..seq.old_entity_count(i) as EntityId).collect())
}
