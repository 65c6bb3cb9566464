use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{SnapshotSequence, Triple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EntityShrinkage,
    RelationShrinkage,
    EntityOutOfRange,
    RelationOutOfRange,
    DeltaEntityNotNew,
    DeltaEntityMissing,
    DeltaEntityOutOfRange,
    DeltaTripleMismatch,
    BridgeAtFirstSnapshot,
    BridgeNotInTrain,
    BridgeNotHistorical,
    BridgeWithoutOldEndpoint,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::EntityShrinkage => "entity shrinkage",
            ViolationKind::RelationShrinkage => "relation shrinkage",
            ViolationKind::EntityOutOfRange => "entity id out of range",
            ViolationKind::RelationOutOfRange => "relation id out of range",
            ViolationKind::DeltaEntityNotNew => "delta entity already known",
            ViolationKind::DeltaEntityMissing => "delta entity missing",
            ViolationKind::DeltaEntityOutOfRange => "delta entity out of range",
            ViolationKind::DeltaTripleMismatch => "delta triples differ from set difference",
            ViolationKind::BridgeAtFirstSnapshot => "bridge in first snapshot",
            ViolationKind::BridgeNotInTrain => "bridge not in train split",
            ViolationKind::BridgeNotHistorical => "bridge not an earlier triple",
            ViolationKind::BridgeWithoutOldEndpoint => "bridge without old endpoint",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub snapshot: usize,
    pub kind: ViolationKind,
    /// Offending entity/relation id, or the count for shrinkage.
    pub id: Option<u64>,
    pub triple: Option<Triple>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at i={}", self.kind, self.snapshot)?;
        if let Some(id) = self.id {
            write!(f, " (id {id})")?;
        }
        if let Some(t) = self.triple {
            write!(f, " [{} {} {}]", t.head, t.relation, t.tail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every snapshot and cross-snapshot invariant. Violations are
/// collected, never raised.
pub fn validate_sequence(seq: &SnapshotSequence) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |snapshot, kind, id: Option<u64>, triple| {
        out.push(Violation {
            snapshot,
            kind,
            id,
            triple,
        })
    };
    let mut prev_e = 0usize;
    let mut prev_r = 0usize;
    let mut history: HashSet<Triple> = HashSet::new();
    for (i, s) in seq.snapshots().iter().enumerate() {
        if s.entity_count < prev_e {
            push(i, ViolationKind::EntityShrinkage, Some(s.entity_count as u64), None);
        }
        if s.relation_count < prev_r {
            push(i, ViolationKind::RelationShrinkage, Some(s.relation_count as u64), None);
        }
        for t in s.all_triples().chain(&s.bridges) {
            for e in [t.head, t.tail] {
                if e as usize >= s.entity_count {
                    push(i, ViolationKind::EntityOutOfRange, Some(e as u64), Some(*t));
                }
            }
            if t.relation as usize >= s.relation_count {
                push(i, ViolationKind::RelationOutOfRange, Some(t.relation as u64), Some(*t));
            }
        }

        let listed: HashSet<u32> = s.delta_entities.iter().copied().collect();
        for &e in &listed {
            if (e as usize) < prev_e {
                push(i, ViolationKind::DeltaEntityNotNew, Some(e as u64), None);
            } else if e as usize >= s.entity_count {
                push(i, ViolationKind::DeltaEntityOutOfRange, Some(e as u64), None);
            }
        }
        for e in prev_e..s.entity_count {
            if !listed.contains(&(e as u32)) {
                push(i, ViolationKind::DeltaEntityMissing, Some(e as u64), None);
            }
        }

        let train: HashSet<&Triple> = s.train.iter().collect();
        for b in &s.bridges {
            if i == 0 {
                push(i, ViolationKind::BridgeAtFirstSnapshot, None, Some(*b));
                continue;
            }
            if !train.contains(b) {
                push(i, ViolationKind::BridgeNotInTrain, None, Some(*b));
            }
            if !history.contains(b) {
                push(i, ViolationKind::BridgeNotHistorical, None, Some(*b));
            }
            if b.head as usize >= prev_e && b.tail as usize >= prev_e {
                push(i, ViolationKind::BridgeWithoutOldEndpoint, None, Some(*b));
            }
        }

        let stored: HashSet<Triple> = s.delta_triples.iter().copied().collect();
        let current: HashSet<Triple> = s.all_triples().copied().collect();
        let expected: HashSet<Triple> = current.difference(&history).copied().collect();
        if stored != expected || stored.len() != s.delta_triples.len() {
            let mut odd: Vec<Triple> = stored.symmetric_difference(&expected).copied().collect();
            odd.sort_unstable();
            push(i, ViolationKind::DeltaTripleMismatch, None, odd.first().copied());
        }

        history.extend(current);
        prev_e = prev_e.max(s.entity_count);
        prev_r = prev_r.max(s.relation_count);
    }
    ValidationReport { violations: out }
}

#[cfg(test)]
mod tests {
    use super::super::{SnapshotSequence, SnapshotSplits, Triple};
    use super::*;

    fn counts(cum: &[usize]) -> SnapshotSequence {
        let mut prev = 0;
        let parts = cum
            .iter()
            .map(|&c| {
                let delta = (prev as u32..c as u32).collect();
                let train = if c >= 2 {
                    vec![Triple::new(c as u32 - 1, 0, 0)]
                } else {
                    vec![]
                };
                prev = prev.max(c);
                SnapshotSplits {
                    entity_count: c,
                    relation_count: 1,
                    train,
                    delta_entities: delta,
                    ..Default::default()
                }
            })
            .collect();
        SnapshotSequence::from_splits(parts).unwrap()
    }

    #[test]
    fn table_growth_is_valid() {
        let seq = counts(&[4494, 8501, 10504, 11839, 12842]);
        let r = validate_sequence(&seq);
        assert!(r.is_valid(), "{:?}", r.violations);
    }

    #[test]
    fn single_snapshot_is_valid() {
        assert!(validate_sequence(&counts(&[3])).is_valid());
    }

    #[test]
    fn dropped_entity_is_reported() {
        let seq = counts(&[3, 5, 4]);
        let r = validate_sequence(&seq);
        assert_eq!(r.violations[0].kind, ViolationKind::EntityShrinkage);
        assert!(r.violations[0].to_string().starts_with("entity shrinkage at i=2"));
    }

    #[test]
    fn bridge_rules() {
        let t01 = Triple::new(0, 0, 1);
        let t23 = Triple::new(2, 0, 3);
        let seq = SnapshotSequence::from_splits(vec![
            SnapshotSplits {
                entity_count: 2,
                relation_count: 1,
                train: vec![t01],
                delta_entities: vec![0, 1],
                ..Default::default()
            },
            SnapshotSplits {
                entity_count: 4,
                relation_count: 1,
                train: vec![t23, t01],
                bridges: vec![t01, t23],
                delta_entities: vec![2, 3],
                ..Default::default()
            },
        ])
        .unwrap();
        let kinds: Vec<ViolationKind> = validate_sequence(&seq).violations.iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::BridgeNotHistorical));
        assert!(kinds.contains(&ViolationKind::BridgeWithoutOldEndpoint));
    }

    #[test]
    fn out_of_range_ids() {
        let seq = SnapshotSequence::from_splits(vec![SnapshotSplits {
            entity_count: 2,
            relation_count: 1,
            train: vec![Triple::new(0, 1, 2)],
            delta_entities: vec![0, 1],
            ..Default::default()
        }])
        .unwrap();
        let r = validate_sequence(&seq);
        assert_eq!(r.violations.len(), 2);
        assert_eq!(r.violations[0].id, Some(2));
    }
}
