use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{EntityId, SnapshotSequence, SnapshotSplits, Triple};

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    #[serde(rename = "T")]
    pub t: usize,
    pub entity_counts: Vec<usize>,
    pub relation_counts: Vec<usize>,
}

fn parse_u32(field: &str, path: &Path, line: usize) -> Result<u32> {
    field
        .trim()
        .parse::<u32>()
        .map_err(|_| Error::parse(path, line, format!("not an id: {field:?}")))
}

/// Reads `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
pub fn read_triples(path: &Path) -> Result<Vec<Triple>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, n + 1, "expected 3 tab-separated fields"));
        }
        out.push(Triple::new(
            parse_u32(fields[0], path, n + 1)?,
            parse_u32(fields[1], path, n + 1)?,
            parse_u32(fields[2], path, n + 1)?,
        ));
    }
    Ok(out)
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for t in triples {
        writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_ids(path: &Path) -> Result<Vec<EntityId>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_u32(l, path, n + 1))
        .collect()
}

fn write_ids(path: &Path, ids: &[EntityId]) -> Result<()> {
    let mut s = String::with_capacity(ids.len() * 6);
    for id in ids {
        s.push_str(&id.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes `meta.json` and `s{i}/{train,valid,test,bridges}.tsv`, `s{i}/delta_entities.txt`.
pub fn save_sequence(seq: &SnapshotSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = SequenceMeta {
        t: seq.len(),
        entity_counts: seq.snapshots().iter().map(|s| s.entity_count).collect(),
        relation_counts: seq.snapshots().iter().map(|s| s.relation_count).collect(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
    for s in seq.snapshots() {
        let sd = dir.join(format!("s{}", s.index));
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        write_triples(&sd.join("train.tsv"), &s.train)?;
        write_triples(&sd.join("valid.tsv"), &s.valid)?;
        write_triples(&sd.join("test.tsv"), &s.test)?;
        write_triples(&sd.join("bridges.tsv"), &s.bridges)?;
        write_ids(&sd.join("delta_entities.txt"), &s.delta_entities)?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<SequenceMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SequenceMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if meta.entity_counts.len() != meta.t || meta.relation_counts.len() != meta.t || meta.t == 0 {
        return Err(Error::parse(&path, 0, "T does not match the count arrays"));
    }
    Ok(meta)
}

/// Loads a sequence directory. `bridges.tsv` is optional.
pub fn load_sequence(dir: &Path) -> Result<SnapshotSequence> {
    let meta = read_meta(dir)?;
    let mut parts = Vec::with_capacity(meta.t);
    for i in 0..meta.t {
        let sd = dir.join(format!("s{i}"));
        let bridges_path = sd.join("bridges.tsv");
        let bridges = if bridges_path.exists() {
            read_triples(&bridges_path)?
        } else {
            Vec::new()
        };
        parts.push(SnapshotSplits {
            entity_count: meta.entity_counts[i],
            relation_count: meta.relation_counts[i],
            train: read_triples(&sd.join("train.tsv"))?,
            valid: read_triples(&sd.join("valid.tsv"))?,
            test: read_triples(&sd.join("test.tsv"))?,
            bridges,
            delta_entities: read_ids(&sd.join("delta_entities.txt"))?,
        });
    }
    SnapshotSequence::from_splits(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_directory() {
        let dir = tempfile::tempdir().unwrap();
        let seq = SnapshotSequence::from_splits(vec![
            SnapshotSplits {
                entity_count: 3,
                relation_count: 1,
                train: vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)],
                valid: vec![Triple::new(2, 0, 0)],
                test: vec![],
                bridges: vec![],
                delta_entities: vec![0, 1, 2],
            },
            SnapshotSplits {
                entity_count: 4,
                relation_count: 1,
                train: vec![Triple::new(3, 0, 1), Triple::new(0, 0, 1)],
                valid: vec![],
                test: vec![Triple::new(3, 0, 2)],
                bridges: vec![Triple::new(0, 0, 1)],
                delta_entities: vec![3],
            },
        ])
        .unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(seq, back);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        fs::write(&p, "0\t0\t1\n1\tx\t2\n").unwrap();
        let err = read_triples(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
