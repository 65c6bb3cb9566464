//! Builds evolving snapshot benchmarks from a static graph.

mod features;
mod partition;
mod split;
mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::graph::{
    load_sequence, save_sequence, validate_sequence, EntityId, ModalityStore, RelationId, SnapshotSequence,
    SnapshotSplits, Triple,
};
use crate::seed;
use crate::{Error, Result};

pub use features::{
    ingest_features, read_features, render_features, synth_features, write_features, SynthFeatureConfig,
};
pub use partition::{
    arrival_order, arrival_rank, assign_triples, cumulate, entity_boundaries, triple_boundaries, undirected_adjacency,
};
pub use split::{split_sizes, split_snapshot, Split};
pub use synth::{synth_base, SynthBaseConfig};

/// Static multi-relational graph with dense ids.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseKG {
    pub entity_count: usize,
    pub relation_count: usize,
    pub triples: Vec<Triple>,
    pub entity_labels: Vec<String>,
    pub relation_labels: Vec<String>,
}

impl BaseKG {
    pub fn from_triples(entity_count: usize, relation_count: usize, triples: Vec<Triple>) -> Result<Self> {
        for t in &triples {
            if t.head as usize >= entity_count
                || t.tail as usize >= entity_count
                || t.relation as usize >= relation_count
            {
                return Err(Error::OutOfRange(format!(
                    "triple ({}, {}, {}) outside {entity_count} entities / {relation_count} relations",
                    t.head, t.relation, t.tail
                )));
            }
        }
        if triples.is_empty() {
            return Err(Error::InvalidArgument("base graph has no triples".into()));
        }
        Ok(BaseKG {
            entity_count,
            relation_count,
            triples,
            entity_labels: (0..entity_count).map(|e| e.to_string()).collect(),
            relation_labels: (0..relation_count).map(|r| r.to_string()).collect(),
        })
    }

    /// Reads `head<TAB>relation<TAB>tail` with arbitrary labels, assigning
    /// dense ids in first-seen order. Duplicate lines are kept once.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ents: HashMap<String, u32> = HashMap::new();
        let mut rels: HashMap<String, u32> = HashMap::new();
        let mut el = Vec::new();
        let mut rl = Vec::new();
        let mut triples = Vec::new();
        let mut seen = HashSet::new();
        let id = |m: &mut HashMap<String, u32>, labels: &mut Vec<String>, s: &str| -> u32 {
            *m.entry(s.to_string()).or_insert_with(|| {
                labels.push(s.to_string());
                labels.len() as u32 - 1
            })
        };
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 3 || f.iter().any(|x| x.is_empty()) {
                return Err(Error::parse(path, n + 1, "expected 3 tab-separated fields"));
            }
            let h = id(&mut ents, &mut el, f[0]);
            let r = id(&mut rels, &mut rl, f[1]);
            let t = id(&mut ents, &mut el, f[2]);
            let tr = Triple::new(h, r, t);
            if seen.insert(tr) {
                triples.push(tr);
            }
        }
        let mut base = BaseKG::from_triples(el.len(), rl.len(), triples)?;
        base.entity_labels = el;
        base.relation_labels = rl;
        Ok(base)
    }

    /// Label → id map for feature ingestion.
    pub fn entity_ids(&self) -> HashMap<String, EntityId> {
        self.entity_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as EntityId))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Entity,
    Higher,
    Equal,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(Strategy::Entity),
            "higher" => Ok(Strategy::Higher),
            "equal" => Ok(Strategy::Equal),
            _ => Err(Error::InvalidArgument(format!("unknown strategy '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub snapshots: usize,
    pub strategy: Strategy,
    pub bridge_ratio: f64,
    pub split: [usize; 3],
    pub seed: u64,
    /// Cumulative entity shares per snapshot (entity strategy).
    pub entity_fractions: Vec<f64>,
    /// Per-snapshot triple shares (higher strategy).
    pub triple_fractions: Vec<f64>,
    /// Set when features were synthesised.
    pub features: Option<SynthFeatureConfig>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            snapshots: 5,
            strategy: Strategy::Entity,
            bridge_ratio: 0.15,
            split: [3, 1, 1],
            seed: 0,
            entity_fractions: vec![0.35, 0.66, 0.82, 0.92, 1.0],
            triple_fractions: vec![0.075, 0.13, 0.175, 0.26, 0.36],
            features: None,
        }
    }
}

/// Piecewise-linear resampling of a cumulative curve (anchored at 0) onto `t` points.
fn resample(cum: &[f64], t: usize) -> Vec<f64> {
    let k = cum.len();
    (1..=t)
        .map(|i| {
            let x = i as f64 / t as f64 * k as f64;
            let lo = x.floor() as usize;
            let frac = x - lo as f64;
            let y0 = if lo == 0 { 0.0 } else { cum[lo - 1] };
            let y1 = if lo >= k { cum[k - 1] } else { cum[lo] };
            y0 + frac * (y1 - y0)
        })
        .collect()
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.snapshots == 0 {
            return bad("at least one snapshot is required");
        }
        if !(0.0..1.0).contains(&self.bridge_ratio) {
            return bad("bridge_ratio must be in [0, 1)");
        }
        if self.split.iter().any(|&r| r == 0) {
            return bad("split ratio entries must be positive");
        }
        if self.entity_fractions.is_empty()
            || self.entity_fractions.windows(2).any(|w| w[1] < w[0])
            || self.entity_fractions.iter().any(|f| !(*f > 0.0))
            || (self.entity_fractions.last().unwrap() - 1.0).abs() > 1e-9
        {
            return bad("entity_fractions must be positive, non-decreasing and end at 1");
        }
        if self.triple_fractions.is_empty() || self.triple_fractions.iter().any(|f| !(*f > 0.0)) {
            return bad("triple_fractions must be positive");
        }
        if let Some(f) = &self.features {
            f.validate()?;
        }
        Ok(())
    }

    /// Cumulative shares for the configured strategy, resampled to T points
    /// when the listed fractions have a different length.
    pub fn cumulative_fractions(&self) -> Vec<f64> {
        let t = self.snapshots;
        let cum = match self.strategy {
            Strategy::Entity => self.entity_fractions.clone(),
            Strategy::Higher => cumulate(&self.triple_fractions),
            Strategy::Equal => cumulate(&vec![1.0; t]),
        };
        let mut out = if cum.len() == t { cum } else { resample(&cum, t) };
        if let Some(l) = out.last_mut() {
            *l = 1.0;
        }
        out
    }
}

/// A built benchmark plus the id maps back to the base graph.
#[derive(Clone, Debug)]
pub struct BuiltBenchmark {
    pub sequence: SnapshotSequence,
    /// `entity_map[new_id]` = base entity id.
    pub entity_map: Vec<u32>,
    pub relation_map: Vec<u32>,
    /// Per snapshot: (requested, injected) bridge counts.
    pub bridge_counts: Vec<(usize, usize)>,
}

impl BuiltBenchmark {
    /// Base id → benchmark id.
    pub fn inverse_entity_map(&self) -> Vec<EntityId> {
        let mut inv = vec![0; self.entity_map.len()];
        for (new, &old) in self.entity_map.iter().enumerate() {
            inv[old as usize] = new as EntityId;
        }
        inv
    }

    /// Re-indexes a store keyed by base ids.
    pub fn remap_store(&self, base_store: &ModalityStore) -> Result<ModalityStore> {
        let mut s = ModalityStore::new(base_store.d_v(), base_store.d_w());
        for (new, &old) in self.entity_map.iter().enumerate() {
            if let Some(m) = base_store.visual(old) {
                s.set_visual(new as EntityId, m.tokens.clone(), Some(m.pooled.clone()))?;
            }
            if let Some(m) = base_store.text(old) {
                s.set_text(new as EntityId, m.tokens.clone(), Some(m.pooled.clone()))?;
            }
        }
        Ok(s)
    }
}

/// Samples bridges for snapshot `i`: earlier train triples touching an old
/// entity adjacent to a new one in ΔT_i.
pub fn inject_bridges(
    delta: &[Triple],
    is_new: &dyn Fn(EntityId) -> bool,
    earlier_train: &[Triple],
    ratio: f64,
    rng_seed: u64,
    index: u64,
) -> (Vec<Triple>, usize) {
    let want = (ratio * delta.len() as f64).floor() as usize;
    if want == 0 {
        return (Vec::new(), 0);
    }
    let mut hubs: BTreeSet<EntityId> = BTreeSet::new();
    for t in delta {
        match (is_new(t.head), is_new(t.tail)) {
            (true, false) => {
                hubs.insert(t.tail);
            }
            (false, true) => {
                hubs.insert(t.head);
            }
            _ => {}
        }
    }
    let mut cands: Vec<Triple> = earlier_train
        .iter()
        .filter(|t| hubs.contains(&t.head) || hubs.contains(&t.tail))
        .copied()
        .collect();
    cands.sort_unstable();
    cands.dedup();
    cands.shuffle(&mut seed::rng(rng_seed, "bench.bridges", index));
    if cands.len() < want {
        log::warn!(
            "snapshot {index}: only {} bridge candidates for {want} bridges",
            cands.len()
        );
    }
    cands.truncate(want);
    (cands, want)
}

/// Partitions, bridges and splits `base` into a validated sequence.
pub fn build_sequence(base: &BaseKG, cfg: &BuildConfig) -> Result<BuiltBenchmark> {
    cfg.validate()?;
    let n = base.entity_count;
    let t_count = cfg.snapshots;
    let order = arrival_order(base, cfg.seed);
    let rank = arrival_rank(&order);
    let last: Vec<usize> = base
        .triples
        .iter()
        .map(|t| rank[t.head as usize].max(rank[t.tail as usize]))
        .collect();
    let cum = cfg.cumulative_fractions();
    let bounds = match cfg.strategy {
        Strategy::Entity => entity_boundaries(n, &cum),
        Strategy::Higher | Strategy::Equal => triple_boundaries(n, &last, &cum),
    };
    let assign = assign_triples(&last, &bounds);
    let mut groups: Vec<Vec<Triple>> = vec![Vec::new(); t_count];
    let mut rel_map: HashMap<RelationId, RelationId> = HashMap::new();
    let mut relation_map = Vec::new();
    let mut by_snapshot: Vec<Vec<usize>> = vec![Vec::new(); t_count];
    for (k, &s) in assign.iter().enumerate() {
        by_snapshot[s].push(k);
    }
    let mut rel_counts = Vec::with_capacity(t_count);
    for (s, idx) in by_snapshot.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "base graph too small: snapshot {s} of {t_count} receives no triples"
            )));
        }
        for &k in idx {
            let t = base.triples[k];
            let r = *rel_map.entry(t.relation).or_insert_with(|| {
                relation_map.push(t.relation);
                relation_map.len() as RelationId - 1
            });
            groups[s].push(Triple::new(
                rank[t.head as usize] as u32,
                r,
                rank[t.tail as usize] as u32,
            ));
        }
        rel_counts.push(relation_map.len());
    }
    let mut parts = Vec::with_capacity(t_count);
    let mut train_rel: HashMap<RelationId, usize> = HashMap::new();
    let mut earlier_train: Vec<Triple> = Vec::new();
    let mut bridge_counts = Vec::with_capacity(t_count);
    for (i, delta) in groups.iter().enumerate() {
        let start = if i == 0 { 0 } else { bounds[i - 1] };
        let end = bounds[i];
        let sp = split_snapshot(delta, cfg.split, &train_rel, cfg.seed, i as u64);
        let (bridges, want) = if i == 0 {
            (Vec::new(), 0)
        } else {
            let is_new = |e: EntityId| (e as usize) >= start;
            inject_bridges(delta, &is_new, &earlier_train, cfg.bridge_ratio, cfg.seed, i as u64)
        };
        bridge_counts.push((want, bridges.len()));
        for t in &sp.train {
            *train_rel.entry(t.relation).or_default() += 1;
        }
        earlier_train.extend_from_slice(&sp.train);
        let mut train = sp.train;
        train.extend_from_slice(&bridges);
        parts.push(SnapshotSplits {
            entity_count: end,
            relation_count: rel_counts[i],
            train,
            valid: sp.valid,
            test: sp.test,
            bridges,
            delta_entities: (start as u32..end as u32).collect(),
        });
    }
    let sequence = SnapshotSequence::from_splits(parts)?;
    let report = validate_sequence(&sequence);
    if !report.is_valid() {
        for v in &report.violations {
            log::error!("{v}");
        }
        return Err(Error::Validation(report.violations.len()));
    }
    Ok(BuiltBenchmark {
        sequence,
        entity_map: order,
        relation_map,
        bridge_counts,
    })
}

/// Writes the sequence layout, `features/`, `build_config.json` and the id maps.
pub fn write_benchmark(
    dir: &Path,
    built: &BuiltBenchmark,
    store: &ModalityStore,
    base: &BaseKG,
    cfg: &BuildConfig,
) -> Result<()> {
    save_sequence(&built.sequence, dir)?;
    write_features(&dir.join("features"), store, built.entity_map.len())?;
    let p = dir.join("build_config.json");
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::json(&p, e))?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let mut em = String::from("id\tbase_label\n");
    for (new, &old) in built.entity_map.iter().enumerate() {
        writeln!(em, "{new}\t{}", base.entity_labels[old as usize]).unwrap();
    }
    let mp = dir.join("entity_map.tsv");
    fs::write(&mp, em).map_err(|e| Error::io(&mp, e))?;
    let mut rm = String::from("id\tbase_label\n");
    for (new, &old) in built.relation_map.iter().enumerate() {
        writeln!(rm, "{new}\t{}", base.relation_labels[old as usize]).unwrap();
    }
    let rp = dir.join("relation_map.tsv");
    fs::write(&rp, rm).map_err(|e| Error::io(&rp, e))
}

fn header_dim(path: &Path) -> Result<Option<usize>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|d| d.parse().ok()))
}

/// Loads a benchmark directory: the sequence and its modality store
/// (empty when `features/` is absent). Dimensions come from the file
/// headers, falling back to `default_dims`.
pub fn load_benchmark(dir: &Path, default_dims: (usize, usize)) -> Result<(SnapshotSequence, ModalityStore)> {
    let seq = load_sequence(dir)?;
    let fdir = dir.join("features");
    let d_v = header_dim(&fdir.join("visual.tsv"))?.unwrap_or(default_dims.0);
    let d_w = header_dim(&fdir.join("text.tsv"))?.unwrap_or(default_dims.1);
    let n = seq.last().entity_count;
    let store = if fdir.exists() {
        let opt = |name: &str| {
            let p = fdir.join(name);
            p.exists().then_some(p)
        };
        ingest_features(
            opt("visual.tsv").as_deref(),
            opt("text.tsv").as_deref(),
            opt("visual_pooled.tsv").as_deref(),
            opt("text_pooled.tsv").as_deref(),
            d_v,
            d_w,
            n,
            None,
        )?
    } else {
        ModalityStore::new(d_v, d_w)
    };
    Ok((seq, store))
}

#[cfg(test)]
mod tests;
