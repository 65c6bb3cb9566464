//! Curriculum scoring of new triples and progressive K-stage ordering.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::{EntityId, GraphStats, ModalityStore, Triple, DEFAULT_M_REF, DEFAULT_N_REF};
use crate::numerics::cosine_slices;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta_v: f64,
    pub eta_t: f64,
    /// Number of curricula K.
    pub stages: usize,
    pub m_ref: usize,
    pub n_ref: usize,
    /// Optional cap on the old entities compared per new entity (first ids).
    pub similarity_cap: Option<usize>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            alpha: 0.4,
            beta: 0.4,
            gamma: 0.2,
            eta_v: 0.5,
            eta_t: 0.5,
            stages: 3,
            m_ref: DEFAULT_M_REF,
            n_ref: DEFAULT_N_REF,
            similarity_cap: None,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.eta_v, self.eta_t];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "curriculum weights must be finite and ≥ 0".into(),
            ));
        }
        if self.stages == 0 || self.m_ref == 0 || self.n_ref == 0 {
            return Err(Error::InvalidArgument("K, m_ref and n_ref must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Upper end of the φ range.
    pub fn phi_max(&self) -> f64 {
        self.alpha + self.beta * (self.eta_v + self.eta_t) + self.gamma
    }
}

fn known(set: &[bool], e: EntityId) -> bool {
    set.get(e as usize).copied().unwrap_or(false)
}

/// 1 iff the head or the tail is already known.
pub fn structural_connectivity(t: &Triple, known_set: &[bool]) -> u8 {
    u8::from(known(known_set, t.head) || known(known_set, t.tail))
}

/// Balanced cosine similarity of pretrained pooled features; a modality
/// missing on either side adds nothing.
pub fn mm_similarity(u: EntityId, other: EntityId, store: &ModalityStore, eta_v: f64, eta_t: f64) -> f64 {
    let mut s = 0.0;
    if let (Some(a), Some(b)) = (store.visual(u), store.visual(other)) {
        s += eta_v * cosine_slices(&a.pooled, &b.pooled);
    }
    if let (Some(a), Some(b)) = (store.text(u), store.text(other)) {
        s += eta_t * cosine_slices(&a.pooled, &b.pooled);
    }
    s
}

/// Maximum similarity of `u` to any of `old`, clamped at 0.
fn best_match(u: EntityId, old: &[EntityId], store: &ModalityStore, cfg: &CurriculumConfig) -> f64 {
    let limit = cfg.similarity_cap.unwrap_or(usize::MAX).min(old.len());
    old[..limit]
        .iter()
        .map(|&e| mm_similarity(u, e, store, cfg.eta_v, cfg.eta_t))
        .fold(0.0, f64::max)
}

/// c_mm: best similarity between any new endpoint and any old entity; 0 when
/// both endpoints are old or there is no old entity.
pub fn compatibility(
    t: &Triple,
    old: &[EntityId],
    old_set: &[bool],
    store: &ModalityStore,
    cfg: &CurriculumConfig,
) -> f64 {
    if old.is_empty() {
        return 0.0;
    }
    let mut best = 0.0f64;
    let mut any_new = false;
    for u in [t.head, t.tail] {
        if !known(old_set, u) {
            any_new = true;
            best = best.max(best_match(u, old, store, cfg));
        }
    }
    if any_new {
        best
    } else {
        0.0
    }
}

/// One scored triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub triple: Triple,
    pub phi: f64,
    pub c_str: u8,
    pub c_mm: f64,
    pub c_rich: f64,
}

fn phi(cfg: &CurriculumConfig, c_str: u8, c_mm: f64, c_rich: f64) -> f64 {
    cfg.alpha * f64::from(c_str) + cfg.beta * c_mm + cfg.gamma * c_rich
}

/// φ = α·c_str + β·c_mm + γ·c_rich with c_rich = (M(h) + M(t)) / 2.
pub fn curriculum_score(
    t: &Triple,
    old: &[EntityId],
    old_set: &[bool],
    stats: &GraphStats,
    store: &ModalityStore,
    cfg: &CurriculumConfig,
) -> Scored {
    let c_str = structural_connectivity(t, old_set);
    let c_mm = compatibility(t, old, old_set, store, cfg);
    let c_rich = (stats.richness[t.head as usize] + stats.richness[t.tail as usize]) / 2.0;
    Scored {
        triple: *t,
        phi: phi(cfg, c_str, c_mm, c_rich),
        c_str,
        c_mm,
        c_rich,
    }
}

fn order(a: &Scored, b: &Scored) -> Ordering {
    b.phi.total_cmp(&a.phi).then_with(|| a.triple.cmp(&b.triple))
}

/// Splits `n` items into `k` near-equal contiguous sizes, remainders first.
pub fn stage_sizes(n: usize, k: usize) -> Vec<usize> {
    let k = k.max(1);
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn partition(mut items: Vec<Scored>, k: usize) -> Vec<Vec<Scored>> {
    items.sort_by(order);
    let mut out = Vec::with_capacity(k);
    let mut it = items.into_iter();
    for s in stage_sizes(it.len(), k) {
        out.push(it.by_ref().take(s).collect());
    }
    out
}

/// Record written to `curriculum.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub stage: usize,
    pub head: EntityId,
    pub relation: u32,
    pub tail: EntityId,
    pub phi: f64,
    pub c_str: u8,
    pub c_mm: f64,
    pub c_rich: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumPlan {
    stages: Vec<Vec<Scored>>,
    active: usize,
    known: Vec<bool>,
    cfg: CurriculumConfig,
}

/// Scores `triples` against E_old = `0..old_count` and splits them into K stages.
pub fn build_plan(
    triples: &[Triple],
    old_count: usize,
    stats: &GraphStats,
    store: &ModalityStore,
    cfg: &CurriculumConfig,
) -> Result<CurriculumPlan> {
    cfg.validate()?;
    let entity_count = stats.len();
    let mut known_set = vec![false; entity_count.max(old_count)];
    known_set[..old_count].iter_mut().for_each(|k| *k = true);
    let old: Vec<EntityId> = (0..old_count as EntityId).collect();
    if triples.is_empty() {
        log::warn!("curriculum over an empty triple set");
        return Ok(CurriculumPlan {
            stages: vec![Vec::new()],
            active: 0,
            known: known_set,
            cfg: cfg.clone(),
        });
    }
    let mut cache: HashMap<EntityId, f64> = HashMap::new();
    let mut scored = Vec::with_capacity(triples.len());
    for t in triples {
        let c_str = structural_connectivity(t, &known_set);
        let c_mm = if old.is_empty() {
            0.0
        } else {
            let mut best = 0.0f64;
            for u in [t.head, t.tail] {
                if !known(&known_set, u) {
                    let m = *cache.entry(u).or_insert_with(|| best_match(u, &old, store, cfg));
                    best = best.max(m);
                }
            }
            best
        };
        let c_rich = (stats.richness[t.head as usize] + stats.richness[t.tail as usize]) / 2.0;
        scored.push(Scored {
            triple: *t,
            phi: phi(cfg, c_str, c_mm, c_rich),
            c_str,
            c_mm,
            c_rich,
        });
    }
    let k = cfg.stages.min(scored.len());
    Ok(CurriculumPlan {
        stages: partition(scored, k),
        active: 0,
        known: known_set,
        cfg: cfg.clone(),
    })
}

impl CurriculumPlan {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Index of the active stage; equals `stage_count()` once all are done.
    pub fn active(&self) -> usize {
        self.active
    }

    pub fn is_finished(&self) -> bool {
        self.active >= self.stages.len()
    }

    pub fn stage(&self, k: usize) -> &[Scored] {
        &self.stages[k]
    }

    pub fn stages(&self) -> &[Vec<Scored>] {
        &self.stages
    }

    pub fn is_known(&self, e: EntityId) -> bool {
        known(&self.known, e)
    }

    /// Triples of stages `0..=active` (all stages once finished).
    pub fn eligible(&self) -> Vec<Triple> {
        let end = (self.active + 1).min(self.stages.len());
        self.stages[..end].iter().flatten().map(|s| s.triple).collect()
    }

    /// All triples in plan order.
    pub fn ordered(&self) -> Vec<Triple> {
        self.stages.iter().flatten().map(|s| s.triple).collect()
    }

    /// Marks stage `completed` as trained: its entities become known, c_str of
    /// the remainder is recomputed and the remainder re-sorted and
    /// re-partitioned into the remaining stage count.
    pub fn advance(&mut self, completed: usize) -> Result<()> {
        if completed != self.active || self.is_finished() {
            return Err(Error::Contract(format!(
                "advance({completed}) while stage {} is active",
                self.active
            )));
        }
        for s in &self.stages[completed] {
            for e in [s.triple.head, s.triple.tail] {
                let i = e as usize;
                if i >= self.known.len() {
                    self.known.resize(i + 1, false);
                }
                self.known[i] = true;
            }
        }
        let rest_k = self.stages.len() - completed - 1;
        if rest_k > 0 {
            let rest: Vec<Scored> = self.stages.drain(completed + 1..).flatten().collect();
            let rest: Vec<Scored> = rest
                .into_iter()
                .map(|mut s| {
                    s.c_str = structural_connectivity(&s.triple, &self.known);
                    s.phi = phi(&self.cfg, s.c_str, s.c_mm, s.c_rich);
                    s
                })
                .collect();
            self.stages.extend(partition(rest, rest_k));
        }
        self.active += 1;
        Ok(())
    }

    pub fn records(&self) -> Vec<PlanRecord> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(k, st)| {
                st.iter().map(move |s| PlanRecord {
                    stage: k,
                    head: s.triple.head,
                    relation: s.triple.relation,
                    tail: s.triple.tail,
                    phi: s.phi,
                    c_str: s.c_str,
                    c_mm: s.c_mm,
                    c_rich: s.c_rich,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn stats(richness: Vec<f64>) -> GraphStats {
        let n = richness.len();
        GraphStats {
            degree: vec![0; n],
            degree_centrality: vec![0.0; n],
            betweenness: vec![0.0; n],
            richness,
        }
    }

    fn store_with(pooled: &[(Option<Vec<f64>>, Option<Vec<f64>>)]) -> ModalityStore {
        let mut s = ModalityStore::new(2, 2);
        for (e, (v, w)) in pooled.iter().enumerate() {
            if let Some(v) = v {
                s.set_visual(e as u32, Tensor::matrix(1, 2, v.clone()).unwrap(), None)
                    .unwrap();
            }
            if let Some(w) = w {
                s.set_text(e as u32, Tensor::matrix(1, 2, w.clone()).unwrap(), None)
                    .unwrap();
            }
        }
        s
    }

    #[test]
    fn connectivity_indicator() {
        let old = [true, true, false, false];
        assert_eq!(structural_connectivity(&Triple::new(0, 0, 1), &old), 1);
        assert_eq!(structural_connectivity(&Triple::new(2, 0, 3), &old), 0);
        assert_eq!(structural_connectivity(&Triple::new(0, 0, 3), &old), 1);
    }

    #[test]
    fn similarity_arms() {
        let a = Some(vec![1.0, 0.0]);
        let b = Some(vec![0.0, 1.0]);
        let s = store_with(&[
            (a.clone(), a.clone()),
            (a.clone(), a.clone()),
            (b.clone(), b.clone()),
            (None, a.clone()),
        ]);
        assert!((mm_similarity(0, 1, &s, 0.5, 0.5) - 1.0).abs() < 1e-15);
        assert_eq!(mm_similarity(0, 2, &s, 0.5, 0.5), 0.0);
        assert!((mm_similarity(3, 0, &s, 0.5, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn compatibility_is_exhaustive_max() {
        let s = store_with(&[
            (Some(vec![1.0, 0.2]), Some(vec![0.3, 1.0])),
            (Some(vec![-1.0, 0.5]), None),
            (Some(vec![0.4, 0.4]), Some(vec![1.0, -1.0])),
            (Some(vec![0.9, 0.1]), Some(vec![0.5, 0.6])),
        ]);
        let cfg = CurriculumConfig::default();
        let old = [0u32, 1, 2];
        let old_set = [true, true, true, false];
        let t = Triple::new(3, 0, 1);
        let oracle = old
            .iter()
            .map(|&e| mm_similarity(3, e, &s, 0.5, 0.5))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(compatibility(&t, &old, &old_set, &s, &cfg), oracle.max(0.0));
        assert_eq!(compatibility(&Triple::new(0, 0, 1), &old, &old_set, &s, &cfg), 0.0);
        assert_eq!(compatibility(&t, &[], &[false; 4], &s, &cfg), 0.0);
    }

    #[test]
    fn score_formula_arms() {
        let cfg = CurriculumConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            ..CurriculumConfig::default()
        };
        let st = stats(vec![1.0, 1.0, 0.0, 0.0]);
        let empty = ModalityStore::new(2, 2);
        let old = [0u32, 1];
        let set = [true, true, false, false];
        assert_eq!(
            curriculum_score(&Triple::new(0, 0, 1), &old, &set, &st, &empty, &cfg).phi,
            2.0
        );
        assert_eq!(
            curriculum_score(&Triple::new(2, 0, 3), &old, &set, &st, &empty, &cfg).phi,
            0.0
        );
    }

    #[test]
    fn stage_size_rules() {
        assert_eq!(stage_sizes(6, 3), vec![2, 2, 2]);
        assert_eq!(stage_sizes(7, 3), vec![3, 2, 2]);
        let st = stats(vec![0.0; 4]);
        let empty = ModalityStore::new(2, 2);
        let cfg = CurriculumConfig {
            stages: 1,
            ..CurriculumConfig::default()
        };
        let ts = [Triple::new(2, 0, 3), Triple::new(0, 0, 3), Triple::new(1, 0, 2)];
        let plan = build_plan(&ts, 2, &st, &empty, &cfg).unwrap();
        assert_eq!(plan.stage_count(), 1);
        assert_eq!(
            plan.ordered(),
            vec![Triple::new(0, 0, 3), Triple::new(1, 0, 2), Triple::new(2, 0, 3)]
        );
        let none = build_plan(&[], 2, &st, &empty, &cfg).unwrap();
        assert_eq!(none.stage_count(), 1);
        assert!(none.stage(0).is_empty());
    }

    #[test]
    fn advance_flips_connectivity_and_checks_stage() {
        // stage 0 brings entity 2; the remaining triple (2, 0, 3) then becomes connected
        let st = stats(vec![0.0; 5]);
        let empty = ModalityStore::new(2, 2);
        let cfg = CurriculumConfig {
            stages: 2,
            ..CurriculumConfig::default()
        };
        let ts = [Triple::new(0, 0, 2), Triple::new(2, 0, 3)];
        let mut plan = build_plan(&ts, 2, &st, &empty, &cfg).unwrap();
        assert_eq!(plan.stage(1)[0].c_str, 0);
        assert!(plan.advance(1).is_err());
        plan.advance(0).unwrap();
        assert_eq!(plan.stage(1)[0].c_str, 1);
        assert_eq!(plan.eligible().len(), 2);
        plan.advance(1).unwrap();
        assert!(plan.is_finished());
        assert!(plan.advance(2).is_err());
    }
}
