//! Knowledge preservation against a frozen copy of the previous snapshot's
//! model: entity stability, modality drift, visual-text alignment, relation
//! stability, relation score patterns and modal anchors.

use serde::{Deserialize, Serialize};

use crate::backbone::{encode, triple_scores, Bound, EntityBatch, ModelParams, Scorer, StructuralSlot};
use crate::graph::{EntityId, GraphStats, ModalityStore, Triple};
use crate::numerics::{Tape, Tensor, Var, SMOOTH_L1_BETA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreservationConfig {
    pub lambda0: f64,
    pub delta: f64,
    pub smooth_l1_beta: f64,
}

impl Default for PreservationConfig {
    fn default() -> Self {
        PreservationConfig {
            lambda0: 1.0,
            delta: 0.5,
            smooth_l1_beta: SMOOTH_L1_BETA,
        }
    }
}

/// λ_e = λ0 · (f̃_nc + f̃_bc + δ·M(e)).
pub fn importance_weight(e: EntityId, stats: &GraphStats, lambda0: f64, delta: f64) -> f64 {
    let i = e as usize;
    lambda0 * (stats.degree_centrality[i] + stats.betweenness[i] + delta * stats.richness[i])
}

pub fn importance_weights(stats: &GraphStats, count: usize, lambda0: f64, delta: f64) -> Vec<f64> {
    (0..count as EntityId)
        .map(|e| importance_weight(e, stats, lambda0, delta))
        .collect()
}

/// Immutable view of θ_{i-1} with cached encodings, anchors and weights.
#[derive(Clone, Debug)]
pub struct FrozenReference {
    params: ModelParams,
    encodings: Tensor,
    vbar: Tensor,
    wbar: Tensor,
    anchors: Tensor,
    anchor_targets: Tensor,
    /// Old entities with both modalities.
    dual: Vec<usize>,
    dual_cosines: Tensor,
    has_visual: Vec<usize>,
    has_text: Vec<usize>,
    weights: Vec<f64>,
    cfg: PreservationConfig,
}

/// Frozen-side tape values used by the losses.
#[derive(Clone, Copy, Debug)]
pub struct FrozenVars {
    /// `|E_old| × d`.
    pub e: Var,
    pub vbar: Var,
    pub wbar: Var,
    /// cos(v̄, w̄) per dual-modality old entity.
    pub dual_cosines: Var,
    /// Relation table rows of R_old.
    pub relations: Var,
    /// Q^(i-1)(a_e) per old entity.
    pub anchor_targets: Var,
    /// S^(i-1) of the replay triples given to the constructor.
    pub replay_scores: Var,
}

impl FrozenReference {
    /// `stats` must be the statistics of snapshot i-1.
    pub fn build(params: ModelParams, store: &ModalityStore, stats: &GraphStats, cfg: &PreservationConfig) -> Self {
        let n = params.entity_count();
        let all: Vec<EntityId> = (0..n as EntityId).collect();
        let batch = EntityBatch::new(store, &all);
        let mut tape = Tape::new();
        let bound = Bound::constants(&mut tape, &params);
        let enc = encode(&mut tape, &bound, &params, &batch, StructuralSlot::Learned);
        let anc = encode(&mut tape, &bound, &params, &batch, StructuralSlot::Zero);
        let targets = tape.matmul(anc.e, bound.var(params.ids.q));
        let dual: Vec<usize> = (0..n)
            .filter(|&i| batch.has_visual()[i] && batch.has_text()[i])
            .collect();
        let dv = tape.gather_rows(enc.vbar, &dual);
        let dw = tape.gather_rows(enc.wbar, &dual);
        let cos = tape.cosine_rows(dv, dw);
        let has_visual = (0..n).filter(|&i| batch.has_visual()[i]).collect();
        let has_text = (0..n).filter(|&i| batch.has_text()[i]).collect();
        FrozenReference {
            encodings: tape.value(enc.e).clone(),
            vbar: tape.value(enc.vbar).clone(),
            wbar: tape.value(enc.wbar).clone(),
            anchors: tape.value(anc.e).clone(),
            anchor_targets: tape.value(targets).clone(),
            dual_cosines: tape.value(cos).clone(),
            dual,
            has_visual,
            has_text,
            weights: importance_weights(stats, n, cfg.lambda0, cfg.delta),
            cfg: cfg.clone(),
            params,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn old_entities(&self) -> usize {
        self.params.entity_count()
    }

    pub fn old_relations(&self) -> usize {
        self.params.relation_count()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn encodings(&self) -> &Tensor {
        &self.encodings
    }

    pub fn anchors(&self) -> &Tensor {
        &self.anchors
    }

    pub fn anchor_targets(&self) -> &Tensor {
        &self.anchor_targets
    }

    pub fn dual(&self) -> &[usize] {
        &self.dual
    }

    pub fn config(&self) -> &PreservationConfig {
        &self.cfg
    }

    /// Frozen scores S^(i-1) of `triples` (all ids must be old).
    pub fn scores(&self, store: &ModalityStore, triples: &[Triple]) -> Vec<f64> {
        if triples.is_empty() {
            return Vec::new();
        }
        let sc = Scorer::new(&self.params, store);
        let mut tape = Tape::new();
        let bound = Bound::constants(&mut tape, &self.params);
        let enc = tape.constant(sc.encodings().clone());
        let idx: Vec<(usize, usize, usize)> = triples
            .iter()
            .map(|t| (t.head as usize, t.relation as usize, t.tail as usize))
            .collect();
        let s = triple_scores(&mut tape, &bound, &self.params, enc, &idx);
        tape.value(s).data().to_vec()
    }

    /// Cached values as tape constants.
    pub fn constants(&self, tape: &mut Tape, replay_scores: &[f64]) -> FrozenVars {
        let r = self.params.get(self.params.ids.r).clone();
        FrozenVars {
            e: tape.constant(self.encodings.clone()),
            vbar: tape.constant(self.vbar.clone()),
            wbar: tape.constant(self.wbar.clone()),
            dual_cosines: tape.constant(self.dual_cosines.clone()),
            relations: tape.constant(r),
            anchor_targets: tape.constant(self.anchor_targets.clone()),
            replay_scores: tape
                .constant(Tensor::matrix(replay_scores.len(), 1, replay_scores.to_vec()).expect("score column")),
        }
    }

    /// Recomputes every frozen value on `tape` from trainable leaves of the
    /// frozen parameters, detached with stop-gradient. Used to audit that no
    /// gradient reaches the frozen model.
    pub fn traced(&self, tape: &mut Tape, store: &ModalityStore, replay: &[Triple]) -> (Bound, FrozenVars) {
        let p = &self.params;
        let bound = Bound::leaves(tape, p);
        let all: Vec<EntityId> = (0..p.entity_count() as EntityId).collect();
        let batch = EntityBatch::new(store, &all);
        let enc = encode(tape, &bound, p, &batch, StructuralSlot::Learned);
        let anc = encode(tape, &bound, p, &batch, StructuralSlot::Zero);
        let targets = tape.matmul(anc.e, bound.var(p.ids.q));
        let dv = tape.gather_rows(enc.vbar, &self.dual);
        let dw = tape.gather_rows(enc.wbar, &self.dual);
        let cos = tape.cosine_rows(dv, dw);
        let idx: Vec<(usize, usize, usize)> = replay
            .iter()
            .map(|t| (t.head as usize, t.relation as usize, t.tail as usize))
            .collect();
        let scores = if idx.is_empty() {
            tape.constant(Tensor::zeros(&[0, 1]))
        } else {
            triple_scores(tape, &bound, p, enc.e, &idx)
        };
        let vars = FrozenVars {
            e: tape.stop_gradient(enc.e),
            vbar: tape.stop_gradient(enc.vbar),
            wbar: tape.stop_gradient(enc.wbar),
            dual_cosines: tape.stop_gradient(cos),
            relations: tape.stop_gradient(bound.var(p.ids.r)),
            anchor_targets: tape.stop_gradient(targets),
            replay_scores: tape.stop_gradient(scores),
        };
        (bound, vars)
    }
}

/// Current-model tape values the losses compare against the frozen side.
#[derive(Clone, Copy, Debug)]
pub struct CurrentVars {
    /// Encodings of all current entities (old ids first).
    pub e: Var,
    pub vbar: Var,
    pub wbar: Var,
    /// Current relation table.
    pub relations: Var,
    /// Projection head P.
    pub p: Var,
    /// Current scores of the replay triples (`n × 1`), if any.
    pub replay_scores: Option<Var>,
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn prefix(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Σ_e λ_e · SmoothL1(e^(i), e^(i-1)) over old entities.
pub fn entity_stability_loss(tape: &mut Tape, cur: Var, frozen: Var, weights: &[f64], beta: f64) -> Var {
    let n = weights.len();
    if n == 0 {
        return zero(tape);
    }
    let c = tape.gather_rows(cur, &prefix(n));
    let rows = tape.smooth_l1_rows(c, frozen, beta);
    let w = tape.constant(Tensor::matrix(n, 1, weights.to_vec()).expect("weight column"));
    let weighted = tape.mul(rows, w);
    tape.sum_all(weighted)
}

/// Σ_e ‖v̄^(i) − v̄^(i-1)‖² + ‖w̄^(i) − w̄^(i-1)‖² over old entities with cached modality vectors.
pub fn modality_drift_loss(
    tape: &mut Tape,
    cur: &CurrentVars,
    frozen: &FrozenVars,
    frozen_ref: &FrozenReference,
) -> Var {
    let mut terms = Vec::new();
    for (c, f, rows) in [
        (cur.vbar, frozen.vbar, &frozen_ref.has_visual),
        (cur.wbar, frozen.wbar, &frozen_ref.has_text),
    ] {
        if rows.is_empty() {
            continue;
        }
        let a = tape.gather_rows(c, rows);
        let b = tape.gather_rows(f, rows);
        let d = tape.sq_dist_rows(a, b);
        terms.push(tape.sum_all(d));
    }
    tape.sum_scalars(&terms)
}

/// Σ over dual-modality old entities of SmoothL1(cos(v̄, w̄) now, cos before).
pub fn alignment_consistency_loss(
    tape: &mut Tape,
    cur: &CurrentVars,
    frozen: &FrozenVars,
    dual: &[usize],
    beta: f64,
) -> Var {
    if dual.is_empty() {
        return zero(tape);
    }
    let v = tape.gather_rows(cur.vbar, dual);
    let w = tape.gather_rows(cur.wbar, dual);
    let c = tape.cosine_rows(v, w);
    let rows = tape.smooth_l1_rows(c, frozen.dual_cosines, beta);
    tape.sum_all(rows)
}

/// Mean over R_old of SmoothL1(r^(i), r^(i-1)).
pub fn relation_embedding_loss(tape: &mut Tape, cur: Var, frozen: Var, old_relations: usize, beta: f64) -> Var {
    if old_relations == 0 {
        return zero(tape);
    }
    let c = tape.gather_rows(cur, &prefix(old_relations));
    let rows = tape.smooth_l1_rows(c, frozen, beta);
    tape.mean_all(rows)
}

/// Mean SmoothL1 between current and detached frozen scores over the replay
/// triples whose relation is old.
pub fn relation_pattern_loss(
    tape: &mut Tape,
    cur_scores: Var,
    frozen_scores: Var,
    replay: &[Triple],
    old_relations: usize,
    beta: f64,
) -> Var {
    let keep: Vec<usize> = replay
        .iter()
        .enumerate()
        .filter(|(_, t)| (t.relation as usize) < old_relations)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return zero(tape);
    }
    let c = tape.gather_rows(cur_scores, &keep);
    let f = tape.gather_rows(frozen_scores, &keep);
    let f = tape.stop_gradient(f);
    let rows = tape.smooth_l1_rows(c, f, beta);
    tape.mean_all(rows)
}

/// Σ_e SmoothL1(P(e^(i)), sg(Q^(i-1)(a_e))) over old entities.
pub fn anchor_loss(tape: &mut Tape, cur: &CurrentVars, frozen: &FrozenVars, old_entities: usize, beta: f64) -> Var {
    if old_entities == 0 {
        return zero(tape);
    }
    let e = tape.gather_rows(cur.e, &prefix(old_entities));
    let pe = tape.matmul(e, cur.p);
    let target = tape.stop_gradient(frozen.anchor_targets);
    let rows = tape.smooth_l1_rows(pe, target, beta);
    tape.sum_all(rows)
}

/// Which CMKP terms are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmkpScope {
    /// L_mod and L_align only (first optimisation stage).
    ModalityOnly,
    All,
}

/// Individual CMKP terms; absent terms are constant zeros.
#[derive(Clone, Copy, Debug)]
pub struct CmkpTerms {
    pub l_str: Var,
    pub l_mod: Var,
    pub l_align: Var,
    pub l_remb: Var,
    pub l_rpat: Var,
    pub l_anc: Var,
    pub total: Var,
}

impl CmkpTerms {
    pub fn zeros(tape: &mut Tape) -> Self {
        let z = zero(tape);
        CmkpTerms {
            l_str: z,
            l_mod: z,
            l_align: z,
            l_remb: z,
            l_rpat: z,
            l_anc: z,
            total: z,
        }
    }
}

/// L_CMKP = (L_str + L_mod + L_align) + (L_remb + L_rpat) + L_anc.
pub fn cmkp_terms(
    tape: &mut Tape,
    cur: &CurrentVars,
    frozen: &FrozenVars,
    frozen_ref: &FrozenReference,
    replay: &[Triple],
    scope: CmkpScope,
) -> CmkpTerms {
    let beta = frozen_ref.cfg.smooth_l1_beta;
    let l_mod = modality_drift_loss(tape, cur, frozen, frozen_ref);
    let l_align = alignment_consistency_loss(tape, cur, frozen, &frozen_ref.dual, beta);
    if scope == CmkpScope::ModalityOnly {
        let z = zero(tape);
        let total = tape.add(l_mod, l_align);
        return CmkpTerms {
            l_str: z,
            l_mod,
            l_align,
            l_remb: z,
            l_rpat: z,
            l_anc: z,
            total,
        };
    }
    let l_str = entity_stability_loss(tape, cur.e, frozen.e, &frozen_ref.weights, beta);
    let l_remb = relation_embedding_loss(tape, cur.relations, frozen.relations, frozen_ref.old_relations(), beta);
    let l_rpat = match cur.replay_scores {
        Some(s) if !replay.is_empty() => {
            relation_pattern_loss(tape, s, frozen.replay_scores, replay, frozen_ref.old_relations(), beta)
        }
        _ => zero(tape),
    };
    let l_anc = anchor_loss(tape, cur, frozen, frozen_ref.old_entities(), beta);
    let total = tape.sum_scalars(&[l_str, l_mod, l_align, l_remb, l_rpat, l_anc]);
    CmkpTerms {
        l_str,
        l_mod,
        l_align,
        l_remb,
        l_rpat,
        l_anc,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::graph::EntityId;
    use crate::numerics::smooth_l1_scalar;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 4,
            d_v: 3,
            d_w: 2,
            d_p: 2,
            d_ff: 8,
            init_std: 0.4,
            ..ModelConfig::default()
        }
    }

    fn store(n: usize) -> ModalityStore {
        let mut rng = crate::seed::rng(5, "pstore", 0);
        let mut s = ModalityStore::new(3, 2);
        for e in 0..n as EntityId {
            if e % 3 != 2 {
                let v = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                s.set_visual(e, Tensor::matrix(2, 3, v).unwrap(), None).unwrap();
            }
            if e % 3 != 1 {
                let w = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                s.set_text(e, Tensor::matrix(2, 2, w).unwrap(), None).unwrap();
            }
        }
        s
    }

    fn stats(n: usize) -> GraphStats {
        GraphStats {
            degree: vec![1; n],
            degree_centrality: (0..n).map(|i| i as f64 / n as f64).collect(),
            betweenness: vec![0.1; n],
            richness: vec![0.5; n],
        }
    }

    fn current(tape: &mut Tape, p: &ModelParams, s: &ModalityStore, replay: &[Triple]) -> (Bound, CurrentVars) {
        let bound = Bound::leaves(tape, p);
        let all: Vec<EntityId> = (0..p.entity_count() as EntityId).collect();
        let enc = encode(tape, &bound, p, &EntityBatch::new(s, &all), StructuralSlot::Learned);
        let idx: Vec<_> = replay
            .iter()
            .map(|t| (t.head as usize, t.relation as usize, t.tail as usize))
            .collect();
        let rs = (!idx.is_empty()).then(|| triple_scores(tape, &bound, p, enc.e, &idx));
        let cur = CurrentVars {
            e: enc.e,
            vbar: enc.vbar,
            wbar: enc.wbar,
            relations: bound.var(p.ids.r),
            p: bound.var(p.ids.p),
            replay_scores: rs,
        };
        (bound, cur)
    }

    #[test]
    fn weight_arithmetic() {
        let st = GraphStats {
            degree: vec![0, 0],
            degree_centrality: vec![0.0, 1.0],
            betweenness: vec![0.0, 1.0],
            richness: vec![0.0, 1.0],
        };
        assert_eq!(importance_weight(0, &st, 1.0, 0.5), 0.0);
        assert_eq!(importance_weight(1, &st, 1.0, 0.5), 2.5);
        assert_eq!(importance_weight(1, &st, 2.0, 0.5), 5.0);
    }

    #[test]
    fn identical_models_give_zero_except_anchor() {
        let p = ModelParams::init(&cfg(), 6, 2, 1).unwrap();
        let s = store(6);
        let fr = FrozenReference::build(p.clone(), &s, &stats(6), &PreservationConfig::default());
        let replay = [Triple::new(0, 0, 1), Triple::new(2, 1, 3)];
        let mut tape = Tape::new();
        let (_, cur) = current(&mut tape, &p, &s, &replay);
        let fv = fr.constants(&mut tape, &fr.scores(&s, &replay));
        let t = cmkp_terms(&mut tape, &cur, &fv, &fr, &replay, CmkpScope::All);
        for v in [t.l_str, t.l_mod, t.l_align, t.l_remb, t.l_rpat] {
            assert_eq!(tape.item(v), 0.0);
        }
        assert!(tape.item(t.l_anc) >= 0.0);
    }

    #[test]
    fn traced_matches_cache_and_frozen_gets_no_gradient() {
        let p0 = ModelParams::init(&cfg(), 5, 2, 1).unwrap();
        let mut p1 = p0.clone();
        p1.register_new_entities(&[5, 6], &[2], 3).unwrap();
        for t in p1.tensors.iter_mut() {
            for v in t.data_mut() {
                *v += 0.05;
            }
        }
        let s = store(7);
        let fr = FrozenReference::build(p0, &s, &stats(5), &PreservationConfig::default());
        let replay = [Triple::new(0, 0, 1), Triple::new(4, 1, 3), Triple::new(2, 1, 2)];
        let mut tape = Tape::new();
        let (_, cur) = current(&mut tape, &p1, &s, &replay);
        let cached = fr.constants(&mut tape, &fr.scores(&s, &replay));
        let (fb, fv) = fr.traced(&mut tape, &s, &replay);
        for (a, b) in [
            (cached.e, fv.e),
            (cached.vbar, fv.vbar),
            (cached.dual_cosines, fv.dual_cosines),
            (cached.anchor_targets, fv.anchor_targets),
            (cached.replay_scores, fv.replay_scores),
        ] {
            assert_eq!(tape.value(a), tape.value(b));
        }
        let t = cmkp_terms(&mut tape, &cur, &fv, &fr, &replay, CmkpScope::All);
        let g = tape.backward(t.total).unwrap();
        for v in fb.vars() {
            assert!(g.get(*v).map_or(true, |x| x.iter().all(|&y| y == 0.0)));
        }
    }

    #[test]
    fn stability_loss_matches_loop() {
        let p0 = ModelParams::init(&cfg(), 3, 1, 2).unwrap();
        let mut p1 = p0.clone();
        p1.get_mut(p1.ids.s).data_mut()[0] += 0.7;
        let s = store(3);
        let st = stats(3);
        let fr = FrozenReference::build(p0.clone(), &s, &st, &PreservationConfig::default());
        let mut tape = Tape::new();
        let (_, cur) = current(&mut tape, &p1, &s, &[]);
        let fv = fr.constants(&mut tape, &[]);
        let l = entity_stability_loss(&mut tape, cur.e, fv.e, fr.weights(), 1.0);
        let now = Scorer::new(&p1, &s);
        let mut want = 0.0;
        for e in 0..3usize {
            let a = now.encodings().row_slice(e);
            let b = fr.encodings().row_slice(e);
            let m: f64 = a.iter().zip(b).map(|(x, y)| smooth_l1_scalar(x - y, 1.0)).sum::<f64>() / 4.0;
            want += importance_weight(e as u32, &st, 1.0, 0.5) * m;
        }
        assert!((tape.item(l) - want).abs() < 1e-14);
        let doubled = importance_weights(&st, 3, 2.0, 0.5);
        let l2 = entity_stability_loss(&mut tape, cur.e, fv.e, &doubled, 1.0);
        assert_eq!(tape.item(l2), 2.0 * tape.item(l));
    }

    #[test]
    fn relation_shift_quadratic_arm() {
        let mut tape = Tape::new();
        let cur = tape.constant(Tensor::matrix(2, 2, vec![0.5, 0.5, 1.0, 1.0]).unwrap());
        let frz = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = relation_embedding_loss(&mut tape, cur, frz, 1, 1.0);
        assert_eq!(tape.item(l), 0.125);
    }

    #[test]
    fn pattern_loss_filters_new_relations() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let f = tape.constant(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let replay = [Triple::new(0, 5, 1), Triple::new(0, 0, 1)];
        let l = relation_pattern_loss(&mut tape, c, f, &replay, 1, 1.0);
        assert_eq!(tape.item(l), 2.5);
        let none = relation_pattern_loss(&mut tape, c, f, &replay[..1], 1, 1.0);
        assert_eq!(tape.item(none), 0.0);
    }

    #[test]
    fn anchors_ignore_learned_structural_rows() {
        let p0 = ModelParams::init(&cfg(), 4, 1, 2).unwrap();
        let mut p1 = p0.clone();
        p1.get_mut(p1.ids.s).data_mut().iter_mut().for_each(|v| *v *= -3.0);
        let s = store(4);
        let a = FrozenReference::build(p0, &s, &stats(4), &PreservationConfig::default());
        let b = FrozenReference::build(p1, &s, &stats(4), &PreservationConfig::default());
        assert_eq!(a.anchors(), b.anchors());
        assert_ne!(a.encodings(), b.encodings());
    }
}
