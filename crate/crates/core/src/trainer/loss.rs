//! Objective assembly: L = L_kgr + λ_cmkp·L_CMKP + λ_rep·L_MMCR (+ EWC penalty).

use serde::{Deserialize, Serialize};

use crate::backbone::{
    encode, head_queries, tail_queries, triple_scores, Bound, EntityBatch, ModelParams, StructuralSlot,
};
use crate::graph::Triple;
use crate::numerics::{Tape, Tensor, Var};
use crate::preservation::{cmkp_terms, CmkpScope, CmkpTerms, CurrentVars, FrozenReference};
use crate::replay::{mmcr_terms, MmcrTerms, ReplayConfig};

use super::ewc::EwcAnchor;

/// What a single optimisation step sees besides the batch itself.
pub struct StepContext<'a> {
    /// Token layout of every current entity.
    pub entities: &'a EntityBatch,
    pub frozen: Option<&'a FrozenReference>,
    pub ewc: Option<&'a EwcAnchor>,
    pub cmkp: bool,
    pub mmcr: bool,
    pub scope: CmkpScope,
    pub lambda_cmkp: f64,
    pub lambda_rep: f64,
    pub lambda_ewc: f64,
    pub replay: &'a ReplayConfig,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_kgr: Var,
    pub cmkp: CmkpTerms,
    pub mmcr: MmcrTerms,
    pub l_ewc: Var,
    pub total: Var,
}

/// Scalar values of every term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_kgr: f64,
    pub l_str: f64,
    pub l_mod: f64,
    pub l_align: f64,
    pub l_remb: f64,
    pub l_rpat: f64,
    pub l_anc: f64,
    pub l_rep_emb: f64,
    pub l_rep_score: f64,
    pub l_ewc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, v: &LossVars) -> Self {
        let g = |x: Var| tape.item(x);
        LossBreakdown {
            l_kgr: g(v.l_kgr),
            l_str: g(v.cmkp.l_str),
            l_mod: g(v.cmkp.l_mod),
            l_align: g(v.cmkp.l_align),
            l_remb: g(v.cmkp.l_remb),
            l_rpat: g(v.cmkp.l_rpat),
            l_anc: g(v.cmkp.l_anc),
            l_rep_emb: g(v.mmcr.l_rep_emb),
            l_rep_score: g(v.mmcr.l_rep_score),
            l_ewc: g(v.l_ewc),
            total: g(v.total),
        }
    }

    fn fields(&self) -> [f64; 11] {
        [
            self.l_kgr,
            self.l_str,
            self.l_mod,
            self.l_align,
            self.l_remb,
            self.l_rpat,
            self.l_anc,
            self.l_rep_emb,
            self.l_rep_score,
            self.l_ewc,
            self.total,
        ]
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        let mut f = self.fields();
        for (a, b) in f.iter_mut().zip(other.fields()) {
            *a += b;
        }
        *self = Self::from_fields(f);
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_fields(self.fields().map(|v| v * c))
    }

    fn from_fields(f: [f64; 11]) -> Self {
        LossBreakdown {
            l_kgr: f[0],
            l_str: f[1],
            l_mod: f[2],
            l_align: f[3],
            l_remb: f[4],
            l_rpat: f[5],
            l_anc: f[6],
            l_rep_emb: f[7],
            l_rep_score: f[8],
            l_ewc: f[9],
            total: f[10],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }
}

fn column(triples: &[Triple], f: impl Fn(&Triple) -> u32) -> Vec<usize> {
    triples.iter().map(|t| f(t) as usize).collect()
}

/// Mean of tail and head 1-vs-all softmax cross-entropy over `triples`.
pub fn kgr_loss(tape: &mut Tape, bound: &Bound, params: &ModelParams, enc: Var, triples: &[Triple]) -> Var {
    if triples.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let h = column(triples, |x| x.head);
    let r = column(triples, |x| x.relation);
    let t = column(triples, |x| x.tail);
    let yt = tail_queries(tape, bound, params, enc, &h, &r);
    let lt = tape.matmul_nt(yt, enc);
    let ct = tape.cross_entropy_rows(lt, &t);
    let ct = tape.mean_all(ct);
    let yh = head_queries(tape, bound, params, enc, &t, &r);
    let lh = tape.matmul_nt(yh, enc);
    let ch = tape.cross_entropy_rows(lh, &h);
    let ch = tape.mean_all(ch);
    let s = tape.add(ct, ch);
    tape.scale(s, 0.5)
}

/// Builds every term on `tape` for one batch of new triples plus `replay`
/// triples. `frozen_replay_scores[k]` is S^(i-1) of `replay[k]`.
pub fn build_loss(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    ctx: &StepContext,
    batch: &[Triple],
    replay: &[Triple],
    frozen_replay_scores: &[f64],
) -> LossVars {
    let enc = encode(tape, bound, params, ctx.entities, StructuralSlot::Learned);
    let mut all = batch.to_vec();
    all.extend_from_slice(replay);
    let l_kgr = kgr_loss(tape, bound, params, enc.e, &all);
    let mut cmkp = CmkpTerms::zeros(tape);
    let mut mmcr = MmcrTerms::zeros(tape);
    let mut l_ewc = tape.constant(Tensor::scalar(0.0));
    let mut extra = Vec::new();
    if let Some(fr) = ctx.frozen {
        let mmcr_on = ctx.mmcr && ctx.scope == CmkpScope::All;
        let need_scores = !replay.is_empty() && (mmcr_on || (ctx.cmkp && ctx.scope == CmkpScope::All));
        let cur_scores = need_scores.then(|| {
            let idx: Vec<(usize, usize, usize)> = replay
                .iter()
                .map(|t| (t.head as usize, t.relation as usize, t.tail as usize))
                .collect();
            triple_scores(tape, bound, params, enc.e, &idx)
        });
        let fv = fr.constants(tape, frozen_replay_scores);
        let cur = CurrentVars {
            e: enc.e,
            vbar: enc.vbar,
            wbar: enc.wbar,
            relations: bound.var(params.ids.r),
            p: bound.var(params.ids.p),
            replay_scores: cur_scores,
        };
        if ctx.cmkp {
            cmkp = cmkp_terms(tape, &cur, &fv, fr, replay, ctx.scope);
            extra.push(tape.scale(cmkp.total, ctx.lambda_cmkp));
        }
        if mmcr_on {
            mmcr = mmcr_terms(tape, enc.e, fv.e, cur_scores, fv.replay_scores, replay, ctx.replay);
            extra.push(tape.scale(mmcr.total, ctx.lambda_rep));
        }
    }
    if let Some(ewc) = ctx.ewc {
        l_ewc = ewc.penalty(tape, bound, ctx.lambda_ewc);
        extra.push(l_ewc);
    }
    let total = if extra.is_empty() {
        l_kgr
    } else {
        extra.insert(0, l_kgr);
        tape.sum_scalars(&extra)
    };
    LossVars {
        l_kgr,
        cmkp,
        mmcr,
        l_ewc,
        total,
    }
}
