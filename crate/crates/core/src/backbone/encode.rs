use std::rc::Rc;

use crate::graph::{EntityId, ModalityStore};
use crate::numerics::{AttnBlock, Tape, Tensor, Var};

use super::params::{LayerIds, ModelParams};

/// Tape handles for every parameter tensor.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Trainable leaves.
    pub fn leaves(tape: &mut Tape, params: &ModelParams) -> Self {
        Bound {
            vars: params.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Constants (frozen models, inference).
    pub fn constants(tape: &mut Tape, params: &ModelParams) -> Self {
        Bound {
            vars: params.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Wraps handles already on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Which vector fills the structural slot of each entity sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructuralSlot {
    Learned,
    /// Zero vector (anchor encodings).
    Zero,
}

/// Precomputed token layout for encoding a fixed list of entities.
#[derive(Clone, Debug)]
pub struct EntityBatch {
    entities: Vec<EntityId>,
    visual_tokens: Tensor,
    text_tokens: Tensor,
    visual_mean: Tensor,
    text_mean: Tensor,
    picks_learned: Rc<[(u32, u32)]>,
    picks_zero: Rc<[(u32, u32)]>,
    blocks: Rc<[AttnBlock]>,
    ent_blocks: Rc<[AttnBlock]>,
    ent_rows: Vec<usize>,
    has_visual: Vec<bool>,
    has_text: Vec<bool>,
}

const SRC_ENT: u32 = 0;
const SRC_STRUCT: u32 = 1;
const SRC_VIS: u32 = 2;
const SRC_TXT: u32 = 3;

impl EntityBatch {
    pub fn new(store: &ModalityStore, entities: &[EntityId]) -> Self {
        let (d_v, d_w) = (store.d_v(), store.d_w());
        let n = entities.len();
        let mut vis = Vec::new();
        let mut txt = Vec::new();
        let mut vis_mean = vec![0.0; n * d_v];
        let mut txt_mean = vec![0.0; n * d_w];
        let mut learned = Vec::new();
        let mut zero = Vec::new();
        let mut blocks = Vec::with_capacity(n);
        let mut ent_blocks = Vec::with_capacity(n);
        let mut ent_rows = Vec::with_capacity(n);
        let (mut nv, mut nt) = (0u32, 0u32);
        let mut has_visual = Vec::with_capacity(n);
        let mut has_text = Vec::with_capacity(n);
        for (b, &e) in entities.iter().enumerate() {
            let start = learned.len();
            ent_rows.push(start);
            learned.push((SRC_ENT, 0));
            zero.push((SRC_ENT, 0));
            learned.push((SRC_STRUCT, e));
            zero.push((SRC_STRUCT, 0));
            let mut push_tokens = |m: Option<&crate::graph::EntityModality>,
                                   buf: &mut Vec<f64>,
                                   mean: &mut [f64],
                                   counter: &mut u32,
                                   src: u32,
                                   width: usize|
             -> bool {
                let Some(m) = m else { return false };
                let k = m.tokens.rows();
                buf.extend_from_slice(m.tokens.data());
                for r in 0..k {
                    for (acc, v) in mean.iter_mut().zip(m.tokens.row_slice(r)) {
                        *acc += v;
                    }
                    learned.push((src, *counter));
                    zero.push((src, *counter));
                    *counter += 1;
                }
                mean.iter_mut().for_each(|v| *v /= k as f64);
                debug_assert_eq!(m.tokens.cols(), width);
                true
            };
            has_visual.push(push_tokens(
                store.visual(e),
                &mut vis,
                &mut vis_mean[b * d_v..(b + 1) * d_v],
                &mut nv,
                SRC_VIS,
                d_v,
            ));
            has_text.push(push_tokens(
                store.text(e),
                &mut txt,
                &mut txt_mean[b * d_w..(b + 1) * d_w],
                &mut nt,
                SRC_TXT,
                d_w,
            ));
            let len = learned.len() - start;
            blocks.push(AttnBlock {
                q_start: start,
                q_len: len,
                k_start: start,
                k_len: len,
            });
            ent_blocks.push(AttnBlock {
                q_start: b,
                q_len: 1,
                k_start: start,
                k_len: len,
            });
        }
        EntityBatch {
            entities: entities.to_vec(),
            visual_tokens: Tensor::matrix(nv as usize, d_v, vis).expect("visual token layout"),
            text_tokens: Tensor::matrix(nt as usize, d_w, txt).expect("text token layout"),
            visual_mean: Tensor::matrix(n, d_v, vis_mean).expect("visual mean layout"),
            text_mean: Tensor::matrix(n, d_w, txt_mean).expect("text mean layout"),
            picks_learned: learned.into(),
            picks_zero: zero.into(),
            blocks: blocks.into(),
            ent_blocks: ent_blocks.into(),
            ent_rows,
            has_visual,
            has_text,
        }
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Total assembled sequence length over all entities.
    pub fn token_rows(&self) -> usize {
        self.picks_learned.len()
    }

    /// Sequence length for entity at batch position `b`.
    pub fn sequence_len(&self, b: usize) -> usize {
        self.blocks[b].k_len
    }

    pub fn has_visual(&self) -> &[bool] {
        &self.has_visual
    }

    pub fn has_text(&self) -> &[bool] {
        &self.has_text
    }
}

/// Encoder outputs for a batch, one row per entity.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub e: Var,
    pub vbar: Var,
    pub wbar: Var,
}

fn attention_block(
    tape: &mut Tape,
    bound: &Bound,
    l: &LayerIds,
    h_q: Var,
    h_kv: Var,
    blocks: Rc<[AttnBlock]>,
    heads: usize,
) -> Var {
    let q = tape.matmul(h_q, bound.var(l.wq));
    let k = tape.matmul(h_kv, bound.var(l.wk));
    let v = tape.matmul(h_kv, bound.var(l.wv));
    let a = tape.attention(q, k, v, blocks, heads);
    tape.matmul(a, bound.var(l.wo))
}

fn feed_forward(tape: &mut Tape, bound: &Bound, l: &LayerIds, x: Var, eps: f64) -> Var {
    let h = tape.layer_norm(x, bound.var(l.ln2_g), bound.var(l.ln2_b), eps);
    let f = tape.matmul(h, bound.var(l.w1));
    let f = tape.add_bias(f, bound.var(l.b1));
    let f = tape.gelu(f);
    let f = tape.matmul(f, bound.var(l.w2));
    let f = tape.add_bias(f, bound.var(l.b2));
    tape.add(x, f)
}

/// Pre-LN transformer layer over all rows.
pub(crate) fn layer_full(
    tape: &mut Tape,
    bound: &Bound,
    l: &LayerIds,
    x: Var,
    blocks: Rc<[AttnBlock]>,
    heads: usize,
    eps: f64,
) -> Var {
    let h = tape.layer_norm(x, bound.var(l.ln1_g), bound.var(l.ln1_b), eps);
    let a = attention_block(tape, bound, l, h, h, blocks, heads);
    let x = tape.add(x, a);
    feed_forward(tape, bound, l, x, eps)
}

/// Same layer with outputs kept only at `rows` (one query per block).
fn layer_rows(
    tape: &mut Tape,
    bound: &Bound,
    l: &LayerIds,
    x: Var,
    rows: &[usize],
    blocks: Rc<[AttnBlock]>,
    heads: usize,
    eps: f64,
) -> Var {
    let h = tape.layer_norm(x, bound.var(l.ln1_g), bound.var(l.ln1_b), eps);
    let hq = tape.gather_rows(h, rows);
    let a = attention_block(tape, bound, l, hq, h, blocks, heads);
    let xr = tape.gather_rows(x, rows);
    let x = tape.add(xr, a);
    feed_forward(tape, bound, l, x, eps)
}

/// Encodes every entity of `batch`.
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    batch: &EntityBatch,
    slot: StructuralSlot,
) -> Encoded {
    let ids = &params.ids;
    let cfg = &params.config;
    let vis = tape.constant(batch.visual_tokens.clone());
    let txt = tape.constant(batch.text_tokens.clone());
    let proj_v = tape.matmul(vis, bound.var(ids.w_v));
    let proj_w = tape.matmul(txt, bound.var(ids.w_w));
    let (structural, picks) = match slot {
        StructuralSlot::Learned => (bound.var(ids.s), batch.picks_learned.clone()),
        StructuralSlot::Zero => (tape.constant(Tensor::zeros(&[1, cfg.d])), batch.picks_zero.clone()),
    };
    let mut x = tape.gather(&[bound.var(ids.ent), structural, proj_v, proj_w], picks);
    let last = cfg.layers - 1;
    for l in &ids.enc[..last] {
        x = layer_full(tape, bound, l, x, batch.blocks.clone(), cfg.heads, cfg.ln_eps);
    }
    let x = layer_rows(
        tape,
        bound,
        &ids.enc[last],
        x,
        &batch.ent_rows,
        batch.ent_blocks.clone(),
        cfg.heads,
        cfg.ln_eps,
    );
    let e = tape.layer_norm(x, bound.var(ids.enc_ln_g), bound.var(ids.enc_ln_b), cfg.ln_eps);
    let vm = tape.constant(batch.visual_mean.clone());
    let wm = tape.constant(batch.text_mean.clone());
    let vbar = tape.matmul(vm, bound.var(ids.w_v));
    let wbar = tape.matmul(wm, bound.var(ids.w_w));
    Encoded { e, vbar, wbar }
}

/// Refines `(a_b, b_b)` pairs with the contextual encoder; returns the two
/// refined rows per pair.
pub fn contextual(tape: &mut Tape, bound: &Bound, params: &ModelParams, a: Var, b: Var) -> (Var, Var) {
    let ids = &params.ids;
    let cfg = &params.config;
    let n = tape.value(a).rows();
    let picks: Rc<[(u32, u32)]> = (0..n as u32).flat_map(|i| [(0, i), (1, i)]).collect();
    let blocks: Rc<[AttnBlock]> = (0..n)
        .map(|i| AttnBlock {
            q_start: 2 * i,
            q_len: 2,
            k_start: 2 * i,
            k_len: 2,
        })
        .collect();
    let x = tape.gather(&[a, b], picks);
    let x = layer_full(tape, bound, &ids.ctx, x, blocks, cfg.heads, cfg.ln_eps);
    let x = tape.layer_norm(x, bound.var(ids.ctx_ln_g), bound.var(ids.ctx_ln_b), cfg.ln_eps);
    let even: Vec<usize> = (0..n).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
    (tape.gather_rows(x, &even), tape.gather_rows(x, &odd))
}

/// `W ×₁ ĥ ×₂ r̂` for each row (tail queries): `n × d`, to be dotted with tail encodings.
pub fn tail_projection(tape: &mut Tape, bound: &Bound, params: &ModelParams, h: Var, r: Var) -> Var {
    let o = tape.outer_rows(h, r);
    tape.matmul(o, bound.var(params.ids.core))
}

/// `W ×₂ r̂ ×₃ t̂` for each row (head queries): `n × d`, dotted with head encodings.
pub fn head_projection(tape: &mut Tape, bound: &Bound, params: &ModelParams, r: Var, t: Var) -> Var {
    let d = params.config.d;
    let o = tape.outer_rows(r, t);
    let w = tape.reshape(bound.var(params.ids.core), &[d, d * d]);
    tape.matmul_nt(o, w)
}

/// Query-side vectors for `(h, r, ?)`: contextual refinement of `(e_h, r)` then projection.
pub fn tail_queries(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    enc: Var,
    heads: &[usize],
    relations: &[usize],
) -> Var {
    let eh = tape.gather_rows(enc, heads);
    let rv = tape.gather_rows(bound.var(params.ids.r), relations);
    let (hh, rr) = contextual(tape, bound, params, eh, rv);
    tail_projection(tape, bound, params, hh, rr)
}

/// Query-side vectors for `(?, r, t)`.
pub fn head_queries(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    enc: Var,
    tails: &[usize],
    relations: &[usize],
) -> Var {
    let et = tape.gather_rows(enc, tails);
    let rv = tape.gather_rows(bound.var(params.ids.r), relations);
    let (tt, rr) = contextual(tape, bound, params, et, rv);
    head_projection(tape, bound, params, rr, tt)
}

/// Tail-direction scores of explicit triples, `n × 1`.
pub fn triple_scores(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    enc: Var,
    triples: &[(usize, usize, usize)],
) -> Var {
    let h: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let r: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let t: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let y = tail_queries(tape, bound, params, enc, &h, &r);
    let et = tape.gather_rows(enc, &t);
    tape.row_dot(y, et)
}

/// Plain trilinear contraction `Σ W_ijk h_i r_j t_k` with `W` stored as `d² × d`.
pub fn tucker_score(core: &Tensor, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    let d = t.len();
    let mut y = vec![0.0; d];
    for (i, &hi) in h.iter().enumerate() {
        for (j, &rj) in r.iter().enumerate() {
            let w = core.row_slice(i * r.len() + j);
            for k in 0..d {
                y[k] += hi * rj * w[k];
            }
        }
    }
    crate::numerics::dot(&y, t)
}
