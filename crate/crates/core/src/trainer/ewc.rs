//! Diagonal-Fisher elastic weight consolidation baseline.

use crate::backbone::{Bound, EntityBatch, ModelParams};
use crate::graph::{EntityId, ModalityStore, Triple};
use crate::numerics::{Tape, Tensor, Var};
use crate::Result;

use super::loss::kgr_loss;

/// Parameters covered by the penalty: shared tensors plus the S and R tables.
fn covered(params: &ModelParams) -> Vec<usize> {
    let mut v = params.shared_indices();
    v.push(params.ids.s);
    v.push(params.ids.r);
    v.sort_unstable();
    v
}

/// Mean of squared L_kgr gradients over consecutive `batch_size` chunks of
/// `triples`. Entry `k` is `None` for parameters outside the penalty.
pub fn ewc_fisher(
    params: &ModelParams,
    store: &ModalityStore,
    triples: &[Triple],
    batch_size: usize,
) -> Result<Vec<Option<Tensor>>> {
    let keep = covered(params);
    let mut acc: Vec<Option<Vec<f64>>> = (0..params.tensors.len())
        .map(|k| keep.contains(&k).then(|| vec![0.0; params.tensors[k].len()]))
        .collect();
    let all: Vec<EntityId> = (0..params.entity_count() as EntityId).collect();
    let entities = EntityBatch::new(store, &all);
    let mut batches = 0usize;
    for chunk in triples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = Bound::leaves(&mut tape, params);
        let enc = crate::backbone::encode(
            &mut tape,
            &bound,
            params,
            &entities,
            crate::backbone::StructuralSlot::Learned,
        );
        let loss = kgr_loss(&mut tape, &bound, params, enc.e, chunk);
        let g = tape.backward(loss)?;
        for (k, slot) in acc.iter_mut().enumerate() {
            if let Some(a) = slot {
                if let Some(gk) = g.get(bound.var(k)) {
                    for (x, y) in a.iter_mut().zip(gk) {
                        *x += y * y;
                    }
                }
            }
        }
        batches += 1;
    }
    let scale = 1.0 / batches.max(1) as f64;
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(k, a)| {
            a.map(|v| {
                Tensor::new(params.tensors[k].shape(), v.into_iter().map(|x| x * scale).collect())
                    .expect("fisher shape")
            })
        })
        .collect())
}

/// θ* and F padded to the current parameter shapes (new rows carry F = 0).
#[derive(Clone, Debug)]
pub struct EwcAnchor {
    entries: Vec<(usize, Tensor, Tensor)>,
}

fn pad(t: &Tensor, like: &Tensor) -> Tensor {
    let mut data = t.data().to_vec();
    data.resize(like.len(), 0.0);
    Tensor::new(like.shape(), data).expect("padded shape")
}

impl EwcAnchor {
    pub fn new(previous: &ModelParams, fisher: &[Option<Tensor>], current: &ModelParams) -> Self {
        let entries = fisher
            .iter()
            .enumerate()
            .filter_map(|(k, f)| {
                let f = f.as_ref()?;
                let like = &current.tensors[k];
                Some((k, pad(&previous.tensors[k], like), pad(f, like)))
            })
            .collect();
        EwcAnchor { entries }
    }

    /// (λ/2)·Σ_k F_k (θ_k − θ*_k)².
    pub fn penalty(&self, tape: &mut Tape, bound: &Bound, lambda: f64) -> Var {
        let mut terms = Vec::with_capacity(self.entries.len());
        for (k, star, f) in &self.entries {
            let s = tape.constant(star.clone());
            let fv = tape.constant(f.clone());
            let d = tape.sub(bound.var(*k), s);
            let d2 = tape.mul(d, d);
            let w = tape.mul(d2, fv);
            terms.push(tape.sum_all(w));
        }
        let sum = tape.sum_scalars(&terms);
        tape.scale(sum, lambda / 2.0)
    }

    /// Plain-arithmetic value of the penalty for `params`.
    pub fn value(&self, params: &ModelParams, lambda: f64) -> f64 {
        let mut s = 0.0;
        for (k, star, f) in &self.entries {
            for ((x, y), w) in params.tensors[*k].data().iter().zip(star.data()).zip(f.data()) {
                s += w * (x - y) * (x - y);
            }
        }
        lambda / 2.0 * s
    }
}
