use crate::graph::{EntityId, ModalityStore, RelationId};
use crate::numerics::{Tape, Tensor};
use crate::{Error, Result};

use super::encode::{encode, head_queries, tail_queries, Bound, EntityBatch, StructuralSlot};
use super::params::ModelParams;

/// Encoder outputs for one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedEntity {
    pub e: Vec<f64>,
    pub vbar: Vec<f64>,
    pub wbar: Vec<f64>,
}

/// Encodes one entity with a fresh tape.
pub fn encode_entity(entity: EntityId, params: &ModelParams, store: &ModalityStore) -> Result<EncodedEntity> {
    if entity as usize >= params.entity_count() {
        return Err(Error::OutOfRange(format!(
            "entity {entity} not registered ({} entities)",
            params.entity_count()
        )));
    }
    let batch = EntityBatch::new(store, &[entity]);
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let enc = encode(&mut tape, &bound, params, &batch, StructuralSlot::Learned);
    Ok(EncodedEntity {
        e: tape.value(enc.e).data().to_vec(),
        vbar: tape.value(enc.vbar).data().to_vec(),
        wbar: tape.value(enc.wbar).data().to_vec(),
    })
}

/// Inference view of a model: all entity encodings computed once.
pub struct Scorer<'a> {
    params: &'a ModelParams,
    encodings: Tensor,
    vbar: Tensor,
    wbar: Tensor,
}

/// Queries per tape when scoring in bulk.
const QUERY_CHUNK: usize = 256;

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParams, store: &ModalityStore) -> Self {
        let all: Vec<EntityId> = (0..params.entity_count() as EntityId).collect();
        let batch = EntityBatch::new(store, &all);
        let mut tape = Tape::new();
        let bound = Bound::constants(&mut tape, params);
        let enc = encode(&mut tape, &bound, params, &batch, StructuralSlot::Learned);
        Scorer {
            params,
            encodings: tape.value(enc.e).clone(),
            vbar: tape.value(enc.vbar).clone(),
            wbar: tape.value(enc.wbar).clone(),
        }
    }

    pub fn entity_count(&self) -> usize {
        self.encodings.rows()
    }

    /// Encoded entity table, `|E| × d`.
    pub fn encodings(&self) -> &Tensor {
        &self.encodings
    }

    pub fn encoded(&self, e: EntityId) -> Result<EncodedEntity> {
        self.check_entity(e)?;
        let i = e as usize;
        Ok(EncodedEntity {
            e: self.encodings.row_slice(i).to_vec(),
            vbar: self.vbar.row_slice(i).to_vec(),
            wbar: self.wbar.row_slice(i).to_vec(),
        })
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e as usize >= self.entity_count() {
            return Err(Error::OutOfRange(format!("entity {e} of {}", self.entity_count())));
        }
        Ok(())
    }

    fn check_relation(&self, r: RelationId) -> Result<()> {
        if r as usize >= self.params.relation_count() {
            return Err(Error::OutOfRange(format!(
                "relation {r} of {}",
                self.params.relation_count()
            )));
        }
        Ok(())
    }

    fn bulk(&self, queries: &[(EntityId, RelationId)], head_direction: bool) -> Result<Tensor> {
        for &(e, r) in queries {
            self.check_entity(e)?;
            self.check_relation(r)?;
        }
        let n = self.entity_count();
        let mut out = Vec::with_capacity(queries.len() * n);
        for chunk in queries.chunks(QUERY_CHUNK) {
            let mut tape = Tape::new();
            let bound = Bound::constants(&mut tape, self.params);
            let enc = tape.constant(self.encodings.clone());
            let ents: Vec<usize> = chunk.iter().map(|q| q.0 as usize).collect();
            let rels: Vec<usize> = chunk.iter().map(|q| q.1 as usize).collect();
            let y = if head_direction {
                head_queries(&mut tape, &bound, self.params, enc, &ents, &rels)
            } else {
                tail_queries(&mut tape, &bound, self.params, enc, &ents, &rels)
            };
            let s = tape.matmul_nt(y, enc);
            out.extend_from_slice(tape.value(s).data());
        }
        Tensor::matrix(queries.len(), n, out)
    }

    /// Scores of every tail for each `(h, r)`: `queries × |E|`.
    pub fn score_tails_batch(&self, queries: &[(EntityId, RelationId)]) -> Result<Tensor> {
        self.bulk(queries, false)
    }

    /// Scores of every head for each `(t, r)`: `queries × |E|`.
    pub fn score_heads_batch(&self, queries: &[(EntityId, RelationId)]) -> Result<Tensor> {
        self.bulk(queries, true)
    }

    pub fn score_all_tails(&self, h: EntityId, r: RelationId) -> Result<Vec<f64>> {
        Ok(self.score_tails_batch(&[(h, r)])?.into_data())
    }

    pub fn score_all_heads(&self, r: RelationId, t: EntityId) -> Result<Vec<f64>> {
        Ok(self.score_heads_batch(&[(t, r)])?.into_data())
    }

    /// Tail-direction score of `(h, r, t)`.
    pub fn score_triple(&self, h: EntityId, r: RelationId, t: EntityId) -> Result<f64> {
        self.check_entity(t)?;
        let y = self.query_vector(h, r, false)?;
        Ok(crate::numerics::dot(&y, self.encodings.row_slice(t as usize)))
    }

    /// Head-direction score of `(h, r, t)` (the value `score_all_heads(r, t)[h]`).
    pub fn score_triple_head(&self, h: EntityId, r: RelationId, t: EntityId) -> Result<f64> {
        self.check_entity(h)?;
        let y = self.query_vector(t, r, true)?;
        Ok(crate::numerics::dot(&y, self.encodings.row_slice(h as usize)))
    }

    fn query_vector(&self, e: EntityId, r: RelationId, head_direction: bool) -> Result<Vec<f64>> {
        self.check_entity(e)?;
        self.check_relation(r)?;
        let mut tape = Tape::new();
        let bound = Bound::constants(&mut tape, self.params);
        let enc = tape.constant(self.encodings.clone());
        let y = if head_direction {
            head_queries(&mut tape, &bound, self.params, enc, &[e as usize], &[r as usize])
        } else {
            tail_queries(&mut tape, &bound, self.params, enc, &[e as usize], &[r as usize])
        };
        Ok(tape.value(y).data().to_vec())
    }
}
