//! Multimodal entity encoder, contextual encoder and TuckER scoring.

mod checkpoint;
mod encode;
mod params;
mod scorer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry};
pub use encode::{
    contextual, encode, head_projection, head_queries, tail_projection, tail_queries, triple_scores, tucker_score,
    Bound, Encoded, EntityBatch, StructuralSlot,
};
pub use params::{LayerIds, ModelConfig, ModelParams, ParamIds};
pub use scorer::{encode_entity, EncodedEntity, Scorer};
