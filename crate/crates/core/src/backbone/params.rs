use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{FreezeMask, ParamMask, Tensor};
use crate::seed;
use crate::{Error, Result};

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub d_p: usize,
    /// Entity-encoder depth.
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            d_v: 16,
            d_w: 16,
            d_p: 16,
            layers: 1,
            heads: 2,
            d_ff: 64,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.d == 0 || self.d_v == 0 || self.d_w == 0 || self.d_ff == 0 {
            return bad("model widths must be positive");
        }
        if self.d_p == 0 || self.d_p > self.d {
            return bad("d_p must be in 1..=d");
        }
        if self.layers == 0 {
            return bad("entity encoder needs at least one layer");
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad("heads must divide d");
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            return bad("init_std and ln_eps must be positive");
        }
        Ok(())
    }
}

/// Indices of one pre-LN transformer layer's tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl LayerIds {
    pub fn all(&self) -> [usize; 12] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo, self.ln2_g, self.ln2_b, self.w1, self.b1,
            self.w2, self.b2,
        ]
    }
}

/// Positions of every tensor in [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub s: usize,
    pub r: usize,
    pub ent: usize,
    pub w_v: usize,
    pub w_w: usize,
    pub enc: Vec<LayerIds>,
    pub enc_ln_g: usize,
    pub enc_ln_b: usize,
    pub ctx: LayerIds,
    pub ctx_ln_g: usize,
    pub ctx_ln_b: usize,
    /// TuckER core stored as `d² × d` (index `(i·d + j, k)`).
    pub core: usize,
    pub p: usize,
    pub q: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
    pub ids: ParamIds,
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    seed: u64,
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        let idx = self.tensors.len();
        let data = match init {
            Init::Ones => vec![1.0; rows * cols],
            Init::Zeros => vec![0.0; rows * cols],
            Init::Normal => {
                let mut rng = seed::rng(self.seed, name, 0);
                gaussian(&mut rng, rows * cols, self.cfg.init_std)
            }
        };
        self.tensors.push(Tensor::matrix(rows, cols, data).expect("init shape"));
        self.names.push(name.to_string());
        idx
    }

    fn layer(&mut self, prefix: &str) -> LayerIds {
        let (d, f) = (self.cfg.d, self.cfg.d_ff);
        LayerIds {
            ln1_g: self.add(&format!("{prefix}.ln1.gain"), 1, d, Init::Ones),
            ln1_b: self.add(&format!("{prefix}.ln1.bias"), 1, d, Init::Zeros),
            wq: self.add(&format!("{prefix}.attn.wq"), d, d, Init::Normal),
            wk: self.add(&format!("{prefix}.attn.wk"), d, d, Init::Normal),
            wv: self.add(&format!("{prefix}.attn.wv"), d, d, Init::Normal),
            wo: self.add(&format!("{prefix}.attn.wo"), d, d, Init::Normal),
            ln2_g: self.add(&format!("{prefix}.ln2.gain"), 1, d, Init::Ones),
            ln2_b: self.add(&format!("{prefix}.ln2.bias"), 1, d, Init::Zeros),
            w1: self.add(&format!("{prefix}.ffn.w1"), d, f, Init::Normal),
            b1: self.add(&format!("{prefix}.ffn.b1"), 1, f, Init::Zeros),
            w2: self.add(&format!("{prefix}.ffn.w2"), f, d, Init::Normal),
            b2: self.add(&format!("{prefix}.ffn.b2"), 1, d, Init::Zeros),
        }
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl ModelParams {
    /// Seeded initialization for `entities` entities and `relations` relations.
    pub fn init(config: &ModelConfig, entities: usize, relations: usize, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut b = Builder {
            cfg: c,
            seed: init_seed,
            tensors: Vec::new(),
            names: Vec::new(),
        };
        let s = b.add("structural", entities, c.d, Init::Normal);
        let r = b.add("relation", relations, c.d, Init::Normal);
        // a random shared [ENT] row would dominate every entity's residual stream
        let ent = b.add("ent_token", 1, c.d, Init::Zeros);
        let w_v = b.add("proj.visual", c.d_v, c.d, Init::Normal);
        let w_w = b.add("proj.text", c.d_w, c.d, Init::Normal);
        let enc = (0..c.layers).map(|l| b.layer(&format!("encoder.{l}"))).collect();
        let enc_ln_g = b.add("encoder.ln.gain", 1, c.d, Init::Ones);
        let enc_ln_b = b.add("encoder.ln.bias", 1, c.d, Init::Zeros);
        let ctx = b.layer("context");
        let ctx_ln_g = b.add("context.ln.gain", 1, c.d, Init::Ones);
        let ctx_ln_b = b.add("context.ln.bias", 1, c.d, Init::Zeros);
        let core = b.add("tucker.core", c.d * c.d, c.d, Init::Normal);
        let p = b.add("head.p", c.d, c.d_p, Init::Normal);
        let q = b.add("head.q", c.d, c.d_p, Init::Normal);
        let ids = ParamIds {
            s,
            r,
            ent,
            w_v,
            w_w,
            enc,
            enc_ln_g,
            enc_ln_b,
            ctx,
            ctx_ln_g,
            ctx_ln_b,
            core,
            p,
            q,
        };
        Ok(ModelParams {
            config: config.clone(),
            tensors: b.tensors,
            names: b.names,
            ids,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.tensors[self.ids.s].rows()
    }

    pub fn relation_count(&self) -> usize {
        self.tensors[self.ids.r].rows()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Appends seeded rows for new entities and relations. `new_entities` and
    /// `new_relations` must continue the current id ranges without gaps.
    pub fn register_new_entities(&mut self, new_entities: &[u32], new_relations: &[u32], init_seed: u64) -> Result<()> {
        let check = |ids: &[u32], start: usize, what: &str| -> Result<()> {
            for (k, &id) in ids.iter().enumerate() {
                if id as usize != start + k {
                    return Err(Error::InvalidArgument(format!(
                        "{what} id {id} collides with or skips existing ids (next free id is {})",
                        start + k
                    )));
                }
            }
            Ok(())
        };
        check(new_entities, self.entity_count(), "entity")?;
        check(new_relations, self.relation_count(), "relation")?;
        let d = self.config.d;
        let std = self.config.init_std;
        if !new_entities.is_empty() {
            let start = self.entity_count() as u64;
            let mut rng = seed::rng(init_seed, "structural.grow", start);
            let rows = gaussian(&mut rng, new_entities.len() * d, std);
            self.tensors[self.ids.s].append_rows(&rows)?;
        }
        if !new_relations.is_empty() {
            let start = self.relation_count() as u64;
            let mut rng = seed::rng(init_seed, "relation.grow", start);
            let rows = gaussian(&mut rng, new_relations.len() * d, std);
            self.tensors[self.ids.r].append_rows(&rows)?;
        }
        Ok(())
    }

    /// Stage 1 freezes the rows of old entities in S and old relations in R;
    /// stage 2 freezes nothing.
    pub fn freeze_masks(&self, stage: u8, old_entities: usize, old_relations: usize) -> Result<FreezeMask> {
        let mut mask = FreezeMask::none();
        match stage {
            1 => {
                let rows = |total: usize, old: usize| (0..total).map(|r| r < old).collect();
                if old_entities > 0 {
                    mask.set(self.ids.s, ParamMask::Rows(rows(self.entity_count(), old_entities)));
                }
                if old_relations > 0 {
                    mask.set(self.ids.r, ParamMask::Rows(rows(self.relation_count(), old_relations)));
                }
            }
            2 => {}
            _ => return Err(Error::InvalidArgument(format!("stage {stage} is not 1 or 2"))),
        }
        Ok(mask)
    }

    /// Every tensor except the per-row tables and the projection head Q.
    pub fn shared_indices(&self) -> Vec<usize> {
        (0..self.tensors.len())
            .filter(|&i| i != self.ids.s && i != self.ids.r && i != self.ids.q)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 4,
            d_v: 3,
            d_w: 2,
            d_p: 2,
            d_ff: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&small(), 5, 2, 9).unwrap();
        let b = ModelParams::init(&small(), 5, 2, 9).unwrap();
        let c = ModelParams::init(&small(), 5, 2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors[a.ids.s], c.tensors[c.ids.s]);
        assert_eq!(a.get(a.ids.enc_ln_g).data(), &[1.0; 4]);
    }

    #[test]
    fn growth_appends_rows_only() {
        let mut p = ModelParams::init(&small(), 5, 2, 1).unwrap();
        let before = p.clone();
        p.register_new_entities(&[], &[], 3).unwrap();
        assert_eq!(p, before);
        p.register_new_entities(&[5, 6, 7], &[2], 3).unwrap();
        assert_eq!(p.entity_count(), 8);
        assert_eq!(p.relation_count(), 3);
        assert_eq!(&p.get(p.ids.s).data()[..20], before.get(before.ids.s).data());
        for i in before.shared_indices() {
            assert_eq!(p.get(i), before.get(i));
        }
        let mut q = before.clone();
        q.register_new_entities(&[5, 6, 7], &[2], 3).unwrap();
        assert_eq!(p, q);
        assert!(q.register_new_entities(&[3], &[], 3).is_err());
    }

    #[test]
    fn stage_masks() {
        let p = ModelParams::init(&small(), 5, 2, 1).unwrap();
        assert!(p.freeze_masks(2, 5, 2).unwrap().is_empty());
        let m = p.freeze_masks(1, 5, 1).unwrap();
        assert_eq!(m.masked_entries(&p.tensors), 5 * 4 + 4);
        assert!(p.freeze_masks(3, 0, 0).is_err());
    }
}
