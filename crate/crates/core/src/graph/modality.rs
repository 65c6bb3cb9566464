use crate::numerics::Tensor;
use crate::{Error, Result};

use super::EntityId;

/// Tokens and pooled pretrained vector for one modality of one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityModality {
    /// k×dim token matrix.
    pub tokens: Tensor,
    pub pooled: Vec<f64>,
}

/// Per-entity visual and textual features. Entities beyond the stored range
/// have no modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStore {
    d_v: usize,
    d_w: usize,
    visual: Vec<Option<EntityModality>>,
    text: Vec<Option<EntityModality>>,
}

fn check(tokens: &Tensor, pooled: &Option<Vec<f64>>, dim: usize, what: &str) -> Result<()> {
    if tokens.shape().len() != 2 || tokens.cols() != dim || tokens.rows() == 0 {
        return Err(Error::Shape(format!(
            "{what} tokens {:?}, expected k×{dim} with k ≥ 1",
            tokens.shape()
        )));
    }
    if !tokens.is_finite() {
        return Err(Error::NonFinite(format!("{what} tokens")));
    }
    if let Some(p) = pooled {
        if p.len() != dim {
            return Err(Error::Shape(format!("{what} pooled length {} != {dim}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} pooled vector")));
        }
    }
    Ok(())
}

fn column_mean(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    let k = t.rows() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}

impl ModalityStore {
    pub fn new(d_v: usize, d_w: usize) -> Self {
        ModalityStore {
            d_v,
            d_w,
            visual: Vec::new(),
            text: Vec::new(),
        }
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn d_w(&self) -> usize {
        self.d_w
    }

    /// Number of entity slots (some may be empty).
    pub fn len(&self) -> usize {
        self.visual.len().max(self.text.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn grow(&mut self, e: EntityId) {
        let n = e as usize + 1;
        if self.visual.len() < n {
            self.visual.resize(n, None);
        }
        if self.text.len() < n {
            self.text.resize(n, None);
        }
    }

    /// Sets visual tokens. Without `pooled`, the token mean is used.
    pub fn set_visual(&mut self, e: EntityId, tokens: Tensor, pooled: Option<Vec<f64>>) -> Result<()> {
        check(&tokens, &pooled, self.d_v, "visual")?;
        self.grow(e);
        let pooled = pooled.unwrap_or_else(|| column_mean(&tokens));
        self.visual[e as usize] = Some(EntityModality { tokens, pooled });
        Ok(())
    }

    pub fn set_text(&mut self, e: EntityId, tokens: Tensor, pooled: Option<Vec<f64>>) -> Result<()> {
        check(&tokens, &pooled, self.d_w, "text")?;
        self.grow(e);
        let pooled = pooled.unwrap_or_else(|| column_mean(&tokens));
        self.text[e as usize] = Some(EntityModality { tokens, pooled });
        Ok(())
    }

    pub fn visual(&self, e: EntityId) -> Option<&EntityModality> {
        self.visual.get(e as usize).and_then(Option::as_ref)
    }

    pub fn text(&self, e: EntityId) -> Option<&EntityModality> {
        self.text.get(e as usize).and_then(Option::as_ref)
    }

    pub fn has_visual(&self, e: EntityId) -> bool {
        self.visual(e).is_some()
    }

    pub fn has_text(&self, e: EntityId) -> bool {
        self.text(e).is_some()
    }

    /// Number of visual (resp. text) tokens, 0 if absent.
    pub fn visual_count(&self, e: EntityId) -> usize {
        self.visual(e).map_or(0, |m| m.tokens.rows())
    }

    pub fn text_count(&self, e: EntityId) -> usize {
        self.text(e).map_or(0, |m| m.tokens.rows())
    }

    /// E_vt restricted to ids below `limit`.
    pub fn dual_modality(&self, limit: usize) -> Vec<EntityId> {
        (0..limit.min(self.len()) as EntityId)
            .filter(|&e| self.has_visual(e) && self.has_text(e))
            .collect()
    }

    /// Copy with the switched-off modalities removed.
    pub fn masked(&self, keep_visual: bool, keep_text: bool) -> Self {
        ModalityStore {
            d_v: self.d_v,
            d_w: self.d_w,
            visual: if keep_visual {
                self.visual.clone()
            } else {
                vec![None; self.visual.len()]
            },
            text: if keep_text {
                self.text.clone()
            } else {
                vec![None; self.text.len()]
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presence_and_pooling() {
        let mut s = ModalityStore::new(2, 3);
        let tok = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.set_visual(1, tok, None).unwrap();
        assert!(s.has_visual(1) && !s.has_text(1));
        assert!(!s.has_visual(0) && !s.has_visual(9));
        assert_eq!(s.visual(1).unwrap().pooled, vec![2.0, 3.0]);
        assert_eq!(s.visual_count(1), 2);
        assert!(s.dual_modality(5).is_empty());
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        let mut s = ModalityStore::new(2, 3);
        assert!(s
            .set_text(0, Tensor::matrix(1, 2, vec![0.0; 2]).unwrap(), None)
            .is_err());
        let nan = Tensor::matrix(1, 3, vec![0.0, f64::NAN, 1.0]).unwrap();
        assert!(s.set_text(0, nan, None).is_err());
        assert!(!s.has_text(0));
    }

    #[test]
    fn masking_drops_modalities() {
        let mut s = ModalityStore::new(1, 1);
        s.set_visual(0, Tensor::matrix(1, 1, vec![1.0]).unwrap(), None).unwrap();
        s.set_text(0, Tensor::matrix(1, 1, vec![1.0]).unwrap(), None).unwrap();
        assert_eq!(s.dual_modality(1), vec![0]);
        let m = s.masked(false, true);
        assert!(!m.has_visual(0) && m.has_text(0));
    }
}
