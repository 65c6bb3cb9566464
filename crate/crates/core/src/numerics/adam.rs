use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// Which entries of one parameter are frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamMask {
    /// Every entry frozen.
    All,
    /// Row `r` frozen iff `rows[r]`.
    Rows(Vec<bool>),
}

/// Freeze masks keyed by parameter index. Parameters without an entry train
/// normally.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    masks: BTreeMap<usize, ParamMask>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn set(&mut self, param: usize, mask: ParamMask) {
        self.masks.insert(param, mask);
    }

    pub fn get(&self, param: usize) -> Option<&ParamMask> {
        self.masks.get(&param)
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Total number of frozen scalar entries given the parameter tensors.
    pub fn masked_entries(&self, params: &[Tensor]) -> usize {
        self.masks
            .iter()
            .map(|(&i, m)| match m {
                ParamMask::All => params[i].len(),
                ParamMask::Rows(rows) => rows.iter().filter(|&&r| r).count() * params[i].cols(),
            })
            .sum()
    }

    fn is_frozen(&self, param: usize, row: usize) -> bool {
        match self.masks.get(&param) {
            None => false,
            Some(ParamMask::All) => true,
            Some(ParamMask::Rows(rows)) => rows.get(row).copied().unwrap_or(false),
        }
    }
}

/// First/second moment accumulators and the step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Frozen entries (and their moments) are left untouched.
/// Gradients are checked for finiteness before anything is modified.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    mask: &FreezeMask,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} entries, parameter has {}",
                names[i],
                g.len(),
                p.len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", names[i])));
        }
    }
    state.m.resize_with(params.len(), Vec::new);
    state.v.resize_with(params.len(), Vec::new);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        m.resize(p.len(), 0.0);
        v.resize(p.len(), 0.0);
        let cols = p.cols().max(1);
        let frozen_all = matches!(mask.get(i), Some(ParamMask::All));
        if frozen_all {
            continue;
        }
        let has_rows = mask.get(i).is_some();
        let data = p.data_mut();
        for j in 0..data.len() {
            if has_rows && mask.is_frozen(i, j / cols) {
                continue;
            }
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            data[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> (Vec<Tensor>, Vec<String>) {
        (vec![Tensor::row(vec![v])], vec!["w".to_string()])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, n) = one(1.5);
        let mut st = OptimizerState::new();
        adam_step(
            &mut p,
            &n,
            &[vec![0.0]],
            &mut st,
            &AdamConfig::default(),
            &FreezeMask::none(),
        )
        .unwrap();
        assert_eq!(p[0].data(), &[1.5]);
    }

    #[test]
    fn fully_masked_is_bit_identical() {
        let (mut p, n) = one(1.5);
        let mut mask = FreezeMask::none();
        mask.set(0, ParamMask::All);
        let mut st = OptimizerState::new();
        for _ in 0..5 {
            adam_step(&mut p, &n, &[vec![3.0]], &mut st, &AdamConfig::default(), &mask).unwrap();
        }
        assert_eq!(p[0].data()[0].to_bits(), 1.5f64.to_bits());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², update = lr · g / (|g| + eps)
        let (mut p, n) = one(0.0);
        let mut st = OptimizerState::new();
        adam_step(
            &mut p,
            &n,
            &[vec![1.0]],
            &mut st,
            &AdamConfig::with_lr(0.1),
            &FreezeMask::none(),
        )
        .unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn row_mask_only_freezes_selected_rows() {
        let mut p = vec![Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap()];
        let n = vec!["s".to_string()];
        let mut mask = FreezeMask::none();
        mask.set(0, ParamMask::Rows(vec![true, false]));
        let mut st = OptimizerState::new();
        adam_step(&mut p, &n, &[vec![1.0; 4]], &mut st, &AdamConfig::default(), &mask).unwrap();
        assert_eq!(&p[0].data()[..2], &[1.0, 1.0]);
        assert!(p[0].data()[2] < 1.0);
        assert_eq!(mask.masked_entries(&p), 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut p, n) = one(0.0);
        let mut st = OptimizerState::new();
        let err = adam_step(
            &mut p,
            &n,
            &[vec![f64::NAN]],
            &mut st,
            &AdamConfig::default(),
            &FreezeMask::none(),
        )
        .unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p[0].data(), &[0.0]);
    }
}
