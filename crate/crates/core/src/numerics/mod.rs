//! Numeric substrate: tensors, the differentiation tape, loss primitives,
//! the optimizer and gradient checking.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, FreezeMask, OptimizerState, ParamMask};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{cosine_slices, smooth_l1_scalar, AttnBlock, Gradients, Tape, Var};
pub use tensor::{dot, Tensor};

use crate::{Error, Result};

/// Default Smooth L1 threshold.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Mean element-wise Smooth L1 between two equally shaped tensors.
pub fn smooth_l1(a: &Tensor, b: &Tensor, beta: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("smooth_l1 on {:?} vs {:?}", a.shape(), b.shape())));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("smooth_l1 beta {beta}")));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| smooth_l1_scalar(x - y, beta))
        .sum();
    Ok(s / a.len() as f64)
}

/// Cosine similarity of two flat tensors; 0 if either norm is below 1e-12.
pub fn cosine(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine on lengths {} and {}", u.len(), v.len())));
    }
    Ok(cosine_slices(u.data(), v.data()))
}

/// `-log softmax(logits)[target]`, max-subtracted.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "target {target} for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    Ok(z.ln() + mx - logits[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn smooth_l1_arms() {
        assert_eq!(smooth_l1(&s(1.0), &s(1.0), 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&s(0.5), &s(0.0), 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(&s(2.0), &s(0.0), 1.0).unwrap(), 1.5);
        let a = Tensor::row(vec![0.0, 0.0]);
        let b = Tensor::row(vec![0.5, 2.0]);
        assert_eq!(smooth_l1(&a, &b, 1.0).unwrap(), (0.125 + 1.5) / 2.0);
        assert!(smooth_l1(&a, &s(0.0), 1.0).is_err());
    }

    #[test]
    fn cosine_cases() {
        let u = Tensor::row(vec![1.0, 2.0, -3.0]);
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let e0 = Tensor::row(vec![1.0, 0.0]);
        let e1 = Tensor::row(vec![0.0, 1.0]);
        assert_eq!(cosine(&e0, &e1).unwrap(), 0.0);
        let one_one = Tensor::row(vec![1.0, 1.0]);
        // 1 / sqrt(2)
        assert!((cosine(&one_one, &e0).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-15);
        let z = Tensor::row(vec![0.0, 0.0]);
        assert_eq!(cosine(&z, &e0).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = softmax_cross_entropy(&[0.3; 4], 2).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        let sat = softmax_cross_entropy(&[1000.0, 0.0, 0.0], 0).unwrap();
        assert!(sat.abs() < 1e-12);
        // -ln(e / (e + 1))
        let closed = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((softmax_cross_entropy(&[1.0, 0.0], 0).unwrap() - closed).abs() < 1e-15);
        assert!((closed - 0.3133).abs() < 1e-4);
        assert!(softmax_cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn tape_square_and_stop_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(s(3.0));
        let y = tape.mul(x, x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(s(3.0));
        let sx = tape.stop_gradient(x);
        let y = tape.mul(sx, x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn tape_losses_agree_with_direct_helpers() {
        let a = Tensor::matrix(2, 3, vec![0.1, -2.0, 0.4, 1.0, 0.0, 3.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0, 0.5, 0.3, -1.0, 0.2, 0.0]).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let rows = tape.smooth_l1_rows(av, bv, 1.0);
        let m = tape.mean_all(rows);
        assert!((tape.item(m) - smooth_l1(&a, &b, 1.0).unwrap()).abs() < 1e-15);

        let ce = tape.cross_entropy_rows(av, &[1, 2]);
        let row0 = softmax_cross_entropy(a.row_slice(0), 1).unwrap();
        assert!((tape.value(ce).data()[0] - row0).abs() < 1e-15);
    }
}
