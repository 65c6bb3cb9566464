use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::seed;

/// Result of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1e-8, |numeric|) over checked coordinates.
    pub max_rel_error: f64,
    /// (parameter, flat index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares tape gradients with central differences.
///
/// `loss` builds a scalar from leaf variables for `params` (in order). Up to
/// `samples_per_param` coordinates are drawn from each parameter; parameters
/// with that many entries or fewer are checked exhaustively.
pub fn grad_check<F>(
    mut loss: F,
    params: &[Tensor],
    epsilon: f64,
    samples_per_param: usize,
    rng_seed: u64,
) -> GradCheckReport
where
    F: FnMut(&mut Tape, &[Var]) -> Var,
{
    let eval = |loss: &mut F, ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = loss(&mut tape, &vars);
        tape.item(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = loss(&mut tape, &vars);
    let grads = tape.backward(out).expect("grad_check needs a scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.len()))
        .collect();
    drop(tape);

    let mut rng = seed::rng(rng_seed, "grad_check", 0);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            (0..samples_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for ci in coords {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + epsilon;
            let up = eval(&mut loss, &work);
            work[pi].data_mut()[ci] = orig - epsilon;
            let down = eval(&mut loss, &work);
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (analytic[pi][ci] - numeric).abs() / numeric.abs().max(1e-8);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                if err >= report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((pi, ci));
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_passes() {
        // f(x) = xᵀ A x with A = [[2, 1], [1, 3]]
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.7, -1.3]).unwrap();
        let rep = grad_check(
            |tape, v| {
                let av = tape.constant(a.clone());
                let ax = tape.matmul_nt(v[0], av);
                let q = tape.row_dot(ax, v[0]);
                tape.sum_all(q)
            },
            &[x],
            1e-5,
            10,
            1,
        );
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let rep = grad_check(|tape, _| tape.constant(Tensor::scalar(4.0)), &[x], 1e-5, 10, 1);
        assert_eq!(rep.max_rel_error, 0.0);
        assert_eq!(rep.coordinates, 2);
    }

    #[test]
    fn every_tape_op_matches_central_differences() {
        use super::super::tape::AttnBlock;
        use std::rc::Rc;
        let mk = |r: usize, c: usize, s: f64| {
            let data = (0..r * c).map(|i| (i as f64 * 0.37 + s).sin() * 0.9).collect();
            Tensor::matrix(r, c, data).unwrap()
        };
        let params = vec![
            mk(4, 4, 0.1),  // x
            mk(4, 4, 1.3),  // w
            mk(1, 4, 2.0),  // gain
            mk(1, 4, 0.7),  // bias
            mk(4, 4, -0.4), // other
        ];
        let blocks: Rc<[AttnBlock]> = vec![
            AttnBlock {
                q_start: 0,
                q_len: 2,
                k_start: 0,
                k_len: 2,
            },
            AttnBlock {
                q_start: 2,
                q_len: 2,
                k_start: 1,
                k_len: 3,
            },
        ]
        .into();
        let rep = grad_check(
            |t, v| {
                let h = t.matmul(v[0], v[1]);
                let h = t.add_bias(h, v[3]);
                let h = t.layer_norm(h, v[2], v[3], 1e-5);
                let h = t.gelu(h);
                let a = t.attention(h, v[4], v[1], blocks.clone(), 2);
                let o = t.outer_rows(a, v[0]);
                let o = t.reshape(o, &[4, 16]);
                let lg = t.matmul_nt(o, o);
                let ce = t.cross_entropy_rows(lg, &[0, 3, 1, 2]);
                let n = t.normalize_rows(a);
                let cs = t.cosine_rows(n, v[4]);
                let sl = t.smooth_l1_rows(a, v[4], 0.5);
                let sq = t.sq_dist_rows(a, v[0]);
                let m = t.mul(sl, sq);
                let s = t.sub(cs, m);
                let s = t.add(s, ce);
                let s = t.scale(s, 0.3);
                let pick = t.gather_rows(s, &[0, 2, 2]);
                let a1 = t.sum_all(pick);
                let a2 = t.mean_all(ce);
                t.sum_scalars(&[a1, a2])
            },
            &params,
            1e-5,
            64,
            3,
        );
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }
}
