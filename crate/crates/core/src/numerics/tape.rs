//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so node indices
//! are already a topological order and the backward pass is a single reverse
//! sweep. Ops are coarse (fused attention, layer norm, row-wise losses) to keep
//! the tape short; each op's backward rule lives next to its forward rule.
//!
//! Shape mismatches inside tape ops are programming errors and panic.

use std::rc::Rc;

use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention group: queries `q_start..q_start+q_len` attend over keys
/// `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K1: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Constant,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Reshape(Var),
    Gather {
        sources: Vec<Var>,
        picks: Rc<[(u32, u32)]>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Rc<[AttnBlock]>,
        heads: usize,
        probs: Vec<f64>,
    },
    Outer(Var, Var),
    RowDot(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SqDistRows(Var, Var),
    SmoothL1Rows(Var, Var, f64),
    CosineRows(Var, Var),
    NormalizeRows(Var, Vec<f64>),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        softmax: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Scalar Smooth L1 with threshold `beta`.
#[inline]
pub fn smooth_l1_scalar(x: f64, beta: f64) -> f64 {
    let ax = x.abs();
    if ax < beta {
        0.5 * x * x / beta
    } else {
        ax - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    let u = GELU_K0 * (x + GELU_K1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K0 * (x + GELU_K1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K0 * (1.0 + 3.0 * GELU_K1 * x * x)
}

/// Cosine similarity, defined as 0 when either norm is below 1e-12.
pub fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by tape op");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// `sg(x)`: same value, no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Tensor::new(x.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|p| p * c).collect();
        let value = Tensor::new(x.shape(), data).unwrap();
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Sum of scalar nodes; an empty list gives the constant 0.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        let mut it = terms.iter().copied();
        match it.next() {
            None => self.constant(Tensor::scalar(0.0)),
            Some(first) => it.fold(first, |acc, t| self.add(acc, t)),
        }
    }

    /// Adds a `1×c` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        assert_eq!(bv.len(), c, "add_bias: width mismatch");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (r, b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let value = Tensor::new(xv.shape(), data).unwrap();
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddBias(x, bias), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        assert_eq!(bv.rows(), k, "matmul: inner dimension mismatch");
        let m = bv.cols();
        let mut c = vec![0.0; n * m];
        gemm_acc(av.data(), bv.data(), &mut c, n, k, m);
        let value = Tensor::matrix(n, m, c).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        assert_eq!(bv.cols(), k, "matmul_nt: inner dimension mismatch");
        let m = bv.rows();
        let mut c = vec![0.0; n * m];
        gemm_nt_acc(av.data(), bv.data(), &mut c, n, k, m);
        let value = Tensor::matrix(n, m, c).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshaped(shape)
            .expect("reshape: element count mismatch");
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn gather(&mut self, sources: &[Var], picks: Rc<[(u32, u32)]>) -> Var {
        assert!(!sources.is_empty(), "gather: no sources");
        let c = self.value(sources[0]).cols();
        for s in sources {
            assert_eq!(self.value(*s).cols(), c, "gather: source width mismatch");
        }
        let mut data = Vec::with_capacity(picks.len() * c);
        for &(s, r) in picks.iter() {
            data.extend_from_slice(self.value(sources[s as usize]).row_slice(r as usize));
        }
        let value = Tensor::matrix(picks.len(), c, data).unwrap();
        let ng = sources.iter().any(|s| self.ng(*s));
        self.push(
            value,
            Op::Gather {
                sources: sources.to_vec(),
                picks,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let picks: Rc<[(u32, u32)]> = rows.iter().map(|&r| (0u32, r as u32)).collect();
        self.gather(&[x], picks)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (n, c) = (xv.rows(), xv.cols());
        assert_eq!(gv.len(), c, "layer_norm: gain width");
        assert_eq!(bv.len(), c, "layer_norm: bias width");
        let mut out = vec![0.0; n * c];
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out).unwrap();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xv.shape(), data).unwrap();
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    /// Multi-head scaled dot-product attention over independent blocks.
    /// `q` has one row per query, `k`/`v` one row per key; the output has the
    /// shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, blocks: Rc<[AttnBlock]>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "attention: key width");
        assert_eq!(vv.cols(), d, "attention: value width");
        assert_eq!(kv.rows(), vv.rows(), "attention: key/value rows");
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; qv.len()];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for b in blocks.iter() {
            assert!(b.q_start + b.q_len <= qv.rows() && b.k_start + b.k_len <= kv.rows());
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for qi in b.q_start..b.q_start + b.q_len {
                    let qrow = &qd[qi * d + cols.start..qi * d + cols.end];
                    scores.clear();
                    for kj in b.k_start..b.k_start + b.k_len {
                        let krow = &kd[kj * d + cols.start..kj * d + cols.end];
                        scores.push(dot(qrow, krow) * scale);
                    }
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let orow = &mut out[qi * d + cols.start..qi * d + cols.end];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs.push(p);
                        let kj = b.k_start + j;
                        let vrow = &vd[kj * d + cols.start..kj * d + cols.end];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(qv.shape(), out).unwrap();
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                blocks,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Row-wise outer product flattened row-major: `out[b, i*n+j] = a[b,i]·c[b,j]`.
    pub fn outer_rows(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        assert_eq!(av.rows(), cv.rows(), "outer_rows: row count");
        let (n, p, q) = (av.rows(), av.cols(), cv.cols());
        let mut out = Vec::with_capacity(n * p * q);
        for r in 0..n {
            let ar = av.row_slice(r);
            let cr = cv.row_slice(r);
            for &x in ar {
                out.extend(cr.iter().map(|y| x * y));
            }
        }
        let value = Tensor::matrix(n, p * q, out).unwrap();
        let ng = self.ng(a) || self.ng(c);
        self.push(value, Op::Outer(a, c), ng)
    }

    /// Per-row inner product, `n × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "row_dot");
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.rows();
        let out = (0..n).map(|i| dot(av.row_slice(i), bv.row_slice(i))).collect();
        let value = Tensor::matrix(n, 1, out).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::RowDot(a, b), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Mean over all elements; 0 for an empty tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = if x.is_empty() {
            0.0
        } else {
            x.data().iter().sum::<f64>() / x.len() as f64
        };
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Per-row squared Euclidean distance, `n × 1`.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sq_dist_rows");
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.rows();
        let out = (0..n)
            .map(|i| {
                av.row_slice(i)
                    .iter()
                    .zip(bv.row_slice(i))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let value = Tensor::matrix(n, 1, out).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::SqDistRows(a, b), ng)
    }

    /// Per-row mean Smooth L1 of `a - b`, `n × 1`.
    pub fn smooth_l1_rows(&mut self, a: Var, b: Var, beta: f64) -> Var {
        self.binary_same_shape(a, b, "smooth_l1_rows");
        assert!(beta > 0.0, "smooth_l1 beta must be positive");
        let (av, bv) = (self.value(a), self.value(b));
        let (n, c) = (av.rows(), av.cols().max(1));
        let out = (0..n)
            .map(|i| {
                av.row_slice(i)
                    .iter()
                    .zip(bv.row_slice(i))
                    .map(|(x, y)| smooth_l1_scalar(x - y, beta))
                    .sum::<f64>()
                    / c as f64
            })
            .collect();
        let value = Tensor::matrix(n, 1, out).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::SmoothL1Rows(a, b, beta), ng)
    }

    /// Per-row cosine similarity, `n × 1` (0 where a norm is below 1e-12).
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "cosine_rows");
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.rows();
        let out = (0..n)
            .map(|i| cosine_slices(av.row_slice(i), bv.row_slice(i)))
            .collect();
        let value = Tensor::matrix(n, 1, out).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::CosineRows(a, b), ng)
    }

    /// Scales each row to unit norm; rows with norm below 1e-12 become zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n {
            let r = xv.row_slice(i);
            let nr = dot(r, r).sqrt();
            norms.push(nr);
            if nr < NORM_EPS {
                out.extend(std::iter::repeat(0.0).take(r.len()));
            } else {
                out.extend(r.iter().map(|v| v / nr));
            }
        }
        let value = Tensor::new(xv.shape(), out).unwrap();
        let ng = self.ng(x);
        self.push(value, Op::NormalizeRows(x, norms), ng)
    }

    /// Per-row softmax cross-entropy `-log softmax(logits_i)[targets_i]`, `n × 1`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), n, "cross_entropy_rows: one target per row");
        let mut softmax = vec![0.0; n * c];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = lv.row_slice(i);
            assert!(targets[i] < c, "cross_entropy_rows: target out of range");
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                softmax[i * c + j] = e;
                z += e;
            }
            let t = targets[i];
            // a confident row has z = 1 + tiny; summing the tiny part on its
            // own keeps the loss from being rounded against 1
            let ce = if row[t] == mx {
                let rest: f64 = (0..c).filter(|&j| j != t).map(|j| softmax[i * c + j]).sum();
                rest.ln_1p()
            } else {
                z.ln() + (mx - row[t])
            };
            for s in &mut softmax[i * c..(i + 1) * c] {
                *s /= z;
            }
            out.push(ce);
        }
        let value = Tensor::matrix(n, 1, out).unwrap();
        let ng = self.ng(logits);
        self.push(
            value,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
            ng,
        )
    }

    /// Propagates d(loss)/d(node) to every node that needs a gradient.
    /// Each node is visited once, in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.ng(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGrad => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((x, gy), o) in s.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((x, gy), o) in s.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                let c = self.value(*bias).len();
                if let Some(s) = self.slot(grads, *bias) {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if let Some(s) = self.slot(grads, *a) {
                    gemm_nt_acc(g, bv.data(), s, n, m, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm_tn_acc(av.data(), g, s, n, k, m);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if let Some(s) = self.slot(grads, *a) {
                    gemm_acc(g, bv.data(), s, n, m, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm_tn_acc(g, av.data(), s, n, m, k);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Gather { sources, picks } => {
                let c = node.value.cols();
                for (out_row, &(src, row)) in picks.iter().enumerate() {
                    let v = sources[src as usize];
                    if let Some(s) = self.slot(grads, v) {
                        let r = row as usize;
                        let dst = &mut s[r * c..(r + 1) * c];
                        let gr = &g[out_row * c..(out_row + 1) * c];
                        dst.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(s) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for gr in g.chunks(c) {
                        s.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (i, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let dst = &mut s[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] += rstd[i] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((d, gy), xi) in s.iter_mut().zip(g).zip(xv) {
                        *d += gy * gelu_grad(*xi);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                blocks,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, blocks, *heads, probs, g, grads),
            Op::Outer(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                let (n, p, qn) = (av.rows(), av.cols(), cv.cols());
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..n {
                        let cr = cv.row_slice(r);
                        for i in 0..p {
                            let gr = &g[r * p * qn + i * qn..r * p * qn + (i + 1) * qn];
                            s[r * p + i] += dot(gr, cr);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *c) {
                    for r in 0..n {
                        let ar = av.row_slice(r);
                        let dst = &mut s[r * qn..(r + 1) * qn];
                        for (i, &ai) in ar.iter().enumerate() {
                            let gr = &g[r * p * qn + i * qn..r * p * qn + (i + 1) * qn];
                            dst.iter_mut().zip(gr).for_each(|(x, y)| *x += ai * y);
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        let br = bv.row_slice(i);
                        s[i * c..(i + 1) * c].iter_mut().zip(br).for_each(|(x, y)| *x += gi * y);
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        let ar = av.row_slice(i);
                        s[i * c..(i + 1) * c].iter_mut().zip(ar).for_each(|(x, y)| *x += gi * y);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let n = s.len().max(1) as f64;
                    s.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::SqDistRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let diff: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .enumerate()
                    .map(|(idx, (x, y))| 2.0 * g[idx / c.max(1)] * (x - y))
                    .collect();
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(&diff).for_each(|(x, y)| *x += y);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(&diff).for_each(|(x, y)| *x -= y);
                }
            }
            Op::SmoothL1Rows(a, b, beta) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols().max(1);
                let d: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .enumerate()
                    .map(|(idx, (x, y))| g[idx / c] * smooth_l1_grad(x - y, *beta) / c as f64)
                    .collect();
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(&d).for_each(|(x, y)| *x -= y);
                }
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                for (i, gi) in g.iter().enumerate() {
                    let (ar, br) = (av.row_slice(i), bv.row_slice(i));
                    let na = dot(ar, ar).sqrt();
                    let nb = dot(br, br).sqrt();
                    if na < NORM_EPS || nb < NORM_EPS {
                        continue;
                    }
                    let cos = dot(ar, br) / (na * nb);
                    if let Some(s) = self.slot(grads, *a) {
                        let dst = &mut s[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] += gi * (br[j] / (na * nb) - cos * ar[j] / (na * na));
                        }
                    }
                    if let Some(s) = self.slot(grads, *b) {
                        let dst = &mut s[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] += gi * (ar[j] / (na * nb) - cos * br[j] / (nb * nb));
                        }
                    }
                }
            }
            Op::NormalizeRows(x, norms) => {
                let c = node.value.cols();
                if let Some(s) = self.slot(grads, *x) {
                    for (i, &nr) in norms.iter().enumerate() {
                        if nr < NORM_EPS {
                            continue;
                        }
                        let y = node.value.row_slice(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let yg = dot(y, gr);
                        let dst = &mut s[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] += (gr[j] - y[j] * yg) / nr;
                        }
                    }
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                softmax,
            } => {
                let c = self.value(*logits).cols();
                if let Some(s) = self.slot(grads, *logits) {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            s[i * c + j] += gi * (softmax[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        blocks: &[AttnBlock],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = self.ng(q).then(|| vec![0.0; qv.len()]);
        let mut dk = self.ng(k).then(|| vec![0.0; kv.len()]);
        let mut dv = self.ng(v).then(|| vec![0.0; vv.len()]);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut off = 0;
        let mut dp = Vec::new();
        for b in blocks {
            for h in 0..heads {
                let c0 = h * dh;
                for qi in b.q_start..b.q_start + b.q_len {
                    let p = &probs[off..off + b.k_len];
                    off += b.k_len;
                    let grow = &g[qi * d + c0..qi * d + c0 + dh];
                    dp.clear();
                    for j in 0..b.k_len {
                        let kj = b.k_start + j;
                        dp.push(dot(grow, &vd[kj * d + c0..kj * d + c0 + dh]));
                        if let Some(dv) = dv.as_mut() {
                            let dst = &mut dv[kj * d + c0..kj * d + c0 + dh];
                            dst.iter_mut().zip(grow).for_each(|(x, y)| *x += p[j] * y);
                        }
                    }
                    let pdp = dot(p, &dp);
                    for j in 0..b.k_len {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        let kj = b.k_start + j;
                        if let Some(dq) = dq.as_mut() {
                            let krow = &kd[kj * d + c0..kj * d + c0 + dh];
                            let dst = &mut dq[qi * d + c0..qi * d + c0 + dh];
                            dst.iter_mut().zip(krow).for_each(|(x, y)| *x += ds * y);
                        }
                        if let Some(dk) = dk.as_mut() {
                            let qrow = &qd[qi * d + c0..qi * d + c0 + dh];
                            let dst = &mut dk[kj * d + c0..kj * d + c0 + dh];
                            dst.iter_mut().zip(qrow).for_each(|(x, y)| *x += ds * y);
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(local), Some(s)) = (local, self.slot(grads, var)) {
                s.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
            }
        }
    }
}
