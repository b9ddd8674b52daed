//! Single-head self-attention over the prototype set with a residual
//! connection and per-row layer normalization:
//! `P' = LN(P + softmax(Q Kᵀ / √D) V)` where `Q = P W_Qᵀ`, `K = P W_Kᵀ`,
//! `V = P W_Vᵀ` and the softmax runs over keys.

use rand::Rng;

use crate::classifier::PrototypeSet;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_unchecked, Matrix, RngState};
use crate::params::{join, Params};

use super::norm::{layer_standardize, layer_standardize_backward, NormParams};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub norm: NormParams,
}

fn uniform_square(dim: usize, rng: &mut RngState) -> Matrix {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut m = Matrix::zeros(dim, dim);
    for w in m.as_mut_slice() {
        *w = rng.random_range(-bound..bound);
    }
    m
}

impl AttentionParams {
    pub fn init(dim: usize, eps: f64, rng: &mut RngState) -> Self {
        AttentionParams {
            w_q: uniform_square(dim, rng),
            w_k: uniform_square(dim, rng),
            w_v: uniform_square(dim, rng),
            norm: NormParams::identity(dim, eps),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        AttentionParams {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            norm: self.norm.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm.dim()
    }

    pub(crate) fn validate(&self, dim: usize) -> Result<()> {
        for (name, m) in [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v)] {
            if m.rows() != dim || m.cols() != dim {
                return Err(Error::InvalidArgument(format!(
                    "attention {name} must be {dim}x{dim}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        self.norm.validate(dim)
    }
}

impl Params for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            f(&join(prefix, name), &[m.rows(), m.cols()], m.as_slice());
        }
        self.norm.visit(prefix, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w_q.as_mut_slice());
        f(self.w_k.as_mut_slice());
        f(self.w_v.as_mut_slice());
        self.norm.visit_mut(f);
    }
}

struct Trace {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Row i holds the attention weights of query i over all keys.
    weights: Vec<Vec<f64>>,
    xhat: Matrix,
    inv: Vec<f64>,
}

fn run(p: &Matrix, params: &AttentionParams) -> (Matrix, Trace) {
    let n = p.rows();
    let scale = 1.0 / (p.cols() as f64).sqrt();
    let q: Vec<Vec<f64>> = p.iter_rows().map(|r| params.w_q.matvec(r)).collect();
    let k: Vec<Vec<f64>> = p.iter_rows().map(|r| params.w_k.matvec(r)).collect();
    let v: Vec<Vec<f64>> = p.iter_rows().map(|r| params.w_v.matvec(r)).collect();
    let mut residual = p.clone();
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let scores: Vec<f64> = k.iter().map(|kj| dot(&q[i], kj) * scale).collect();
        let a = softmax_unchecked(&scores);
        let row = residual.row_mut(i);
        for (j, &aij) in a.iter().enumerate() {
            for (r, vj) in row.iter_mut().zip(&v[j]) {
                *r += aij * vj;
            }
        }
        weights.push(a);
    }
    let (xhat, inv) = layer_standardize(&residual, params.norm.eps);
    let out = params.norm.affine(&xhat);
    (
        out,
        Trace {
            q,
            k,
            v,
            weights,
            xhat,
            inv,
        },
    )
}

pub fn attention_forward(p: &PrototypeSet, params: &AttentionParams) -> Result<PrototypeSet> {
    params.validate(p.dim())?;
    Ok(PrototypeSet::from_matrix_unchecked(run(p.matrix(), params).0))
}

pub(crate) fn attention_backward(p: &Matrix, params: &AttentionParams, upstream: &Matrix) -> (AttentionParams, Matrix) {
    let (_, t) = run(p, params);
    let (n, dim) = (p.rows(), p.cols());
    let scale = 1.0 / (dim as f64).sqrt();
    let mut grad = params.zeros_like();
    let dxhat = params.norm.affine_backward(&t.xhat, upstream, &mut grad.norm);
    let dres = layer_standardize_backward(&t.xhat, &t.inv, &dxhat);

    let mut dp = dres.clone();
    let mut dq = vec![vec![0.0; dim]; n];
    let mut dk = vec![vec![0.0; dim]; n];
    let mut dv = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let dr = dres.row(i);
        let a = &t.weights[i];
        let da: Vec<f64> = t.v.iter().map(|vj| dot(dr, vj)).collect();
        let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        for j in 0..n {
            for (d, r) in dv[j].iter_mut().zip(dr) {
                *d += a[j] * r;
            }
            let ds = a[j] * (da[j] - mean) * scale;
            for d in 0..dim {
                dq[i][d] += ds * t.k[j][d];
                dk[j][d] += ds * t.q[i][d];
            }
        }
    }
    for i in 0..n {
        let x = p.row(i);
        grad.w_q.add_outer(1.0, &dq[i], x);
        grad.w_k.add_outer(1.0, &dk[i], x);
        grad.w_v.add_outer(1.0, &dv[i], x);
        let back = [
            params.w_q.matvec_t(&dq[i]),
            params.w_k.matvec_t(&dk[i]),
            params.w_v.matvec_t(&dv[i]),
        ];
        let row = dp.row_mut(i);
        for b in &back {
            for (r, x) in row.iter_mut().zip(b) {
                *r += x;
            }
        }
    }
    (grad, dp)
}
