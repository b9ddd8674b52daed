//! Residual set encoder: `p_c' = p_c + g([p_c ; max_{c' ≠ c} h(p_{c'})])`.
//!
//! The max is elementwise over the complement of `c`. For a singleton set the
//! complement is empty and the max term is the zero vector.

use crate::classifier::PrototypeSet;
use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpTrace};
use crate::numerics::{Matrix, RngState};
use crate::params::{join, Params};

/// `h: D → hidden → D` and `g: 2D → hidden → D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepSetsParams {
    pub h: Mlp,
    pub g: Mlp,
}

impl DeepSetsParams {
    pub fn init(dim: usize, hidden: usize, rng: &mut RngState) -> Result<Self> {
        Ok(DeepSetsParams {
            h: Mlp::init(&[dim, hidden, dim], rng)?,
            g: Mlp::init(&[2 * dim, hidden, dim], rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        DeepSetsParams {
            h: self.h.zeros_like(),
            g: self.g.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.input_dim()
    }

    pub(crate) fn validate(&self, dim: usize) -> Result<()> {
        if self.h.input_dim() != dim {
            return Err(Error::dim("deepsets h input", dim, self.h.input_dim()));
        }
        if self.g.input_dim() != dim + self.h.output_dim() {
            return Err(Error::dim("deepsets g input", dim + self.h.output_dim(), self.g.input_dim()));
        }
        if self.g.output_dim() != dim {
            return Err(Error::dim("deepsets g output", dim, self.g.output_dim()));
        }
        Ok(())
    }
}

impl Params for DeepSetsParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.h.visit(&join(prefix, "h"), f);
        self.g.visit(&join(prefix, "g"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.h.visit_mut(f);
        self.g.visit_mut(f);
    }
}

struct Trace {
    h: Vec<MlpTrace>,
    /// Per class and dimension, the complement member that attains the max.
    winner: Vec<Vec<Option<usize>>>,
    g: Vec<MlpTrace>,
}

fn run(p: &Matrix, params: &DeepSetsParams) -> (Matrix, Trace) {
    let n = p.rows();
    let hd = params.h.output_dim();
    let h: Vec<MlpTrace> = p.iter_rows().map(|row| params.h.forward_traced(row)).collect();
    let mut out = Matrix::zeros(n, p.cols());
    let mut winner = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    for c in 0..n {
        let mut pooled = vec![0.0; hd];
        let mut win = vec![None; hd];
        for d in 0..hd {
            for (other, t) in h.iter().enumerate() {
                if other == c {
                    continue;
                }
                let v = t.output()[d];
                if win[d].is_none() || v > pooled[d] {
                    pooled[d] = v;
                    win[d] = Some(other);
                }
            }
        }
        let mut input = p.row(c).to_vec();
        input.extend_from_slice(&pooled);
        let gt = params.g.forward_traced(&input);
        for ((o, x), y) in out.row_mut(c).iter_mut().zip(p.row(c)).zip(gt.output()) {
            *o = x + y;
        }
        winner.push(win);
        g.push(gt);
    }
    (out, Trace { h, winner, g })
}

pub fn deepsets_forward(p: &PrototypeSet, params: &DeepSetsParams) -> Result<PrototypeSet> {
    params.validate(p.dim())?;
    Ok(PrototypeSet::from_matrix_unchecked(run(p.matrix(), params).0))
}

pub(crate) fn deepsets_backward(p: &Matrix, params: &DeepSetsParams, upstream: &Matrix) -> (DeepSetsParams, Matrix) {
    let (_, trace) = run(p, params);
    let (n, dim) = (p.rows(), p.cols());
    let hd = params.h.output_dim();
    let mut grad = params.zeros_like();
    let mut dp = upstream.clone();
    let mut dh = Matrix::zeros(n, hd);
    for c in 0..n {
        let du = params.g.backward(&trace.g[c], upstream.row(c), &mut grad.g);
        for (a, b) in dp.row_mut(c).iter_mut().zip(&du[..dim]) {
            *a += b;
        }
        for d in 0..hd {
            if let Some(w) = trace.winner[c][d] {
                dh.set(w, d, dh.get(w, d) + du[dim + d]);
            }
        }
    }
    for c in 0..n {
        let dx = params.h.backward(&trace.h[c], dh.row(c), &mut grad.h);
        for (a, b) in dp.row_mut(c).iter_mut().zip(&dx) {
            *a += b;
        }
    }
    (grad, dp)
}
