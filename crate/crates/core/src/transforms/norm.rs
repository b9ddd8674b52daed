//! Layer, instance and task normalization of prototype sets.
//!
//! Prototypes are D-vectors, so the spatial axes of image normalization are
//! absent. Layer normalization takes moments over the D entries of each
//! prototype. Instance normalization takes per-dimension moments across the N
//! members of the set. Task normalization blends support-batch moments with
//! the per-prototype layer moments through a learned weight α.
//!
//! All variances are population variances, and the normalized value is
//! `(x − μ) / √(σ² + ε)` followed by the elementwise affine `a · x̂ + b`.

use crate::classifier::PrototypeSet;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};
use crate::params::{join, Params};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Elementwise gain/bias and the stabilizing ε.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

impl NormParams {
    /// Unit gain, zero bias.
    pub fn identity(dim: usize, eps: f64) -> Self {
        NormParams {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            eps,
        }
    }

    pub fn zeros_like(&self) -> Self {
        NormParams {
            gain: vec![0.0; self.gain.len()],
            bias: vec![0.0; self.bias.len()],
            eps: self.eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub(crate) fn validate(&self, dim: usize) -> Result<()> {
        if self.gain.len() != dim {
            return Err(Error::dim("normalization gain", dim, self.gain.len()));
        }
        if self.bias.len() != dim {
            return Err(Error::dim("normalization bias", dim, self.bias.len()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub(crate) fn affine(&self, xhat: &Matrix) -> Matrix {
        affine(xhat, &self.gain, &self.bias)
    }

    /// Gradients of the affine step; returns `d x̂`.
    pub(crate) fn affine_backward(&self, xhat: &Matrix, upstream: &Matrix, grad: &mut NormParams) -> Matrix {
        affine_backward(xhat, &self.gain, upstream, &mut grad.gain, &mut grad.bias)
    }
}

impl Params for NormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "gain"), &[self.gain.len()], &self.gain);
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

pub(crate) fn affine(xhat: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((v, g), b) in out.row_mut(r).iter_mut().zip(gain).zip(bias) {
            *v = g * *v + b;
        }
    }
    out
}

pub(crate) fn affine_backward(
    xhat: &Matrix,
    gain: &[f64],
    upstream: &Matrix,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let mut dxhat = Matrix::zeros(xhat.rows(), xhat.cols());
    for r in 0..xhat.rows() {
        let (x, up) = (xhat.row(r), upstream.row(r));
        let dx = dxhat.row_mut(r);
        for d in 0..x.len() {
            dgain[d] += up[d] * x[d];
            dbias[d] += up[d];
            dx[d] = up[d] * gain[d];
        }
    }
    dxhat
}

pub(crate) fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `(x̂, 1/√(σ² + ε))` for one slice.
pub(crate) fn standardize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let (mean, var) = moments(x);
    let inv = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv).collect(), inv)
}

pub(crate) fn standardize_backward(xhat: &[f64], inv: f64, dxhat: &[f64]) -> Vec<f64> {
    let n = xhat.len() as f64;
    let sum_d: f64 = dxhat.iter().sum();
    let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum();
    dxhat
        .iter()
        .zip(xhat)
        .map(|(d, x)| inv * (d - sum_d / n - x * sum_dx / n))
        .collect()
}

/// Per-row standardization. Returns `x̂` and the per-row inverse std.
pub(crate) fn layer_standardize(m: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut inv = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let (xh, i) = standardize(m.row(r), eps);
        out.row_mut(r).copy_from_slice(&xh);
        inv.push(i);
    }
    (out, inv)
}

pub(crate) fn layer_standardize_backward(xhat: &Matrix, inv: &[f64], dxhat: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(xhat.rows(), xhat.cols());
    for r in 0..xhat.rows() {
        let dx = standardize_backward(xhat.row(r), inv[r], dxhat.row(r));
        out.row_mut(r).copy_from_slice(&dx);
    }
    out
}

fn column(m: &Matrix, d: usize) -> Vec<f64> {
    (0..m.rows()).map(|r| m.get(r, d)).collect()
}

/// Per-dimension standardization across the set. Needs at least two members.
pub(crate) fn instance_standardize(m: &Matrix, eps: f64) -> Result<(Matrix, Vec<f64>)> {
    if m.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "instance normalization needs a set of at least 2 prototypes, got {}",
            m.rows()
        )));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut inv = Vec::with_capacity(m.cols());
    for d in 0..m.cols() {
        let (xh, i) = standardize(&column(m, d), eps);
        for (r, v) in xh.into_iter().enumerate() {
            out.set(r, d, v);
        }
        inv.push(i);
    }
    Ok((out, inv))
}

pub(crate) fn instance_standardize_backward(xhat: &Matrix, inv: &[f64], dxhat: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(xhat.rows(), xhat.cols());
    for d in 0..xhat.cols() {
        let dx = standardize_backward(&column(xhat, d), inv[d], &column(dxhat, d));
        for (r, v) in dx.into_iter().enumerate() {
            out.set(r, d, v);
        }
    }
    out
}

/// Layer normalization of every prototype followed by the affine map.
pub fn layer_norm_forward(p: &PrototypeSet, params: &NormParams) -> Result<PrototypeSet> {
    params.validate(p.dim())?;
    let (xhat, _) = layer_standardize(p.matrix(), params.eps);
    Ok(PrototypeSet::from_matrix_unchecked(params.affine(&xhat)))
}

/// Instance normalization across the prototype set followed by the affine map.
pub fn instance_norm_forward(p: &PrototypeSet, params: &NormParams) -> Result<PrototypeSet> {
    params.validate(p.dim())?;
    let (xhat, _) = instance_standardize(p.matrix(), params.eps)?;
    Ok(PrototypeSet::from_matrix_unchecked(params.affine(&xhat)))
}

pub(crate) fn layer_norm_backward(p: &Matrix, params: &NormParams, upstream: &Matrix) -> (NormParams, Matrix) {
    let (xhat, inv) = layer_standardize(p, params.eps);
    let mut grad = params.zeros_like();
    let dxhat = params.affine_backward(&xhat, upstream, &mut grad);
    (grad, layer_standardize_backward(&xhat, &inv, &dxhat))
}

pub(crate) fn instance_norm_backward(
    p: &Matrix,
    params: &NormParams,
    upstream: &Matrix,
) -> Result<(NormParams, Matrix)> {
    let (xhat, inv) = instance_standardize(p, params.eps)?;
    let mut grad = params.zeros_like();
    let dxhat = params.affine_backward(&xhat, upstream, &mut grad);
    Ok((grad, instance_standardize_backward(&xhat, &inv, &dxhat)))
}

/// Task normalization: affine parameters plus the raw blend weight, with
/// `α = logistic(alpha_raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskNormParams {
    pub norm: NormParams,
    pub alpha_raw: f64,
}

impl TaskNormParams {
    pub fn identity(dim: usize, eps: f64) -> Self {
        TaskNormParams {
            norm: NormParams::identity(dim, eps),
            alpha_raw: 0.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_raw)
    }

    pub fn zeros_like(&self) -> Self {
        TaskNormParams {
            norm: self.norm.zeros_like(),
            alpha_raw: 0.0,
        }
    }
}

impl Params for TaskNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.norm.visit(prefix, f);
        f(&join(prefix, "alpha_raw"), &[1], std::slice::from_ref(&self.alpha_raw));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.norm.visit_mut(f);
        f(std::slice::from_mut(&mut self.alpha_raw));
    }
}

/// Intermediate values of the blended-moment normalization.
#[derive(Debug, Clone)]
pub(crate) struct TaskMoments {
    pub mu_bn: Vec<f64>,
    pub var_bn: Vec<f64>,
    pub mu_plus: Vec<f64>,
    pub var_plus: Vec<f64>,
    /// Blended mean per (prototype, dimension).
    pub mu_t: Matrix,
    /// Blended variance per (prototype, dimension), before adding ε.
    pub var_t: Matrix,
    pub xhat: Matrix,
}

fn check_supports(supports: &Matrix, dim: usize) -> Result<()> {
    if supports.rows() == 0 {
        return Err(Error::invalid("task normalization needs a non-empty support set"));
    }
    if supports.cols() != dim {
        return Err(Error::dim("task normalization supports", dim, supports.cols()));
    }
    Ok(())
}

/// Blended moments for a fixed α.
///
/// `μ_T = α μ_BN + (1 − α) μ_+` and
/// `σ²_T = α (σ²_BN + (μ_BN − μ_T)²) + (1 − α)(σ²_+ + (μ_+ − μ_T)²)`, where the
/// BN moments are per dimension over the supports and the `+` moments are the
/// layer moments of each prototype.
pub(crate) fn task_moments(p: &Matrix, supports: &Matrix, alpha: f64, eps: f64) -> TaskMoments {
    let (n, dim) = (p.rows(), p.cols());
    let mut mu_bn = Vec::with_capacity(dim);
    let mut var_bn = Vec::with_capacity(dim);
    for d in 0..dim {
        let (m, v) = moments(&column(supports, d));
        mu_bn.push(m);
        var_bn.push(v);
    }
    let (mu_plus, var_plus): (Vec<f64>, Vec<f64>) = p.iter_rows().map(moments).unzip();
    let mut mu_t = Matrix::zeros(n, dim);
    let mut var_t = Matrix::zeros(n, dim);
    let mut xhat = Matrix::zeros(n, dim);
    for c in 0..n {
        for d in 0..dim {
            let mt = alpha * mu_bn[d] + (1.0 - alpha) * mu_plus[c];
            let vt = alpha * (var_bn[d] + (mu_bn[d] - mt).powi(2))
                + (1.0 - alpha) * (var_plus[c] + (mu_plus[c] - mt).powi(2));
            mu_t.set(c, d, mt);
            var_t.set(c, d, vt);
            xhat.set(c, d, (p.get(c, d) - mt) / (vt + eps).sqrt());
        }
    }
    TaskMoments {
        mu_bn,
        var_bn,
        mu_plus,
        var_plus,
        mu_t,
        var_t,
        xhat,
    }
}

/// Task normalization with an explicit blend weight `alpha ∈ [0, 1]`.
pub fn task_norm_with_alpha(
    p: &PrototypeSet,
    params: &NormParams,
    supports: &Matrix,
    alpha: f64,
) -> Result<PrototypeSet> {
    params.validate(p.dim())?;
    check_supports(supports, p.dim())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let tm = task_moments(p.matrix(), supports, alpha, params.eps);
    Ok(PrototypeSet::from_matrix_unchecked(params.affine(&tm.xhat)))
}

/// Task normalization of the prototypes against the episode's encoded
/// support features.
pub fn task_norm_forward(p: &PrototypeSet, params: &TaskNormParams, supports: &Matrix) -> Result<PrototypeSet> {
    task_norm_with_alpha(p, &params.norm, supports, params.alpha())
}

/// Returns parameter gradients, prototype gradients and support gradients.
pub(crate) fn task_norm_backward(
    p: &Matrix,
    params: &TaskNormParams,
    supports: &Matrix,
    upstream: &Matrix,
) -> (TaskNormParams, Matrix, Matrix) {
    let alpha = params.alpha();
    let eps = params.norm.eps;
    let tm = task_moments(p, supports, alpha, eps);
    let mut grad = params.zeros_like();
    let dxhat = params.norm.affine_backward(&tm.xhat, upstream, &mut grad.norm);

    let (n, dim) = (p.rows(), p.cols());
    let mut dp = Matrix::zeros(n, dim);
    let mut dmu_bn = vec![0.0; dim];
    let mut dvar_bn = vec![0.0; dim];
    let mut dmu_plus = vec![0.0; n];
    let mut dvar_plus = vec![0.0; n];
    let mut dalpha = 0.0;
    for c in 0..n {
        for d in 0..dim {
            let s = tm.var_t.get(c, d) + eps;
            let inv = 1.0 / s.sqrt();
            let centered = p.get(c, d) - tm.mu_t.get(c, d);
            let g = dxhat.get(c, d);
            let dcentered = g * inv;
            let dvar_t = -0.5 * g * centered * inv / s;
            dp.set(c, d, dp.get(c, d) + dcentered);

            let mt = tm.mu_t.get(c, d);
            let (mb, mp) = (tm.mu_bn[d], tm.mu_plus[c]);
            // σ²_T partials, literal form.
            dvar_bn[d] += alpha * dvar_t;
            dvar_plus[c] += (1.0 - alpha) * dvar_t;
            dmu_bn[d] += dvar_t * alpha * 2.0 * (mb - mt);
            dmu_plus[c] += dvar_t * (1.0 - alpha) * 2.0 * (mp - mt);
            let dmu_t = -dcentered
                - dvar_t * (alpha * 2.0 * (mb - mt) + (1.0 - alpha) * 2.0 * (mp - mt));
            dalpha += dvar_t
                * ((tm.var_bn[d] + (mb - mt).powi(2)) - (tm.var_plus[c] + (mp - mt).powi(2)));
            // μ_T partials.
            dalpha += dmu_t * (mb - mp);
            dmu_bn[d] += dmu_t * alpha;
            dmu_plus[c] += dmu_t * (1.0 - alpha);
        }
    }
    grad.alpha_raw = dalpha * alpha * (1.0 - alpha);

    let dimf = dim as f64;
    for c in 0..n {
        let row = p.row(c);
        for d in 0..dim {
            let v = dp.get(c, d) + dmu_plus[c] / dimf + dvar_plus[c] * 2.0 * (row[d] - tm.mu_plus[c]) / dimf;
            dp.set(c, d, v);
        }
    }
    let m = supports.rows() as f64;
    let mut ds = Matrix::zeros(supports.rows(), dim);
    for r in 0..supports.rows() {
        for d in 0..dim {
            ds.set(
                r,
                d,
                dmu_bn[d] / m + dvar_bn[d] * 2.0 * (supports.get(r, d) - tm.mu_bn[d]) / m,
            );
        }
    }
    (grad, dp, ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> PrototypeSet {
        PrototypeSet::from_rows(rows).unwrap()
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm_forward(&set(&[&[5.0, 5.0, 5.0]]), &NormParams::identity(3, DEFAULT_EPS)).unwrap();
        for v in out.prototype(0) {
            assert!(v.abs() < 1e-9);
        }
        // μ = 2, σ² = 1
        let out = layer_norm_forward(&set(&[&[1.0, 3.0]]), &NormParams::identity(2, 1e-300)).unwrap();
        assert!((out.prototype(0)[0] + 1.0).abs() < 1e-12);
        assert!((out.prototype(0)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let p = set(&[&[0.3, -2.0, 4.1, 0.0], &[1e-3, 2e-3, -1e-3, 0.0]]);
        let eps = DEFAULT_EPS;
        let out = layer_norm_forward(&p, &NormParams::identity(4, eps)).unwrap();
        for c in 0..2 {
            let (_, var) = moments(p.prototype(c));
            let (m, v) = moments(out.prototype(c));
            assert!(m.abs() < 1e-9);
            assert!((v - var / (var + eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn instance_norm_examples() {
        let out = instance_norm_forward(&set(&[&[0.0, 2.0], &[2.0, 4.0]]), &NormParams::identity(2, 1e-300)).unwrap();
        assert_eq!(out.prototype(0), &[-1.0, -1.0]);
        assert_eq!(out.prototype(1), &[1.0, 1.0]);

        let mut params = NormParams::identity(2, DEFAULT_EPS);
        params.bias = vec![0.5, -2.0];
        let out = instance_norm_forward(&set(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]), &params).unwrap();
        for c in 0..3 {
            assert!((out.prototype(c)[0] - 0.5).abs() < 1e-9);
            assert!((out.prototype(c)[1] + 2.0).abs() < 1e-9);
        }

        assert!(instance_norm_forward(&set(&[&[1.0, 2.0]]), &NormParams::identity(2, DEFAULT_EPS)).is_err());
    }

    #[test]
    fn instance_norm_ignores_common_shift() {
        let p = set(&[&[0.1, 2.0, -1.0], &[3.0, 0.5, 0.2], &[-2.0, 1.0, 1.5]]);
        let shifted = set(&[&[5.1, -1.0, 1.0], &[8.0, -2.5, 2.2], &[3.0, -2.0, 3.5]]);
        let params = NormParams::identity(3, DEFAULT_EPS);
        let a = instance_norm_forward(&p, &params).unwrap();
        let b = instance_norm_forward(&shifted, &params).unwrap();
        for (x, y) in a.matrix().as_slice().iter().zip(b.matrix().as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn task_norm_collapses_to_branches() {
        let p = set(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.7]]);
        let supports = Matrix::from_rows(&[[1.0, 2.0, 0.0], [0.5, -1.0, 3.0], [2.0, 0.0, 1.0]]).unwrap();
        let params = NormParams::identity(3, DEFAULT_EPS);

        let ln = layer_norm_forward(&p, &params).unwrap();
        let a0 = task_norm_with_alpha(&p, &params, &supports, 0.0).unwrap();
        for (x, y) in a0.matrix().as_slice().iter().zip(ln.matrix().as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }

        let a1 = task_norm_with_alpha(&p, &params, &supports, 1.0).unwrap();
        for d in 0..3 {
            let col: Vec<f64> = (0..3).map(|r| supports.get(r, d)).collect();
            let (m, v) = moments(&col);
            for c in 0..2 {
                let expect = (p.prototype(c)[d] - m) / (v + DEFAULT_EPS).sqrt();
                assert!((a1.prototype(c)[d] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn task_norm_half_alpha_hand_oracle() {
        // N = 2, D = 2, supports {(0, 0), (2, 4)}: μ_BN = (1, 2), σ²_BN = (1, 4).
        // Prototype (1, 3): μ_+ = 2, σ²_+ = 1. Prototype (0, 4): μ_+ = 2, σ²_+ = 4.
        let p = set(&[&[1.0, 3.0], &[0.0, 4.0]]);
        let supports = Matrix::from_rows(&[[0.0, 0.0], [2.0, 4.0]]).unwrap();
        let eps = 1e-5;
        let out = task_norm_with_alpha(&p, &NormParams::identity(2, eps), &supports, 0.5).unwrap();
        let blend = |x: f64, mb: f64, vb: f64, mp: f64, vp: f64| {
            let mt = 0.5 * mb + 0.5 * mp;
            let vt = 0.5 * (vb + (mb - mt) * (mb - mt)) + 0.5 * (vp + (mp - mt) * (mp - mt));
            (x - mt) / (vt + eps).sqrt()
        };
        let expect = [
            [blend(1.0, 1.0, 1.0, 2.0, 1.0), blend(3.0, 2.0, 4.0, 2.0, 1.0)],
            [blend(0.0, 1.0, 1.0, 2.0, 4.0), blend(4.0, 2.0, 4.0, 2.0, 4.0)],
        ];
        for c in 0..2 {
            for d in 0..2 {
                assert!((out.prototype(c)[d] - expect[c][d]).abs() < 1e-12);
            }
        }
        // (1 − 1.5)/√(1.25 + ε) for entry (0, 0)
        assert!((expect[0][0] + 0.5 / (1.25f64 + eps).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn task_norm_variance_nonnegative() {
        let p = Matrix::from_rows(&[[10.0, -3.0, 0.0], [0.1, 0.1, 0.1]]).unwrap();
        let supports = Matrix::from_rows(&[[-4.0, 2.0, 9.0], [0.0, 0.0, 0.0]]).unwrap();
        for i in 0..=20 {
            let alpha = i as f64 / 20.0;
            let tm = task_moments(&p, &supports, alpha, DEFAULT_EPS);
            assert!(tm.var_t.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn task_norm_requires_supports() {
        let p = set(&[&[1.0, 2.0]]);
        let params = TaskNormParams::identity(2, DEFAULT_EPS);
        assert!(task_norm_forward(&p, &params, &Matrix::zeros(0, 2)).is_err());
        assert!(task_norm_forward(&p, &params, &Matrix::zeros(2, 3)).is_err());
        assert!(params.alpha() > 0.0 && params.alpha() < 1.0);
    }
}
