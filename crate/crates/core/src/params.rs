//! Uniform access to learnable tensors.
//!
//! Heads, encoders and their gradients share one type per variant, so a
//! gradient is "the same structure filled with derivatives". Visiting order is
//! fixed per type; flat indices used by gradient checks and SGD rely on it.

use rand::Rng;

use crate::numerics::RngState;

/// One named learnable tensor as reported by [`Params::visit`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub trait Params {
    /// Calls `f(name, shape, values)` for every learnable tensor.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    /// Mutable counterpart of [`Params::visit`], same order.
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn groups(&self, prefix: &str) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, shape, values| {
            out.push(ParamGroup {
                name: name.to_string(),
                shape: shape.to_vec(),
                values: values.to_vec(),
            })
        });
        out
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        debug_assert_eq!(offset, flat.len());
    }

    /// `self += alpha · other` for a structurally identical `other`.
    fn add_scaled(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |v| {
            for (x, g) in v.iter_mut().zip(&flat[offset..]) {
                *x += alpha * g;
            }
            offset += v.len();
        });
    }

    fn scale(&mut self, alpha: f64) {
        self.visit_mut(&mut |v| v.iter_mut().for_each(|x| *x *= alpha));
    }

    /// Adds `delta` to the scalar at flat position `index`.
    fn nudge(&mut self, index: usize, delta: f64) {
        let mut offset = 0;
        self.visit_mut(&mut |v| {
            if index >= offset && index < offset + v.len() {
                v[index - offset] += delta;
            }
            offset += v.len();
        });
    }

    /// Adds independent uniform noise in `[-scale, scale)` to every parameter.
    fn jitter(&mut self, rng: &mut RngState, scale: f64) {
        self.visit_mut(&mut |v| {
            for x in v.iter_mut() {
                *x += rng.random_range(-scale..scale);
            }
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
