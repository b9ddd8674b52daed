//! Dense layers and leaky-rectifier MLPs with hand-written backward passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{axpy, leaky, leaky_grad, Matrix, RngState};
use crate::params::{join, Params};

/// Affine map `z = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Weights uniform in `±1/√in`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut weight = Matrix::zeros(output, input);
        for w in weight.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
        Dense {
            weight,
            bias: vec![0.0; output],
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weight.matvec(x);
        axpy(&mut z, 1.0, &self.bias);
        z
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx`.
    pub(crate) fn backward(&self, x: &[f64], dz: &[f64], grad: &mut Dense) -> Vec<f64> {
        grad.weight.add_outer(1.0, dz, x);
        axpy(&mut grad.bias, 1.0, dz);
        self.weight.matvec_t(dz)
    }
}

impl Params for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &join(prefix, "weight"),
            &[self.weight.rows(), self.weight.cols()],
            self.weight.as_slice(),
        );
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.as_mut_slice());
        f(&mut self.bias);
    }
}

/// Stack of dense layers with a leaky rectifier between layers and none after
/// the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_traced`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Mlp {
    /// `widths = [in, hidden.., out]`, at least two entries.
    pub fn init(widths: &[usize], rng: &mut RngState) -> Result<Self> {
        check_widths(widths)?;
        Ok(Mlp {
            layers: widths
                .windows(2)
                .map(|w| Dense::init(w[0], w[1], rng))
                .collect(),
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Mlp {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim(
                    "mlp layer chaining",
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::dim("mlp bias", l.output_dim(), l.bias.len()));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::output_dim));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if i < last {
                a.iter_mut().for_each(|v| *v = leaky(*v));
            }
        }
        a
    }

    pub fn forward_traced(&self, x: &[f64]) -> MlpTrace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&a);
            inputs.push(a);
            a = if i < last {
                z.iter().map(|&v| leaky(v)).collect()
            } else {
                z.clone()
            };
            preacts.push(z);
        }
        MlpTrace {
            inputs,
            preacts,
            output: a,
        }
    }

    /// Accumulates parameter gradients into `grad` and returns `d input`.
    pub fn backward(&self, trace: &MlpTrace, d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                for (di, &z) in d.iter_mut().zip(&trace.preacts[i]) {
                    *di *= leaky_grad(z);
                }
            }
            d = self.layers[i].backward(&trace.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::invalid("mlp widths need an input and an output"));
    }
    if widths.contains(&0) {
        return Err(Error::invalid("mlp widths must be positive"));
    }
    Ok(())
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}
