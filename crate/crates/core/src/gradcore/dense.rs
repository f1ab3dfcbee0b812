use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::param::{HasParams, Parameter};
use super::rng::DetRng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
    SoftmaxRows,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply_in_place(self, m: &mut Matrix) {
        match self {
            Activation::Relu => m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Sigmoid => m.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Identity => {}
            Activation::SoftmaxRows => {
                for r in 0..m.rows() {
                    softmax_in_place(m.row_mut(r));
                }
            }
        }
    }

    /// Maps `d(loss)/d(output)` to `d(loss)/d(pre-activation)` given the
    /// cached activation output.
    pub fn backprop(self, out: &Matrix, d_out: &Matrix) -> Matrix {
        let mut dz = d_out.clone();
        match self {
            Activation::Relu => {
                for (g, &y) in dz.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (g, &y) in dz.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *g *= y * (1.0 - y);
                }
            }
            Activation::Identity => {}
            Activation::SoftmaxRows => {
                for r in 0..dz.rows() {
                    let y = out.row(r);
                    let s: f64 = y.iter().zip(d_out.row(r)).map(|(a, b)| a * b).sum();
                    for (g, &yi) in dz.row_mut(r).iter_mut().zip(y) {
                        *g = yi * (*g - s);
                    }
                }
            }
        }
        dz
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone)]
struct DenseCache {
    x: Matrix,
    out: Matrix,
}

/// Fully connected layer `act(x·W + b)` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Parameter,
    pub b: Parameter,
    pub act: Activation,
    cache: Option<DenseCache>,
}

impl Dense {
    pub fn new(name: &str, d_in: usize, d_out: usize, act: Activation, rng: &mut DetRng) -> Self {
        Self {
            w: Parameter::glorot(format!("{name}.w"), d_in, d_out, rng),
            b: Parameter::zeros(format!("{name}.b"), 1, d_out),
            act,
            cache: None,
        }
    }

    pub fn from_parts(w: Parameter, b: Parameter, act: Activation) -> Result<Self> {
        if b.shape() != (1, w.shape().1) {
            return Err(Error::Dimension {
                op: "dense bias",
                left: w.shape(),
                right: b.shape(),
            });
        }
        Ok(Self {
            w,
            b,
            act,
            cache: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w.shape().0
    }

    pub fn d_out(&self) -> usize {
        self.w.shape().1
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let out = self.infer(x)?;
        self.cache = Some(DenseCache {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::Dimension {
                op: "dense_forward",
                left: x.shape(),
                right: self.w.shape(),
            });
        }
        let mut z = x.matmul(&self.w.value)?;
        let bias = self.b.value.as_slice();
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        self.act.apply_in_place(&mut z);
        Ok(z)
    }

    /// Accumulates parameter gradients and returns `d(loss)/dx`.
    pub fn backward(&mut self, d_out: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State(format!("{}: backward without forward", self.w.name)))?;
        d_out.same_shape(&cache.out, "dense_backward")?;
        let dz = self.act.backprop(&cache.out, d_out);
        let dw = cache.x.matmul_tn(&dz)?;
        self.w.grad.add_assign(&dw)?;
        self.b.grad.add_assign(&dz.col_sum())?;
        dz.matmul_nt(&self.w.value)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl HasParams for Dense {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.w);
        f(&self.b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Stack of dense layers: ReLU on hidden layers, `last_act` on the final one.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], last_act: Activation, rng: &mut DetRng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last_act } else { Activation::Relu };
                Dense::new(&format!("{name}.{i}"), dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, Dense::d_out)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, d_out: &Matrix) -> Result<Matrix> {
        let mut g = d_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }
}

impl HasParams for Mlp {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }
}
