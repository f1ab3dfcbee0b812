use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::DetRng;
use crate::error::{Error, Result};

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub m: Matrix,
    pub v: Matrix,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros(rows, cols))
    }

    /// Glorot-uniform weights over `(-√(6/(fan_in+fan_out)), √(6/(fan_in+fan_out)))`.
    pub fn glorot(name: impl Into<String>, rows: usize, cols: usize, rng: &mut DetRng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-limit, limit)).collect();
        Self::new(name, Matrix::from_vec(rows, cols, data).expect("sized"))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns trainable parameters. The visit order is part of the
/// checkpoint contract and must be stable for a given configuration.
pub trait HasParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Runs `f` on the `index`-th parameter in visit order.
    fn with_param_mut(&mut self, index: usize, f: &mut dyn FnMut(&mut Parameter)) {
        let mut i = 0;
        self.visit_params_mut(&mut |p| {
            if i == index {
                f(p);
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update of `p.value` from `p.grad`. The gradient is
    /// left in place; callers zero it before the next batch.
    pub fn step(&self, p: &mut Parameter) -> Result<()> {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite {
                name: p.name.clone(),
            });
        }
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let g = p.grad.as_slice();
        let m = p.m.as_mut_slice();
        let v = p.v.as_mut_slice();
        let w = p.value.as_mut_slice();
        for i in 0..g.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step_all<M: HasParams + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut err = None;
        model.visit_params_mut(&mut |p| {
            if err.is_none() {
                if let Err(e) = self.step(p) {
                    err = Some(e);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Parameter::new("w", Matrix::from_rows(&[vec![0.0]]));
        p.grad.set(0, 0, 1.0);
        Adam::new(0.1).step(&mut p).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.value.get(0, 0) - expected).abs() < 1e-15);
        assert_eq!(p.step_count, 1);
        assert_eq!(p.grad.get(0, 0), 1.0);
    }

    #[test]
    fn zero_grad_leaves_value_unchanged() {
        let mut p = Parameter::new("w", Matrix::from_rows(&[vec![1.5, -2.0]]));
        let adam = Adam::new(0.01);
        for _ in 0..10 {
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.value.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn identical_parameters_evolve_identically() {
        let mut rng = DetRng::new(5);
        let mut a = Parameter::glorot("a", 3, 2, &mut rng);
        let mut b = a.clone();
        let adam = Adam::new(0.05);
        for step in 0..5 {
            for p in [&mut a, &mut b] {
                p.grad.fill(step as f64 * 0.3 - 0.5);
                adam.step(p).unwrap();
            }
        }
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Parameter::zeros("tower.w0", 1, 1);
        p.grad.set(0, 0, f64::NAN);
        let err = Adam::new(0.1).step(&mut p).unwrap_err();
        assert!(err.to_string().contains("tower.w0"));
    }
}
