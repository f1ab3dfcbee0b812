//! Central-difference gradient oracle.

use super::matrix::Matrix;
use super::param::{HasParams, Parameter};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;

/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of `p`.
pub fn finite_diff_grad(p: &mut Parameter, h: f64, mut f: impl FnMut(&Parameter) -> f64) -> Matrix {
    let (r, c) = p.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r * c {
        let orig = p.value.as_slice()[i];
        p.value.as_mut_slice()[i] = orig + h;
        let plus = f(p);
        p.value.as_mut_slice()[i] = orig - h;
        let minus = f(p);
        p.value.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Same as [`finite_diff_grad`] for the `index`-th parameter of a model, where
/// the objective needs the whole model.
pub fn finite_diff_model<M: HasParams>(
    model: &mut M,
    index: usize,
    h: f64,
    mut f: impl FnMut(&mut M) -> f64,
) -> Matrix {
    let mut shape = (0, 0);
    model.with_param_mut(index, &mut |p| shape = p.shape());
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..shape.0 * shape.1 {
        let mut orig = 0.0;
        model.with_param_mut(index, &mut |p| {
            orig = p.value.as_slice()[i];
            p.value.as_mut_slice()[i] = orig + h;
        });
        let plus = f(model);
        model.with_param_mut(index, &mut |p| p.value.as_mut_slice()[i] = orig - h);
        let minus = f(model);
        model.with_param_mut(index, &mut |p| p.value.as_mut_slice()[i] = orig);
        out.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest element-wise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
