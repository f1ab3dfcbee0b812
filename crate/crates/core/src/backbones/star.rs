use crate::error::{Error, Result};
use crate::gradcore::{Activation, DetRng, HasParams, Matrix, Parameter};

#[derive(Debug, Clone)]
struct StarCache {
    groups: Vec<Vec<usize>>,
    x: Matrix,
    out: Matrix,
}

/// Star-topology dense layer: scenario `d` uses `W_shared ⊙ W_d` and
/// `b_shared + b_d`. Scenario weights start at ones and biases at zero, so the
/// layer initially equals the shared network.
#[derive(Debug, Clone)]
pub struct StarLayer {
    pub w_shared: Parameter,
    pub b_shared: Parameter,
    pub w_dom: Vec<Parameter>,
    pub b_dom: Vec<Parameter>,
    pub act: Activation,
    cache: Option<StarCache>,
}

impl StarLayer {
    pub fn new(name: &str, d_in: usize, d_out: usize, act: Activation, scenarios: usize, rng: &mut DetRng) -> Self {
        Self {
            w_shared: Parameter::glorot(format!("{name}.w_shared"), d_in, d_out, rng),
            b_shared: Parameter::zeros(format!("{name}.b_shared"), 1, d_out),
            w_dom: (0..scenarios)
                .map(|d| Parameter::new(format!("{name}.w_dom.{d}"), Matrix::filled(d_in, d_out, 1.0)))
                .collect(),
            b_dom: (0..scenarios)
                .map(|d| Parameter::zeros(format!("{name}.b_dom.{d}"), 1, d_out))
                .collect(),
            act,
            cache: None,
        }
    }

    pub fn effective_weight(&self, d: usize) -> Matrix {
        self.w_shared.value.hadamard(&self.w_dom[d].value).expect("same shape")
    }

    pub fn forward(&mut self, x: &Matrix, groups: &[Vec<usize>]) -> Result<Matrix> {
        if x.cols() != self.w_shared.shape().0 {
            return Err(Error::Dimension {
                op: "star_forward",
                left: x.shape(),
                right: self.w_shared.shape(),
            });
        }
        let d_out = self.w_shared.shape().1;
        let mut out = Matrix::zeros(x.rows(), d_out);
        for (d, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut z = x.gather_rows(rows).matmul(&self.effective_weight(d))?;
            let bias: Vec<f64> = self.b_shared.value.as_slice().iter().zip(self.b_dom[d].value.as_slice()).map(|(a, b)| a + b).collect();
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&bias) {
                    *v += b;
                }
            }
            self.act.apply_in_place(&mut z);
            out.scatter_rows(rows, &z);
        }
        self.cache = Some(StarCache {
            groups: groups.to_vec(),
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn backward(&mut self, d_out: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("star layer: backward without forward".into()))?;
        d_out.same_shape(&cache.out, "star_backward")?;
        let mut dx = Matrix::zeros(cache.x.rows(), cache.x.cols());
        let dz_all = self.act.backprop(&cache.out, d_out);
        for (d, rows) in cache.groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let dz = dz_all.gather_rows(rows);
            let xs = cache.x.gather_rows(rows);
            let d_eff = xs.matmul_tn(&dz)?;
            let w_eff = self.effective_weight(d);
            self.w_shared.grad.add_assign(&d_eff.hadamard(&self.w_dom[d].value)?)?;
            self.w_dom[d].grad.add_assign(&d_eff.hadamard(&self.w_shared.value)?)?;
            let db = dz.col_sum();
            self.b_shared.grad.add_assign(&db)?;
            self.b_dom[d].grad.add_assign(&db)?;
            dx.scatter_rows(rows, &dz.matmul_nt(&w_eff)?);
        }
        Ok(dx)
    }
}

impl HasParams for StarLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.w_shared);
        f(&self.b_shared);
        self.w_dom.iter().for_each(&mut *f);
        self.b_dom.iter().for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w_shared);
        f(&mut self.b_shared);
        self.w_dom.iter_mut().for_each(&mut *f);
        self.b_dom.iter_mut().for_each(f);
    }
}
