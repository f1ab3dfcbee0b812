//! Hypernetwork machinery shared by the knowledge-driven meta layers and the
//! dynamic-network baseline: the layer-dimension plan, the meta network that
//! emits flattened weights, the reshape into layers, and the batched
//! application of generated stacks.
//!
//! Flattened layout is layer-major, then row-major: weight `W⁽ⁱ⁾` is a
//! `d_{i-1} × d_i` block starting at `weight_offset(i)`, bias `b⁽ⁱ⁾` a `d_i`
//! block at `bias_offset(i)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Activation, Dense, DetRng, HasParams, Matrix, Parameter};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    dims: Vec<usize>,
}

impl LayerDims {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("layer plan {dims:?} needs at least one layer")));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("layer plan {dims:?} contains a zero width")));
        }
        Ok(Self { dims })
    }

    /// `[d, mid, …, mid, d]` with `k` layers; `k = 1` gives `[d, d]`.
    pub fn preserving(d: usize, k: usize, mid: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("number of generated layers must be >= 1".into()));
        }
        let mut dims = vec![d];
        dims.extend(std::iter::repeat_n(mid.max(1), k - 1));
        dims.push(d);
        Self::new(dims)
    }

    /// `[d_in, h, h/2, …, 1]` with `k` layers ending in a scalar.
    pub fn to_logit(d_in: usize, k: usize, hidden: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("number of generated layers must be >= 1".into()));
        }
        let mut dims = vec![d_in];
        let mut w = hidden.max(1);
        for _ in 1..k {
            dims.push(w);
            w = (w / 2).max(1);
        }
        dims.push(1);
        Self::new(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of generated layers `K`.
    pub fn k(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    /// `Σ d_{i-1} · d_i`
    pub fn weight_total(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// `Σ d_i`
    pub fn bias_total(&self) -> usize {
        self.dims[1..].iter().sum()
    }

    /// Offset of layer `i` (0-based) in the flattened weights.
    pub fn weight_offset(&self, i: usize) -> usize {
        self.dims[..=i].windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn bias_offset(&self, i: usize) -> usize {
        self.dims[1..=i].iter().sum()
    }

    pub fn activation(&self, i: usize) -> Activation {
        if i + 1 == self.k() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }
}

/// Fully connected hypernetwork: a ReLU trunk feeding two linear heads that
/// emit the flattened weights and biases of a [`LayerDims`] plan.
#[derive(Debug, Clone)]
pub struct MetaNetwork {
    pub trunk: Dense,
    pub head_w: Dense,
    pub head_b: Dense,
    dims: LayerDims,
}

impl MetaNetwork {
    pub fn new(name: &str, input: usize, hidden: usize, dims: LayerDims, rng: &mut DetRng) -> Self {
        let trunk = Dense::new(&format!("{name}.trunk"), input, hidden, Activation::Relu, rng);
        let mut head_w = Dense::new(
            &format!("{name}.head_w"),
            hidden,
            dims.weight_total(),
            Activation::Identity,
            rng,
        );
        let head_b = Dense::new(
            &format!("{name}.head_b"),
            hidden,
            dims.bias_total(),
            Activation::Identity,
            rng,
        );
        // Give every generated layer a fan-in-scaled starting point: rescale
        // the head so a unit trunk activation emits weights of order
        // 1/√d_{i-1}, and seed the head bias with a Glorot draw.
        for i in 0..dims.k() {
            let (din, dout) = (dims.dims()[i], dims.dims()[i + 1]);
            let off = dims.weight_offset(i);
            let limit = (6.0 / (din + dout) as f64).sqrt();
            let gain = limit / (6.0 / (hidden + dims.weight_total()) as f64).sqrt() / (hidden as f64).sqrt();
            for r in 0..hidden {
                for v in &mut head_w.w.value.row_mut(r)[off..off + din * dout] {
                    *v *= gain;
                }
            }
            for v in &mut head_w.b.value.as_mut_slice()[off..off + din * dout] {
                *v = rng.uniform(-limit, limit);
            }
        }
        Self {
            trunk,
            head_w,
            head_b,
            dims,
        }
    }

    pub fn dims(&self) -> &LayerDims {
        &self.dims
    }

    /// Scales the input-dependent part of the generated weights and biases,
    /// leaving the shared head biases alone.
    pub fn scale_dynamic(&mut self, s: f64) {
        self.head_w.w.value.scale(s);
        self.head_b.w.value.scale(s);
    }

    /// Zeroes the shared weights of the last generated layer, so a residual
    /// stack starts out as the identity up to its knowledge-dependent part.
    pub fn zero_last_shared(&mut self) {
        let k = self.dims.k();
        let off = self.dims.weight_offset(k - 1);
        let len = self.dims.dims()[k - 1] * self.dims.dims()[k];
        self.head_w.b.value.as_mut_slice()[off..off + len].fill(0.0);
    }

    pub fn input_width(&self) -> usize {
        self.trunk.d_in()
    }

    /// Returns `(h_mw, h_mb)`, one row per input row.
    pub fn forward(&mut self, h_llm: &Matrix) -> Result<(Matrix, Matrix)> {
        let t = self.trunk.forward(h_llm)?;
        Ok((self.head_w.forward(&t)?, self.head_b.forward(&t)?))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, d_mw: &Matrix, d_mb: &Matrix) -> Result<Matrix> {
        let mut dt = self.head_w.backward(d_mw)?;
        dt.add_assign(&self.head_b.backward(d_mb)?)?;
        self.trunk.backward(&dt)
    }
}

impl HasParams for MetaNetwork {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.trunk.visit_params(f);
        self.head_w.visit_params(f);
        self.head_b.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.trunk.visit_params_mut(f);
        self.head_w.visit_params_mut(f);
        self.head_b.visit_params_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLayer {
    /// `d_{i-1} × d_i`
    pub w: Matrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

/// The `K` layers generated for one entity (a sample or a scenario).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStack {
    pub layers: Vec<GeneratedLayer>,
}

pub fn reshape_to_layers(h_mw: &[f64], h_mb: &[f64], dims: &LayerDims) -> Result<GeneratedStack> {
    if h_mw.len() != dims.weight_total() || h_mb.len() != dims.bias_total() {
        return Err(Error::Validation(format!(
            "meta output widths ({}, {}) do not match plan {:?}: expected Dim_mw={} and Dim_mb={}",
            h_mw.len(),
            h_mb.len(),
            dims.dims(),
            dims.weight_total(),
            dims.bias_total()
        )));
    }
    let layers = (0..dims.k())
        .map(|i| {
            let (din, dout) = (dims.dims()[i], dims.dims()[i + 1]);
            let wo = dims.weight_offset(i);
            let bo = dims.bias_offset(i);
            GeneratedLayer {
                w: Matrix::from_vec(din, dout, h_mw[wo..wo + din * dout].to_vec()).expect("sized"),
                b: h_mb[bo..bo + dout].to_vec(),
                act: dims.activation(i),
            }
        })
        .collect();
    Ok(GeneratedStack { layers })
}

impl GeneratedStack {
    /// Inverse of [`reshape_to_layers`].
    pub fn flatten(&self) -> (Vec<f64>, Vec<f64>) {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for l in &self.layers {
            w.extend_from_slice(l.w.as_slice());
            b.extend_from_slice(&l.b);
        }
        (w, b)
    }

    /// `h⁽ⁱ⁾ = σ(W⁽ⁱ⁾ᵀ h⁽ⁱ⁻¹⁾ + b⁽ⁱ⁾)` for a single input vector.
    pub fn apply(&self, h0: &[f64]) -> Result<Vec<f64>> {
        let mut h = h0.to_vec();
        for l in &self.layers {
            if h.len() != l.w.rows() {
                return Err(Error::Dimension {
                    op: "stack_forward",
                    left: (1, h.len()),
                    right: l.w.shape(),
                });
            }
            let mut next = l.b.clone();
            for (r, &x) in h.iter().enumerate() {
                for (o, &w) in next.iter_mut().zip(l.w.row(r)) {
                    *o += w * x;
                }
            }
            if l.act == Activation::Relu {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct StackCache {
    assign: Vec<usize>,
    mw: Matrix,
    /// `h⁽⁰⁾ … h⁽ᴷ⁾`, each `B × d_i`.
    acts: Vec<Matrix>,
}

/// Applies generated stacks to a batch. Row `b` uses the stack encoded in
/// row `assign[b]` of the meta-network output.
#[derive(Debug, Clone)]
pub struct StackRunner {
    dims: LayerDims,
    cache: Option<StackCache>,
}

impl StackRunner {
    pub fn new(dims: LayerDims) -> Self {
        Self { dims, cache: None }
    }

    pub fn dims(&self) -> &LayerDims {
        &self.dims
    }

    pub fn forward(&mut self, mw: &Matrix, mb: &Matrix, assign: &[usize], h0: &Matrix) -> Result<Matrix> {
        let dims = &self.dims;
        if mw.cols() != dims.weight_total() || mb.cols() != dims.bias_total() || mw.rows() != mb.rows() {
            return Err(Error::Validation(format!(
                "meta output shapes {:?}/{:?} do not match plan {:?} (Dim_mw={}, Dim_mb={})",
                mw.shape(),
                mb.shape(),
                dims.dims(),
                dims.weight_total(),
                dims.bias_total()
            )));
        }
        if h0.cols() != dims.input_width() || h0.rows() != assign.len() {
            return Err(Error::Dimension {
                op: "stack_forward",
                left: h0.shape(),
                right: (assign.len(), dims.input_width()),
            });
        }
        if let Some(&bad) = assign.iter().find(|&&a| a >= mw.rows()) {
            return Err(Error::Routing {
                id: bad,
                num_scenarios: mw.rows(),
            });
        }
        let mut acts = vec![h0.clone()];
        for i in 0..dims.k() {
            let (din, dout) = (dims.dims()[i], dims.dims()[i + 1]);
            let wo = dims.weight_offset(i);
            let bo = dims.bias_offset(i);
            let relu = dims.activation(i) == Activation::Relu;
            let prev = &acts[i];
            let mut out = Matrix::zeros(prev.rows(), dout);
            for (r, &a) in assign.iter().enumerate() {
                let w = &mw.row(a)[wo..wo + din * dout];
                let o = out.row_mut(r);
                o.copy_from_slice(&mb.row(a)[bo..bo + dout]);
                for (j, &x) in prev.row(r).iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    for (ov, &wv) in o.iter_mut().zip(&w[j * dout..(j + 1) * dout]) {
                        *ov += wv * x;
                    }
                }
                if relu {
                    o.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            acts.push(out);
        }
        let out = acts.last().expect("k >= 1").clone();
        self.cache = Some(StackCache {
            assign: assign.to_vec(),
            mw: mw.clone(),
            acts,
        });
        Ok(out)
    }

    /// Returns `(d h_mw, d h_mb, d h⁽⁰⁾)`; generated-weight gradients of rows
    /// sharing a stack are summed into that stack's row.
    pub fn backward(&mut self, d_out: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("generated stack: backward without forward".into()))?;
        let dims = &self.dims;
        d_out.same_shape(cache.acts.last().expect("k >= 1"), "stack_backward")?;
        let n = cache.mw.rows();
        let mut d_mw = Matrix::zeros(n, dims.weight_total());
        let mut d_mb = Matrix::zeros(n, dims.bias_total());
        let mut delta = d_out.clone();
        for i in (0..dims.k()).rev() {
            let (din, dout) = (dims.dims()[i], dims.dims()[i + 1]);
            let wo = dims.weight_offset(i);
            let bo = dims.bias_offset(i);
            if dims.activation(i) == Activation::Relu {
                for (g, &y) in delta.as_mut_slice().iter_mut().zip(cache.acts[i + 1].as_slice()) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let prev = &cache.acts[i];
            let mut d_prev = Matrix::zeros(prev.rows(), din);
            for (r, &a) in cache.assign.iter().enumerate() {
                let dz = delta.row(r);
                for (db, g) in d_mb.row_mut(a)[bo..bo + dout].iter_mut().zip(dz) {
                    *db += g;
                }
                let w = &cache.mw.row(a)[wo..wo + din * dout];
                let dw = &mut d_mw.row_mut(a)[wo..wo + din * dout];
                let dp = d_prev.row_mut(r);
                for (j, &x) in prev.row(r).iter().enumerate() {
                    let wrow = &w[j * dout..(j + 1) * dout];
                    let dwrow = &mut dw[j * dout..(j + 1) * dout];
                    let mut acc = 0.0;
                    for c in 0..dout {
                        dwrow[c] += x * dz[c];
                        acc += wrow[c] * dz[c];
                    }
                    dp[j] = acc;
                }
            }
            delta = d_prev;
        }
        Ok((d_mw, d_mb, delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{finite_diff_grad, max_rel_error, DEFAULT_STEP, REL_FLOOR};

    #[test]
    fn worked_size_example() {
        let d = LayerDims::new(vec![128, 64, 1]).unwrap();
        assert_eq!(d.weight_total(), 8256);
        assert_eq!(d.bias_total(), 65);
        let st = reshape_to_layers(&vec![0.0; 8256], &vec![0.0; 65], &d).unwrap();
        assert_eq!(st.layers[0].w.shape(), (128, 64));
        assert_eq!(st.layers[1].w.shape(), (64, 1));
    }

    #[test]
    fn small_plans() {
        let d = LayerDims::new(vec![1, 1]).unwrap();
        assert_eq!((d.k(), d.weight_total(), d.bias_total()), (1, 1, 1));
        let d = LayerDims::new(vec![3, 2, 1]).unwrap();
        assert_eq!((d.weight_total(), d.bias_total()), (8, 3));
        assert_eq!((d.weight_offset(1), d.bias_offset(1)), (6, 2));
    }

    #[test]
    fn width_mismatch_names_totals() {
        let d = LayerDims::new(vec![3, 2, 1]).unwrap();
        let msg = reshape_to_layers(&[0.0; 7], &[0.0; 3], &d).unwrap_err().to_string();
        assert!(msg.contains("Dim_mw=8") && msg.contains("Dim_mb=3"), "{msg}");
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let d = LayerDims::new(vec![3, 3]).unwrap();
        let eye = Matrix::identity(3);
        let st = reshape_to_layers(eye.as_slice(), &[0.0; 3], &d).unwrap();
        assert_eq!(st.apply(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_weights_emit_activated_bias() {
        let d = LayerDims::new(vec![2, 2, 2]).unwrap();
        let st = reshape_to_layers(&[0.0; 8], &[-1.0, 2.0, 0.5, -0.25], &d).unwrap();
        // layer 1 relu(b1) = [0, 2] feeds zero weights; output is b2 (identity).
        assert_eq!(st.apply(&[3.0, 4.0]).unwrap(), vec![0.5, -0.25]);
    }

    #[test]
    fn runner_matches_per_entity_apply() {
        let dims = LayerDims::new(vec![3, 4, 2]).unwrap();
        let mut rng = DetRng::new(4);
        let mw = Matrix::from_vec(2, 20, (0..40).map(|_| rng.normal()).collect()).unwrap();
        let mb = Matrix::from_vec(2, 6, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let h0 = Matrix::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
        let assign = [1, 0, 1];
        let out = StackRunner::new(dims.clone()).forward(&mw, &mb, &assign, &h0).unwrap();
        for (r, &a) in assign.iter().enumerate() {
            let st = reshape_to_layers(mw.row(a), mb.row(a), &dims).unwrap();
            let want = st.apply(h0.row(r)).unwrap();
            for (x, y) in out.row(r).iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn runner_backward_matches_finite_differences() {
        let dims = LayerDims::new(vec![3, 4, 2]).unwrap();
        let mut rng = DetRng::new(8);
        let mw = Matrix::from_vec(2, 20, (0..40).map(|_| rng.normal()).collect()).unwrap();
        let mb = Matrix::from_vec(2, 6, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let h0 = Matrix::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
        let coef = Matrix::from_vec(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let assign = [1, 0, 1];
        let objective = |mw: &Matrix, mb: &Matrix, h0: &Matrix| -> f64 {
            let out = StackRunner::new(dims.clone()).forward(mw, mb, &assign, h0).unwrap();
            out.hadamard(&coef).unwrap().as_slice().iter().sum()
        };
        let mut runner = StackRunner::new(dims.clone());
        runner.forward(&mw, &mb, &assign, &h0).unwrap();
        let (d_mw, d_mb, d_h0) = runner.backward(&coef).unwrap();

        let mut p = Parameter::new("mw", mw.clone());
        let num = finite_diff_grad(&mut p, DEFAULT_STEP, |p| objective(&p.value, &mb, &h0));
        assert!(max_rel_error(&d_mw, &num, REL_FLOOR) < 1e-4);
        let mut p = Parameter::new("mb", mb.clone());
        let num = finite_diff_grad(&mut p, DEFAULT_STEP, |p| objective(&mw, &p.value, &h0));
        assert!(max_rel_error(&d_mb, &num, REL_FLOOR) < 1e-4);
        let mut p = Parameter::new("h0", h0.clone());
        let num = finite_diff_grad(&mut p, DEFAULT_STEP, |p| objective(&mw, &mb, &p.value));
        assert!(max_rel_error(&d_h0, &num, REL_FLOOR) < 1e-4);
    }

    #[test]
    fn meta_network_zero_input_zero_biases() {
        let dims = LayerDims::new(vec![3, 2, 1]).unwrap();
        let mut net = MetaNetwork::new("m", 4, 5, dims, &mut DetRng::new(2));
        net.head_w.b.value.fill(0.0);
        let (mw, mb) = net.forward(&Matrix::zeros(2, 4)).unwrap();
        assert!(mw.as_slice().iter().chain(mb.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn meta_network_identical_rows() {
        let dims = LayerDims::new(vec![3, 2, 1]).unwrap();
        let mut net = MetaNetwork::new("m", 4, 5, dims, &mut DetRng::new(2));
        let x = Matrix::from_rows(&[vec![0.1, -0.3, 0.7, 1.0], vec![0.1, -0.3, 0.7, 1.0]]);
        let (mw, mb) = net.forward(&x).unwrap();
        assert_eq!(mw.row(0), mw.row(1));
        assert_eq!(mb.row(0), mb.row(1));
    }
}
