//! Gated expert mixtures covering OMoE (one gate), MMoE (one gate per
//! scenario) and single-level CGC/PLE (shared plus scenario-owned experts).
//! Every gate reads the raw backbone input.

use crate::error::{Error, Result};
use crate::gradcore::{Activation, Dense, DetRng, HasParams, Matrix, Parameter};

#[derive(Debug, Clone)]
struct MixCache {
    rows: usize,
    expert_rows: Vec<Vec<usize>>,
    /// Per expert, `B × e` with zeros on rows it did not see.
    expert_out: Vec<Matrix>,
    gate_rows: Vec<Vec<usize>>,
    gate_out: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ExpertMix {
    pub experts: Vec<Dense>,
    /// `None` for shared experts, `Some(d)` for experts owned by scenario `d`.
    owner: Vec<Option<usize>>,
    pub gates: Vec<Dense>,
    /// Scenario → gate index.
    gate_of: Vec<usize>,
    /// Gate → expert indices it mixes, in gate-output order.
    candidates: Vec<Vec<usize>>,
    input_width: usize,
    expert_width: usize,
    cache: Option<MixCache>,
}

impl ExpertMix {
    fn build(
        input_width: usize,
        expert_width: usize,
        owner: Vec<Option<usize>>,
        gate_of: Vec<usize>,
        candidates: Vec<Vec<usize>>,
        rng: &mut DetRng,
    ) -> Result<Self> {
        if owner.is_empty() || candidates.iter().any(Vec::is_empty) {
            return Err(Error::Config("expert mixture needs at least one expert per gate".into()));
        }
        let experts = (0..owner.len())
            .map(|i| Dense::new(&format!("expert.{i}"), input_width, expert_width, Activation::Relu, rng))
            .collect();
        let gates = candidates
            .iter()
            .enumerate()
            .map(|(g, c)| Dense::new(&format!("gate.{g}"), input_width, c.len(), Activation::SoftmaxRows, rng))
            .collect();
        Ok(Self {
            experts,
            owner,
            gates,
            gate_of,
            candidates,
            input_width,
            expert_width,
            cache: None,
        })
    }

    pub fn omoe(input: usize, width: usize, n: usize, scenarios: usize, rng: &mut DetRng) -> Result<Self> {
        Self::build(input, width, vec![None; n], vec![0; scenarios], vec![(0..n).collect()], rng)
    }

    pub fn mmoe(input: usize, width: usize, n: usize, scenarios: usize, rng: &mut DetRng) -> Result<Self> {
        let cand = vec![(0..n).collect(); scenarios];
        Self::build(input, width, vec![None; n], (0..scenarios).collect(), cand, rng)
    }

    pub fn ple(
        input: usize,
        width: usize,
        shared: usize,
        specific: usize,
        scenarios: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        let mut owner = vec![None; shared];
        let mut cand = Vec::with_capacity(scenarios);
        for d in 0..scenarios {
            let mut c: Vec<usize> = (0..shared).collect();
            for _ in 0..specific {
                c.push(owner.len());
                owner.push(Some(d));
            }
            cand.push(c);
        }
        Self::build(input, width, owner, (0..scenarios).collect(), cand, rng)
    }

    pub fn expert_width(&self) -> usize {
        self.expert_width
    }

    pub fn forward(&mut self, x: &Matrix, groups: &[Vec<usize>]) -> Result<Matrix> {
        let b = x.rows();
        let all: Vec<usize> = (0..b).collect();
        let mut expert_rows = Vec::with_capacity(self.experts.len());
        let mut expert_out = Vec::with_capacity(self.experts.len());
        for (e, owner) in self.experts.iter_mut().zip(&self.owner) {
            let rows = match owner {
                None => all.clone(),
                Some(d) => groups[*d].clone(),
            };
            let y = e.forward(&x.gather_rows(&rows))?;
            let mut full = Matrix::zeros(b, self.expert_width);
            full.scatter_rows(&rows, &y);
            expert_rows.push(rows);
            expert_out.push(full);
        }
        let mut gate_rows = vec![Vec::new(); self.gates.len()];
        for (d, rows) in groups.iter().enumerate() {
            gate_rows[self.gate_of[d]].extend_from_slice(rows);
        }
        gate_rows.iter_mut().for_each(|r| r.sort_unstable());
        let mut mix = Matrix::zeros(b, self.expert_width);
        let mut gate_out = Vec::with_capacity(self.gates.len());
        for ((gate, rows), cand) in self.gates.iter_mut().zip(&gate_rows).zip(&self.candidates) {
            let g = gate.forward(&x.gather_rows(rows))?;
            for (i, &r) in rows.iter().enumerate() {
                let dst = mix.row_mut(r);
                for (k, &e) in cand.iter().enumerate() {
                    let w = g.get(i, k);
                    for (o, v) in dst.iter_mut().zip(expert_out[e].row(r)) {
                        *o += w * v;
                    }
                }
            }
            gate_out.push(g);
        }
        self.cache = Some(MixCache {
            rows: b,
            expert_rows,
            expert_out,
            gate_rows,
            gate_out,
        });
        Ok(mix)
    }

    pub fn backward(&mut self, d_mix: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("expert mix: backward without forward".into()))?;
        let mut dx = Matrix::zeros(cache.rows, self.input_width);
        let mut d_expert: Vec<Matrix> = (0..self.experts.len())
            .map(|_| Matrix::zeros(cache.rows, self.expert_width))
            .collect();
        for (gi, gate) in self.gates.iter_mut().enumerate() {
            let rows = &cache.gate_rows[gi];
            let cand = &self.candidates[gi];
            let g = &cache.gate_out[gi];
            let mut dg = Matrix::zeros(rows.len(), cand.len());
            for (i, &r) in rows.iter().enumerate() {
                let up = d_mix.row(r);
                for (k, &e) in cand.iter().enumerate() {
                    let out = cache.expert_out[e].row(r);
                    dg.set(i, k, out.iter().zip(up).map(|(a, b)| a * b).sum());
                    let w = g.get(i, k);
                    for (d, u) in d_expert[e].row_mut(r).iter_mut().zip(up) {
                        *d += w * u;
                    }
                }
            }
            let gx = gate.backward(&dg)?;
            for (i, &r) in rows.iter().enumerate() {
                for (d, v) in dx.row_mut(r).iter_mut().zip(gx.row(i)) {
                    *d += v;
                }
            }
        }
        for (ei, expert) in self.experts.iter_mut().enumerate() {
            let rows = &cache.expert_rows[ei];
            let ex = expert.backward(&d_expert[ei].gather_rows(rows))?;
            for (i, &r) in rows.iter().enumerate() {
                for (d, v) in dx.row_mut(r).iter_mut().zip(ex.row(i)) {
                    *d += v;
                }
            }
        }
        Ok(dx)
    }

    /// Gate weights from the most recent forward pass, one row per batch row.
    pub fn last_gate_weights(&self) -> Option<Matrix> {
        let cache = self.cache.as_ref()?;
        let width = self.candidates.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Matrix::zeros(cache.rows, width);
        for (gi, rows) in cache.gate_rows.iter().enumerate() {
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(r)[..self.candidates[gi].len()].copy_from_slice(cache.gate_out[gi].row(i));
            }
        }
        Some(out)
    }
}

impl HasParams for ExpertMix {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.experts.iter().for_each(|e| e.visit_params(f));
        self.gates.iter().for_each(|g| g.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.experts.iter_mut().for_each(|e| e.visit_params_mut(f));
        self.gates.iter_mut().for_each(|g| g.visit_params_mut(f));
    }
}
