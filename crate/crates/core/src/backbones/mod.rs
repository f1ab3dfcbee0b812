//! Multi-scenario backbones. Each maps a `B × D_e` input plus the per-row
//! scenario id to one logit per row.
//!
//! A backbone is split into a body (shared computation producing a
//! representation) and a head (the scenario-specific part producing the
//! logit). The dynamic-network baseline swaps the head for a generated tower.

mod embedding;
mod moe;
mod star;

use serde::{Deserialize, Serialize};

pub use embedding::EmbeddingLayer;
pub use moe::ExpertMix;
pub use star::StarLayer;

use crate::error::{Error, Result};
use crate::gradcore::{Activation, DetRng, HasParams, Matrix, Mlp, Parameter};
use crate::metafusion::{LayerDims, MetaNetwork, StackRunner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SharedBottom,
    Omoe,
    Mmoe,
    #[serde(alias = "ple_cgc")]
    Ple,
    Star,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::SharedBottom,
        BackboneKind::Omoe,
        BackboneKind::Mmoe,
        BackboneKind::Ple,
        BackboneKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::SharedBottom => "shared_bottom",
            BackboneKind::Omoe => "omoe",
            BackboneKind::Mmoe => "mmoe",
            BackboneKind::Ple => "ple",
            BackboneKind::Star => "star",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "shared_bottom" => Ok(Self::SharedBottom),
            "omoe" => Ok(Self::Omoe),
            "mmoe" => Ok(Self::Mmoe),
            "ple" | "ple_cgc" => Ok(Self::Ple),
            "star" => Ok(Self::Star),
            other => Err(format!(
                "unknown backbone `{other}` (expected shared_bottom, omoe, mmoe, ple, star)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Hidden widths of towers (and of the STAR network).
    pub tower_dims: Vec<usize>,
    pub num_experts: usize,
    pub ple_shared_experts: usize,
    pub ple_specific_experts: usize,
    pub aux_hidden: usize,
    /// Hidden width of the dynamic-network hypernetwork trunk.
    pub dynamic_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            tower_dims: vec![256, 128, 64],
            num_experts: 4,
            ple_shared_experts: 2,
            ple_specific_experts: 1,
            aux_hidden: 8,
            dynamic_hidden: 8,
        }
    }
}

/// Row indices of each scenario, in batch order.
pub fn route(domains: &[usize], num_scenarios: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); num_scenarios];
    for (r, &d) in domains.iter().enumerate() {
        groups
            .get_mut(d)
            .ok_or(Error::Routing { id: d, num_scenarios })?
            .push(r);
    }
    Ok(groups)
}

/// One MLP per scenario, each applied to that scenario's rows.
#[derive(Debug, Clone)]
pub struct Towers {
    pub mlps: Vec<Mlp>,
    groups: Vec<Vec<usize>>,
    rows: usize,
}

impl Towers {
    pub fn new(name: &str, dims: &[usize], num_scenarios: usize, rng: &mut DetRng) -> Self {
        let mlps = (0..num_scenarios)
            .map(|d| Mlp::new(&format!("{name}.{d}"), dims, Activation::Identity, rng))
            .collect();
        Self {
            mlps,
            groups: Vec::new(),
            rows: 0,
        }
    }

    pub fn forward(&mut self, x: &Matrix, groups: &[Vec<usize>]) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.mlps[0].d_out());
        for (mlp, rows) in self.mlps.iter_mut().zip(groups) {
            let y = mlp.forward(&x.gather_rows(rows))?;
            out.scatter_rows(rows, &y);
        }
        self.groups = groups.to_vec();
        self.rows = x.rows();
        Ok(out)
    }

    pub fn backward(&mut self, d_out: &Matrix, d_in: usize) -> Result<Matrix> {
        let mut dx = Matrix::zeros(self.rows, d_in);
        for (mlp, rows) in self.mlps.iter_mut().zip(&self.groups) {
            let g = mlp.backward(&d_out.gather_rows(rows))?;
            dx.scatter_rows(rows, &g);
        }
        Ok(dx)
    }
}

impl HasParams for Towers {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.mlps.iter().for_each(|m| m.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.mlps.iter_mut().for_each(|m| m.visit_params_mut(f));
    }
}

/// Tower generated per row from the scenario embedding (dynamic-network
/// baseline).
#[derive(Debug, Clone)]
pub struct DynamicTower {
    pub meta: MetaNetwork,
    runner: StackRunner,
}

impl DynamicTower {
    pub fn new(rep: usize, hidden: usize, emb_dim: usize, meta_hidden: usize, rng: &mut DetRng) -> Result<Self> {
        let dims = LayerDims::new(vec![rep, hidden, 1])?;
        Ok(Self {
            meta: MetaNetwork::new("dynnet", emb_dim, meta_hidden, dims.clone(), rng),
            runner: StackRunner::new(dims),
        })
    }

    pub fn forward(&mut self, rep: &Matrix, dom_emb: &Matrix) -> Result<Matrix> {
        let (mw, mb) = self.meta.forward(dom_emb)?;
        let assign: Vec<usize> = (0..rep.rows()).collect();
        self.runner.forward(&mw, &mb, &assign, rep)
    }

    /// Returns `(d rep, d dom_emb)`.
    pub fn backward(&mut self, d_out: &Matrix) -> Result<(Matrix, Matrix)> {
        let (d_mw, d_mb, d_rep) = self.runner.backward(d_out)?;
        let d_dom = self.meta.backward(&d_mw, &d_mb)?;
        Ok((d_rep, d_dom))
    }
}

#[derive(Debug, Clone)]
enum Body {
    Identity,
    Experts(Box<ExpertMix>),
    Star(Vec<StarLayer>),
}

#[derive(Debug, Clone)]
enum Head {
    Towers(Towers),
    Star(Box<StarLayer>),
    Dynamic(Box<DynamicTower>),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub kind: BackboneKind,
    num_scenarios: usize,
    input_width: usize,
    rep_width: usize,
    emb_dim: usize,
    body: Body,
    head: Head,
    aux: Option<Mlp>,
}

impl Backbone {
    /// `dynamic_head` replaces the scenario towers with a generated tower.
    pub fn new(
        kind: BackboneKind,
        cfg: &BackboneConfig,
        input_width: usize,
        emb_dim: usize,
        num_scenarios: usize,
        dynamic_head: bool,
        rng: &mut DetRng,
    ) -> Result<Self> {
        if cfg.tower_dims.is_empty() || cfg.tower_dims.contains(&0) {
            return Err(Error::Config(format!("invalid tower_dims {:?}", cfg.tower_dims)));
        }
        let last_hidden = *cfg.tower_dims.last().expect("non-empty");
        let tower_dims = |rep: usize, hidden: &[usize]| -> Vec<usize> {
            let mut d = vec![rep];
            d.extend_from_slice(hidden);
            d.push(1);
            d
        };
        let (body, rep_width, default_head) = match kind {
            BackboneKind::SharedBottom => {
                let towers = Towers::new("tower", &tower_dims(input_width, &cfg.tower_dims), num_scenarios, rng);
                (Body::Identity, input_width, Some(Head::Towers(towers)))
            }
            BackboneKind::Omoe | BackboneKind::Mmoe | BackboneKind::Ple => {
                let expert_width = cfg.tower_dims[0];
                let mix = match kind {
                    BackboneKind::Omoe => ExpertMix::omoe(input_width, expert_width, cfg.num_experts, num_scenarios, rng),
                    BackboneKind::Mmoe => ExpertMix::mmoe(input_width, expert_width, cfg.num_experts, num_scenarios, rng),
                    _ => ExpertMix::ple(
                        input_width,
                        expert_width,
                        cfg.ple_shared_experts,
                        cfg.ple_specific_experts,
                        num_scenarios,
                        rng,
                    ),
                }?;
                let towers = Towers::new("tower", &tower_dims(expert_width, &cfg.tower_dims[1..]), num_scenarios, rng);
                (Body::Experts(Box::new(mix)), expert_width, Some(Head::Towers(towers)))
            }
            BackboneKind::Star => {
                let mut widths = vec![input_width];
                widths.extend_from_slice(&cfg.tower_dims);
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| StarLayer::new(&format!("star.{i}"), w[0], w[1], Activation::Relu, num_scenarios, rng))
                    .collect();
                let head = StarLayer::new("star.out", last_hidden, 1, Activation::Identity, num_scenarios, rng);
                (Body::Star(layers), last_hidden, Some(Head::Star(Box::new(head))))
            }
        };
        let head = if dynamic_head {
            Head::Dynamic(Box::new(DynamicTower::new(rep_width, last_hidden, emb_dim, cfg.dynamic_hidden, rng)?))
        } else {
            default_head.expect("every kind has a head")
        };
        let aux = (kind == BackboneKind::Star)
            .then(|| Mlp::new("star.aux", &[emb_dim, cfg.aux_hidden.max(1), 1], Activation::Identity, rng));
        Ok(Self {
            kind,
            num_scenarios,
            input_width,
            rep_width,
            emb_dim,
            body,
            head,
            aux,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn num_scenarios(&self) -> usize {
        self.num_scenarios
    }

    pub fn star_aux_mut(&mut self) -> Option<&mut Mlp> {
        self.aux.as_mut()
    }

    pub fn star_layers_mut(&mut self) -> Vec<&mut StarLayer> {
        let mut out: Vec<&mut StarLayer> = Vec::new();
        if let Body::Star(layers) = &mut self.body {
            out.extend(layers.iter_mut());
        }
        if let Head::Star(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn expert_mix_mut(&mut self) -> Option<&mut ExpertMix> {
        match &mut self.body {
            Body::Experts(m) => Some(m),
            _ => None,
        }
    }

    /// Logits `B × 1`. `dom_emb` is the `B × Dim` scenario-field embedding,
    /// consumed by the STAR auxiliary network and the dynamic tower.
    pub fn forward(&mut self, x: &Matrix, domains: &[usize], dom_emb: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_width || x.rows() != domains.len() {
            return Err(Error::Dimension {
                op: "backbone_forward",
                left: x.shape(),
                right: (domains.len(), self.input_width),
            });
        }
        let groups = route(domains, self.num_scenarios)?;
        let rep = match &mut self.body {
            Body::Identity => x.clone(),
            Body::Experts(mix) => mix.forward(x, &groups)?,
            Body::Star(layers) => {
                let mut h = x.clone();
                for l in layers {
                    h = l.forward(&h, &groups)?;
                }
                h
            }
        };
        let mut logit = match &mut self.head {
            Head::Towers(t) => t.forward(&rep, &groups)?,
            Head::Star(l) => l.forward(&rep, &groups)?,
            Head::Dynamic(d) => d.forward(&rep, dom_emb)?,
        };
        if let Some(aux) = &mut self.aux {
            logit.add_assign(&aux.forward(dom_emb)?)?;
        }
        Ok(logit)
    }

    /// Returns `(d x, d dom_emb)`.
    pub fn backward(&mut self, d_logit: &Matrix) -> Result<(Matrix, Matrix)> {
        let rows = d_logit.rows();
        let mut d_dom = Matrix::zeros(rows, self.emb_dim);
        let d_rep = match &mut self.head {
            Head::Towers(t) => t.backward(d_logit, self.rep_width)?,
            Head::Star(l) => l.backward(d_logit)?,
            Head::Dynamic(d) => {
                let (d_rep, dd) = d.backward(d_logit)?;
                d_dom.add_assign(&dd)?;
                d_rep
            }
        };
        if let Some(aux) = &mut self.aux {
            d_dom.add_assign(&aux.backward(d_logit)?)?;
        }
        let dx = match &mut self.body {
            Body::Identity => d_rep,
            Body::Experts(mix) => mix.backward(&d_rep)?,
            Body::Star(layers) => {
                let mut g = d_rep;
                for l in layers.iter_mut().rev() {
                    g = l.backward(&g)?;
                }
                g
            }
        };
        Ok((dx, d_dom))
    }
}

impl HasParams for Backbone {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        match &self.body {
            Body::Identity => {}
            Body::Experts(m) => m.visit_params(f),
            Body::Star(ls) => ls.iter().for_each(|l| l.visit_params(f)),
        }
        match &self.head {
            Head::Towers(t) => t.visit_params(f),
            Head::Star(l) => l.visit_params(f),
            Head::Dynamic(d) => d.meta.visit_params(f),
        }
        if let Some(a) = &self.aux {
            a.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match &mut self.body {
            Body::Identity => {}
            Body::Experts(m) => m.visit_params_mut(f),
            Body::Star(ls) => ls.iter_mut().for_each(|l| l.visit_params_mut(f)),
        }
        match &mut self.head {
            Head::Towers(t) => t.visit_params_mut(f),
            Head::Star(l) => l.visit_params_mut(f),
            Head::Dynamic(d) => d.meta.visit_params_mut(f),
        }
        if let Some(a) = &mut self.aux {
            a.visit_params_mut(f);
        }
    }
}
