//! The fused model: embedding, optional user- and scenario-level generated
//! stacks, optional EPNet gate, a backbone, and the `α` blend of the parallel
//! logit with the backbone logit.

use serde::{Deserialize, Serialize};

use super::hyper::{LayerDims, MetaNetwork, StackRunner};
use crate::backbones::{Backbone, BackboneConfig, BackboneKind, EmbeddingLayer};
use crate::data::{Batch, FeatureSchema};
use crate::error::{Error, Result};
use crate::gradcore::{Activation, DetRng, HasParams, Matrix, Mlp, Parameter};
use crate::knowledge::{Scope, VectorStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Full,
    UserBottomOnly,
    UserParallelOnly,
    DomainBottomOnly,
    DomainParallelOnly,
    BackboneOnly,
}

/// Where a generated stack sits relative to the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Dimension-preserving transform of the backbone input.
    Bottom,
    /// Logit-producing branch blended with the backbone logit.
    Parallel,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::Full,
        Architecture::UserBottomOnly,
        Architecture::UserParallelOnly,
        Architecture::DomainBottomOnly,
        Architecture::DomainParallelOnly,
        Architecture::BackboneOnly,
    ];

    /// The four single-stack ablation variants.
    pub const ABLATIONS: [Architecture; 4] = [
        Architecture::UserBottomOnly,
        Architecture::UserParallelOnly,
        Architecture::DomainBottomOnly,
        Architecture::DomainParallelOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Full => "full",
            Architecture::UserBottomOnly => "user_bottom_only",
            Architecture::UserParallelOnly => "user_parallel_only",
            Architecture::DomainBottomOnly => "domain_bottom_only",
            Architecture::DomainParallelOnly => "domain_parallel_only",
            Architecture::BackboneOnly => "backbone_only",
        }
    }

    pub fn user_role(self) -> Option<Role> {
        match self {
            Architecture::Full | Architecture::UserBottomOnly => Some(Role::Bottom),
            Architecture::UserParallelOnly => Some(Role::Parallel),
            _ => None,
        }
    }

    pub fn scenario_role(self) -> Option<Role> {
        match self {
            Architecture::Full | Architecture::DomainParallelOnly => Some(Role::Parallel),
            Architecture::DomainBottomOnly => Some(Role::Bottom),
            _ => None,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Architecture::ALL.iter().map(|a| a.name()).collect();
                format!("unknown architecture `{s}` (expected {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    Epnet,
    Dynnet,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::None, Baseline::Epnet, Baseline::Dynnet];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::None => "none",
            Baseline::Epnet => "epnet",
            Baseline::Dynnet => "dynnet",
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown baseline `{s}` (expected none, epnet, dynnet)"))
    }
}

/// Input of the scenario-level parallel stack in the `full` architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioInput {
    /// Output of the user-level bottom stack.
    #[default]
    UserStack,
    /// The raw embedding.
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub architecture: Architecture,
    pub baseline: Baseline,
    pub backbone_config: BackboneConfig,
    /// Number of generated layers `K` in each stack.
    pub k_layers: usize,
    /// Interior width of dimension-preserving stacks; `None` means `D_e / 2`.
    pub bottom_mid: Option<usize>,
    /// Adds the input of each bottom stack to its output.
    pub bottom_residual: bool,
    /// First hidden width of logit-producing stacks.
    pub parallel_hidden: usize,
    /// Trunk width of both meta networks.
    pub meta_hidden: usize,
    /// Initial scale of the knowledge-dependent part of generated layers
    /// relative to their shared part.
    pub meta_dynamic_scale: f64,
    pub epnet_hidden: usize,
    pub scenario_input: ScenarioInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Star,
            architecture: Architecture::Full,
            baseline: Baseline::None,
            backbone_config: BackboneConfig::default(),
            k_layers: 2,
            bottom_mid: None,
            bottom_residual: true,
            parallel_hidden: 64,
            meta_hidden: 32,
            meta_dynamic_scale: 0.0,
            epnet_hidden: 16,
            scenario_input: ScenarioInput::UserStack,
        }
    }
}

impl ModelConfig {
    pub fn plan(&self, role: Role, d_e: usize) -> Result<LayerDims> {
        match role {
            Role::Bottom => LayerDims::preserving(d_e, self.k_layers, self.bottom_mid.unwrap_or(d_e / 2)),
            Role::Parallel => LayerDims::to_logit(d_e, self.k_layers, self.parallel_hidden),
        }
    }
}

/// `α·h_s + (1−α)·h`; the prediction is its sigmoid.
pub fn blend_logit(alpha: f64, h_s: f64, h: f64) -> f64 {
    alpha * h_s + (1.0 - alpha) * h
}

/// Knowledge vectors laid out for batched lookup: row `u` of `users` is user
/// `u`'s vector, row `d` of `scenarios` scenario `d`'s.
#[derive(Debug, Clone)]
pub struct Knowledge {
    dim: usize,
    users: Option<Matrix>,
    scenarios: Option<Matrix>,
}

impl Knowledge {
    /// Resolves the vectors `model` consumes, applying the store's fallback
    /// policy to missing users.
    pub fn for_model(store: &VectorStore, model: &FusionModel) -> Result<Self> {
        if store.dim() != model.knowledge_dim {
            return Err(Error::Config(format!(
                "model expects knowledge vectors with H={} but the store has H={}",
                model.knowledge_dim,
                store.dim()
            )));
        }
        let users = model
            .user
            .is_some()
            .then(|| store.rows(Scope::User, &(0..model.num_users).collect::<Vec<_>>()))
            .transpose()?;
        let scenarios = model
            .scenario
            .is_some()
            .then(|| store.rows(Scope::Scenario, &(0..model.num_scenarios).collect::<Vec<_>>()))
            .transpose()?;
        Ok(Self {
            dim: store.dim(),
            users,
            scenarios,
        })
    }

    /// No vectors at all, for architectures that consume none.
    pub fn empty(model: &FusionModel) -> Result<Self> {
        if model.user.is_some() || model.scenario.is_some() {
            return Err(Error::Config(format!(
                "architecture {} needs knowledge vectors",
                model.architecture().name()
            )));
        }
        Ok(Self {
            dim: model.knowledge_dim,
            users: None,
            scenarios: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn users(&self) -> Result<&Matrix> {
        self.users
            .as_ref()
            .ok_or_else(|| Error::State("user knowledge vectors were not loaded".into()))
    }

    fn scenarios(&self) -> Result<&Matrix> {
        self.scenarios
            .as_ref()
            .ok_or_else(|| Error::State("scenario knowledge vectors were not loaded".into()))
    }
}

/// A meta network plus the runner applying the stacks it generates.
#[derive(Debug, Clone)]
pub struct MetaBranch {
    pub meta: MetaNetwork,
    runner: StackRunner,
    pub role: Role,
}

impl MetaBranch {
    fn new(name: &str, h: usize, cfg: &ModelConfig, dims: LayerDims, role: Role, rng: &mut DetRng) -> Self {
        let mut meta = MetaNetwork::new(name, h, cfg.meta_hidden, dims.clone(), rng);
        meta.scale_dynamic(cfg.meta_dynamic_scale);
        if role == Role::Bottom && cfg.bottom_residual {
            meta.zero_last_shared();
        }
        Self {
            meta,
            runner: StackRunner::new(dims),
            role,
        }
    }

    pub fn dims(&self) -> &LayerDims {
        self.runner.dims()
    }

    fn forward(&mut self, know: &Matrix, assign: &[usize], input: &Matrix) -> Result<Matrix> {
        let (mw, mb) = self.meta.forward(know)?;
        self.runner.forward(&mw, &mb, assign, input)
    }

    /// Gradient w.r.t. the stack input; knowledge vectors receive none.
    fn backward(&mut self, d_out: &Matrix) -> Result<Matrix> {
        let (d_mw, d_mb, d_in) = self.runner.backward(d_out)?;
        self.meta.backward(&d_mw, &d_mb)?;
        Ok(d_in)
    }
}

#[derive(Debug, Clone)]
struct FusionCache {
    h0: Matrix,
    /// Backbone input before the EPNet gate.
    pre_gate: Matrix,
    /// EPNet sigmoid output `s`, with gate `g = 2s`.
    gate_s: Option<Matrix>,
    parallel_from_bottom: bool,
    parallel: Option<Matrix>,
    backbone: Matrix,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub emb: EmbeddingLayer,
    pub user: Option<MetaBranch>,
    pub scenario: Option<MetaBranch>,
    pub epnet: Option<Mlp>,
    pub backbone: Backbone,
    /// Scalar blend weight; trainable only when a parallel stack exists.
    pub alpha: Parameter,
    knowledge_dim: usize,
    num_users: usize,
    num_scenarios: usize,
    cache: Option<FusionCache>,
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

impl FusionModel {
    pub fn new(schema: &FeatureSchema, knowledge_dim: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        if knowledge_dim == 0 {
            return Err(Error::Config("knowledge dimension H must be >= 1".into()));
        }
        if config.k_layers == 0 {
            return Err(Error::Config("k_layers must be >= 1".into()));
        }
        let root = DetRng::new(seed);
        let emb = EmbeddingLayer::new(schema, &mut root.fork(1));
        let d_e = emb.width();
        let dim = emb.dim();
        let arch = config.architecture;
        let user = arch
            .user_role()
            .map(|role| -> Result<_> {
                let dims = config.plan(role, d_e)?;
                Ok(MetaBranch::new("user_meta", knowledge_dim, &config, dims, role, &mut root.fork(2)))
            })
            .transpose()?;
        let scenario = arch
            .scenario_role()
            .map(|role| -> Result<_> {
                let dims = config.plan(role, d_e)?;
                Ok(MetaBranch::new("scenario_meta", knowledge_dim, &config, dims, role, &mut root.fork(3)))
            })
            .transpose()?;
        let epnet = (config.baseline == Baseline::Epnet)
            .then(|| Mlp::new("epnet", &[dim, config.epnet_hidden, d_e], Activation::Sigmoid, &mut root.fork(4)));
        let backbone = Backbone::new(
            config.backbone,
            &config.backbone_config,
            d_e,
            dim,
            schema.num_scenarios,
            config.baseline == Baseline::Dynnet,
            &mut root.fork(5),
        )?;
        Ok(Self {
            config,
            emb,
            user,
            scenario,
            epnet,
            backbone,
            alpha: Parameter::new("alpha", Matrix::filled(1, 1, 0.5)),
            knowledge_dim,
            num_users: schema.num_users(),
            num_scenarios: schema.num_scenarios,
            cache: None,
            corrupt_backward: false,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn knowledge_dim(&self) -> usize {
        self.knowledge_dim
    }

    fn has_parallel(&self) -> bool {
        [&self.user, &self.scenario]
            .iter()
            .any(|b| b.as_ref().is_some_and(|b| b.role == Role::Parallel))
    }

    /// The same parameters rewired as another architecture. Fails when a
    /// branch the target needs is missing or has a different layer plan.
    pub fn with_architecture(&self, arch: Architecture) -> Result<Self> {
        let mut out = self.clone();
        out.config.architecture = arch;
        out.cache = None;
        let d_e = self.emb.width();
        for (slot, role, level) in [
            (&mut out.user, arch.user_role(), "user"),
            (&mut out.scenario, arch.scenario_role(), "scenario"),
        ] {
            match role {
                None => *slot = None,
                Some(role) => {
                    let want = self.config.plan(role, d_e)?;
                    let branch = slot.as_mut().ok_or_else(|| {
                        Error::Config(format!("{} needs a {level}-level meta network", arch.name()))
                    })?;
                    if branch.dims() != &want {
                        return Err(Error::Config(format!(
                            "{} needs a {level}-level plan {:?}, model has {:?}",
                            arch.name(),
                            want.dims(),
                            branch.dims().dims()
                        )));
                    }
                    branch.role = role;
                }
            }
        }
        Ok(out)
    }

    /// Fused logits `z`, one per batch row; predictions are `σ(z)`.
    pub fn forward(&mut self, batch: &Batch, know: &Knowledge) -> Result<Matrix> {
        if know.dim() != self.knowledge_dim {
            return Err(Error::Config(format!(
                "model expects H={} but knowledge has H={}",
                self.knowledge_dim,
                know.dim()
            )));
        }
        let domains = batch.domains();
        let h0 = self.emb.forward(batch)?;
        let dom_emb = h0.slice_cols(0, self.emb.dim());
        let rows: Vec<usize> = (0..h0.rows()).collect();
        let user_know = match &self.user {
            Some(_) => Some(know.users()?.gather_rows(&batch.users())),
            None => None,
        };
        let mut x = h0.clone();
        let residual = self.config.bottom_residual;
        let skip = |mut out: Matrix, input: &Matrix| -> Result<Matrix> {
            if residual {
                out.add_assign(input)?;
            }
            Ok(out)
        };
        if let Some(b) = self.user.as_mut().filter(|b| b.role == Role::Bottom) {
            x = skip(b.forward(user_know.as_ref().expect("loaded"), &rows, &x)?, &x)?;
        }
        if let Some(b) = self.scenario.as_mut().filter(|b| b.role == Role::Bottom) {
            x = skip(b.forward(know.scenarios()?, &domains, &x)?, &x)?;
        }
        let parallel_from_bottom =
            self.config.architecture == Architecture::Full && self.config.scenario_input == ScenarioInput::UserStack;
        let mut parallel = None;
        if let Some(b) = self.user.as_mut().filter(|b| b.role == Role::Parallel) {
            parallel = Some(b.forward(user_know.as_ref().expect("loaded"), &rows, &h0)?);
        }
        if let Some(b) = self.scenario.as_mut().filter(|b| b.role == Role::Parallel) {
            let input = if parallel_from_bottom { &x } else { &h0 };
            parallel = Some(b.forward(know.scenarios()?, &domains, input)?);
        }
        let pre_gate = x.clone();
        let gate_s = match &mut self.epnet {
            Some(net) => {
                let s = net.forward(&dom_emb)?;
                for (v, g) in x.as_mut_slice().iter_mut().zip(s.as_slice()) {
                    *v *= 2.0 * g;
                }
                Some(s)
            }
            None => None,
        };
        let h = self.backbone.forward(&x, &domains, &dom_emb)?;
        let z = match &parallel {
            Some(p) => {
                let a = self.alpha.value.get(0, 0);
                let mut z = Matrix::zeros(h.rows(), 1);
                for r in 0..h.rows() {
                    z.set(r, 0, blend_logit(a, p.get(r, 0), h.get(r, 0)));
                }
                z
            }
            None => h.clone(),
        };
        self.cache = Some(FusionCache {
            h0,
            pre_gate,
            gate_s,
            parallel_from_bottom,
            parallel,
            backbone: h,
        });
        Ok(z)
    }

    /// Accumulates gradients of every parameter given `dL/dz`.
    pub fn backward(&mut self, d_z: &Matrix) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("fusion model: backward without forward".into()))?;
        d_z.same_shape(&cache.backbone, "fusion_backward")?;
        let (d_h, d_p) = match &cache.parallel {
            Some(p) => {
                let a = self.alpha.value.get(0, 0);
                let mut da = 0.0;
                let mut d_h = d_z.clone();
                let mut d_p = d_z.clone();
                for r in 0..d_z.rows() {
                    let g = d_z.get(r, 0);
                    da += g * (p.get(r, 0) - cache.backbone.get(r, 0));
                    d_h.set(r, 0, (1.0 - a) * g);
                    d_p.set(r, 0, a * g);
                }
                self.alpha.grad.as_mut_slice()[0] += da;
                (d_h, Some(d_p))
            }
            None => (d_z.clone(), None),
        };
        let (mut d_x, d_dom) = self.backbone.backward(&d_h)?;
        let mut d_h0 = Matrix::zeros(cache.h0.rows(), cache.h0.cols());
        d_h0.add_into_cols(0, &d_dom);
        if let (Some(net), Some(s)) = (&mut self.epnet, &cache.gate_s) {
            let mut d_s = Matrix::zeros(s.rows(), s.cols());
            for ((ds, dx), (sv, xv)) in d_s
                .as_mut_slice()
                .iter_mut()
                .zip(d_x.as_mut_slice())
                .zip(s.as_slice().iter().zip(cache.pre_gate.as_slice()))
            {
                *ds = 2.0 * *dx * xv;
                *dx *= 2.0 * sv;
            }
            d_h0.add_into_cols(0, &net.backward(&d_s)?);
        }
        if let Some(d_p) = &d_p {
            let parallel = [&mut self.user, &mut self.scenario]
                .into_iter()
                .flatten()
                .find(|b| b.role == Role::Parallel)
                .expect("parallel output implies a parallel branch");
            let d_in = parallel.backward(d_p)?;
            if cache.parallel_from_bottom {
                d_x.add_assign(&d_in)?;
            } else {
                d_h0.add_assign(&d_in)?;
            }
        }
        let residual = self.config.bottom_residual;
        let through = |b: &mut MetaBranch, d: Matrix| -> Result<Matrix> {
            let mut d_in = b.backward(&d)?;
            if residual {
                d_in.add_assign(&d)?;
            }
            Ok(d_in)
        };
        if let Some(b) = self.scenario.as_mut().filter(|b| b.role == Role::Bottom) {
            d_x = through(b, d_x)?;
        }
        if let Some(b) = self.user.as_mut().filter(|b| b.role == Role::Bottom) {
            d_x = through(b, d_x)?;
        }
        d_h0.add_assign(&d_x)?;
        if self.corrupt_backward {
            d_h0.scale(1.5);
        }
        self.emb.backward(&d_h0)
    }

    /// Click probabilities for a batch.
    pub fn predict(&mut self, batch: &Batch, know: &Knowledge) -> Result<Vec<f64>> {
        let z = self.forward(batch, know)?;
        self.cache = None;
        Ok(z.as_slice().iter().map(|&v| crate::gradcore::sigmoid(v)).collect())
    }
}

impl HasParams for FusionModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.emb.visit_params(f);
        if let Some(b) = &self.user {
            b.meta.visit_params(f);
        }
        if let Some(b) = &self.scenario {
            b.meta.visit_params(f);
        }
        if let Some(n) = &self.epnet {
            n.visit_params(f);
        }
        self.backbone.visit_params(f);
        if self.has_parallel() {
            f(&self.alpha);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        let parallel = self.has_parallel();
        self.emb.visit_params_mut(f);
        if let Some(b) = &mut self.user {
            b.meta.visit_params_mut(f);
        }
        if let Some(b) = &mut self.scenario {
            b.meta.visit_params_mut(f);
        }
        if let Some(n) = &mut self.epnet {
            n.visit_params_mut(f);
        }
        self.backbone.visit_params_mut(f);
        if parallel {
            f(&mut self.alpha);
        }
    }
}

#[cfg(test)]
mod tests;
