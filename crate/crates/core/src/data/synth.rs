//! Latent-factor generator for multi-scenario click data with matching
//! knowledge vectors.
//!
//! Users carry latents `z_u`, items `q_i`, and each scenario a binary mask
//! `m_d` over latent coordinates plus a bias `b_d`. The first
//! `shared_fraction · k` coordinates are active in every scenario; the rest
//! are dealt round-robin to single scenarios. A sample clicks with
//! probability `σ(scale · ⟨z_u ⊙ m_d, q_i⟩ / √|m_d| + b_d)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSchema, Field, Sample};
use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, DetRng, Matrix};
use crate::knowledge::{Scope, VectorStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_scenarios: usize,
    pub num_users: usize,
    pub items_per_scenario: usize,
    /// Fields after `domain` and `user`: `item`, then `category`, then random
    /// context fields.
    pub extra_fields: usize,
    pub latent_dim: usize,
    pub samples_per_scenario: usize,
    pub noise_std: f64,
    pub informative: bool,
    pub knowledge_dim: usize,
    pub seed: u64,
    pub shared_fraction: f64,
    pub logit_scale: f64,
    pub num_categories: usize,
    pub embedding_dim: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_scenarios: 2,
            num_users: 500,
            items_per_scenario: 200,
            extra_fields: 2,
            latent_dim: 8,
            samples_per_scenario: 20_000,
            noise_std: 0.1,
            informative: true,
            knowledge_dim: 64,
            seed: 1,
            shared_fraction: 0.5,
            logit_scale: 2.0,
            num_categories: 10,
            embedding_dim: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("items_per_scenario", self.items_per_scenario),
            ("extra_fields", self.extra_fields),
            ("latent_dim", self.latent_dim),
            ("samples_per_scenario", self.samples_per_scenario),
            ("knowledge_dim", self.knowledge_dim),
            ("num_categories", self.num_categories),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synthetic.{name} must be >= 1")));
            }
        }
        if self.num_scenarios < 2 {
            return Err(Error::Config("synthetic.num_scenarios must be >= 2".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config("synthetic.noise_std must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config("synthetic.shared_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut fields = vec![
            Field { name: "domain".into(), cardinality: self.num_scenarios },
            Field { name: "user".into(), cardinality: self.num_users },
            Field { name: "item".into(), cardinality: self.num_scenarios * self.items_per_scenario },
        ];
        if self.extra_fields >= 2 {
            fields.push(Field { name: "category".into(), cardinality: self.num_categories });
        }
        for j in 2..self.extra_fields {
            fields.push(Field { name: format!("ctx{}", j - 1), cardinality: 4 });
        }
        FeatureSchema {
            fields,
            num_scenarios: self.num_scenarios,
            embedding_dim: self.embedding_dim,
        }
    }

    /// `m_d` for every scenario.
    pub fn scenario_masks(&self) -> Vec<Vec<f64>> {
        let k = self.latent_dim;
        let shared = ((k as f64) * self.shared_fraction).round() as usize;
        (0..self.num_scenarios)
            .map(|d| {
                (0..k)
                    .map(|j| {
                        let on = j < shared || (j - shared) % self.num_scenarios == d;
                        if on { 1.0 } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Generator internals kept for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Click probability of each sample, aligned with `Dataset::samples`.
    pub click_prob: Vec<f64>,
    pub user_latents: Matrix,
    pub item_latents: Matrix,
    pub scenario_masks: Vec<Vec<f64>>,
    pub scenario_bias: Vec<f64>,
}

impl GroundTruth {
    pub fn save_csv(&self, ds: &Dataset, path: &Path) -> Result<()> {
        let mut out = String::from("order,domain,user,label,click_prob\n");
        for (s, p) in ds.samples.iter().zip(&self.click_prob) {
            out.push_str(&format!("{},{},{},{},{:.16e}\n", s.order, s.domain(), s.user(), s.label, p));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub vectors: VectorStore,
    pub truth: GroundTruth,
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut DetRng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn project(g: &Matrix, x: &[f64], noise_std: f64, rng: &mut DetRng) -> Vec<f64> {
    (0..g.rows())
        .map(|r| {
            let clean: f64 = g.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
            if noise_std > 0.0 {
                clean + noise_std * rng.normal()
            } else {
                clean
            }
        })
        .collect()
}

pub fn synth_generate(cfg: &SyntheticConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let root = DetRng::new(cfg.seed);
    let mut latent_rng = root.fork(0);
    let mut sample_rng = root.fork(1);
    let mut vector_rng = root.fork(2);

    let k = cfg.latent_dim;
    let d_count = cfg.num_scenarios;
    let n_items = d_count * cfg.items_per_scenario;

    let users = normal_matrix(cfg.num_users, k, 1.0, &mut latent_rng);
    // Items share structure through their category so the category field
    // carries signal on its own.
    let categories = normal_matrix(cfg.num_categories, k, 1.0, &mut latent_rng);
    let mut items = normal_matrix(n_items, k, 0.8, &mut latent_rng);
    for i in 0..n_items {
        let c = i % cfg.num_categories;
        for (q, cv) in items.row_mut(i).iter_mut().zip(categories.row(c)) {
            *q += 0.6 * cv;
        }
    }
    let masks = cfg.scenario_masks();
    let bias: Vec<f64> = (0..d_count).map(|_| latent_rng.normal() * 0.5 - 0.3).collect();

    let mut raw: Vec<(Sample, f64)> = Vec::with_capacity(d_count * cfg.samples_per_scenario);
    for d in 0..d_count {
        let active = masks[d].iter().sum::<f64>().max(1.0);
        for _ in 0..cfg.samples_per_scenario {
            let u = sample_rng.below(cfg.num_users);
            let item = d * cfg.items_per_scenario + sample_rng.below(cfg.items_per_scenario);
            let score: f64 = (0..k)
                .map(|j| users.get(u, j) * masks[d][j] * items.get(item, j))
                .sum();
            let p = sigmoid(cfg.logit_scale * score / active.sqrt() + bias[d]);
            let label = sample_rng.bernoulli(p) as u8;
            let mut features = vec![d as u32, u as u32, item as u32];
            if cfg.extra_fields >= 2 {
                features.push((item % cfg.num_categories) as u32);
            }
            for _ in 2..cfg.extra_fields {
                features.push(sample_rng.below(4) as u32);
            }
            raw.push((Sample { features, label, order: 0 }, p));
        }
    }
    sample_rng.shuffle(&mut raw);
    let mut samples = Vec::with_capacity(raw.len());
    let mut click_prob = Vec::with_capacity(raw.len());
    for (i, (mut s, p)) in raw.into_iter().enumerate() {
        s.order = i as u64;
        samples.push(s);
        click_prob.push(p);
    }
    let dataset = Dataset::new(cfg.schema(), samples)?;

    let h = cfg.knowledge_dim;
    let mut vectors = VectorStore::new(h);
    if cfg.informative {
        let g_user = normal_matrix(h, k, 1.0 / (k as f64).sqrt(), &mut vector_rng);
        let scen_in = k + 3;
        let g_scen = normal_matrix(h, scen_in, 1.0 / (scen_in as f64).sqrt(), &mut vector_rng);
        let counts = dataset.scenario_counts();
        let mut positives = vec![0usize; d_count];
        for s in &dataset.samples {
            positives[s.domain()] += s.label as usize;
        }
        for u in 0..cfg.num_users {
            let v = project(&g_user, users.row(u), cfg.noise_std, &mut vector_rng);
            vectors.insert(Scope::User, u, v)?;
        }
        for d in 0..d_count {
            let mut x = masks[d].clone();
            x.push(bias[d]);
            x.push(counts[d] as f64 / dataset.len() as f64);
            x.push(positives[d] as f64 / counts[d].max(1) as f64);
            let v = project(&g_scen, &x, cfg.noise_std, &mut vector_rng);
            vectors.insert(Scope::Scenario, d, v)?;
        }
    } else {
        for u in 0..cfg.num_users {
            vectors.insert(Scope::User, u, (0..h).map(|_| vector_rng.normal()).collect())?;
        }
        for d in 0..d_count {
            vectors.insert(Scope::Scenario, d, (0..h).map(|_| vector_rng.normal()).collect())?;
        }
    }

    Ok(SynthOutput {
        dataset,
        vectors,
        truth: GroundTruth {
            click_prob,
            user_latents: users,
            item_latents: items,
            scenario_masks: masks,
            scenario_bias: bias,
        },
    })
}
