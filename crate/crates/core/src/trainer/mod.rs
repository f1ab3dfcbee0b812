//! Mini-batch training with early stopping, evaluation and checkpoints.

mod checkpoint;
mod metrics;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use metrics::{auc, evaluate, predict_all, MetricsReport, ScenarioMetrics};

use crate::backbones::BackboneConfig;
use crate::data::{epoch_order, Batch, Dataset, FeatureSchema};
use crate::error::{Error, Result};
use crate::gradcore::{sigmoid_logloss, Adam, DetRng, HasParams, Matrix, Parameter};
use crate::metafusion::{FusionModel, Knowledge, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Evaluations without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Validate every this many batches; 0 validates once per epoch.
    pub eval_every: usize,
    /// Most recent positives per scenario in a user prompt.
    pub threshold_t: usize,
    /// L2 penalty on the knowledge-dependent meta-network weights.
    pub meta_weight_decay: f64,
    pub model: ModelConfig,
}

impl TrainerConfig {
    /// Hyper-parameters of the original large-scale setting (batch 4096,
    /// learning rate 2e-4, towers [256, 128, 64]).
    pub fn paper() -> Self {
        Self {
            batch_size: 4096,
            learning_rate: 2e-4,
            max_epochs: 20,
            patience: 2,
            seed: 1,
            eval_every: 0,
            threshold_t: 55,
            meta_weight_decay: 0.0,
            model: ModelConfig {
                backbone_config: BackboneConfig {
                    tower_dims: vec![256, 128, 64],
                    ..BackboneConfig::default()
                },
                ..ModelConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        if self.patience == 0 {
            return bad("patience");
        }
        if self.threshold_t == 0 {
            return bad("threshold_t");
        }
        if !(self.meta_weight_decay >= 0.0 && self.meta_weight_decay.is_finite()) {
            return Err(Error::Config("meta_weight_decay must be finite and non-negative".into()));
        }
        if self.model.k_layers == 0 {
            return bad("model.k_layers");
        }
        Ok(())
    }
}

/// Desk-scale defaults: batch 256, learning rate 2e-3, towers [64, 32], at
/// most 40 epochs with patience 4 and a small meta-network weight decay. [`TrainerConfig::paper`] has the large-scale values.
impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 2e-3,
            max_epochs: 40,
            patience: 4,
            seed: 1,
            eval_every: 0,
            threshold_t: 55,
            meta_weight_decay: 3e-3,
            model: ModelConfig {
                backbone_config: BackboneConfig {
                    tower_dims: vec![64, 32],
                    ..BackboneConfig::default()
                },
                ..ModelConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: u64,
    /// Mean batch loss since the previous row.
    pub train_loss: f64,
    pub valid_auc_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub valid_auc_mean: f64,
    pub epoch: usize,
    pub step: u64,
    pub values: Vec<Matrix>,
}

/// Everything besides parameters and the RNG needed to resume a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Position in `order` of the next batch.
    pub cursor: usize,
    pub order: Vec<usize>,
    pub step: u64,
    /// Loss of every batch so far.
    pub losses: Vec<f64>,
    pub history: Vec<HistoryRow>,
    pub best: Option<BestSnapshot>,
    pub bad_evals: usize,
    pub stopped: bool,
    window_sum: f64,
    window_len: usize,
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub schema: FeatureSchema,
    pub model: FusionModel,
    adam: Adam,
    rng: DetRng,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(schema: &FeatureSchema, knowledge_dim: usize, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let model = FusionModel::new(schema, knowledge_dim, config.model.clone(), config.seed)?;
        Ok(Self {
            adam: Adam::new(config.learning_rate),
            rng: DetRng::new(config.seed).fork(100),
            schema: schema.clone(),
            model,
            config,
            state: TrainState::default(),
        })
    }

    /// One optimizer step on the next mini-batch; returns the batch loss.
    pub fn step(&mut self, train: &Dataset, know: &Knowledge) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        if self.state.order.is_empty() {
            self.state.order = epoch_order(train.len(), &mut self.rng);
            self.state.cursor = 0;
        }
        let end = (self.state.cursor + self.config.batch_size).min(self.state.order.len());
        let batch = Batch::from_indices(train, &self.state.order[self.state.cursor..end]);
        self.model.zero_grads();
        let z = self.model.forward(&batch, know)?;
        let (loss, _, grad) = sigmoid_logloss(&batch.labels(), &z)?;
        if !loss.is_finite() {
            let mut counts = vec![0usize; self.schema.num_scenarios];
            batch.domains().iter().for_each(|&d| counts[d] += 1);
            return Err(Error::Validation(format!(
                "non-finite training loss at epoch {} step {} (batch of {} rows, per-scenario counts {counts:?})",
                self.state.epoch,
                self.state.step,
                batch.len()
            )));
        }
        self.model.backward(&grad)?;
        let decay = self.config.meta_weight_decay;
        if decay > 0.0 {
            self.model.visit_params_mut(&mut |p| {
                if is_knowledge_weight(&p.name) {
                    let Parameter { value, grad, .. } = p;
                    for (g, w) in grad.as_mut_slice().iter_mut().zip(value.as_slice()) {
                        *g += decay * w;
                    }
                }
            });
        }
        self.adam.step_all(&mut self.model)?;
        self.model.zero_grads();
        self.state.step += 1;
        self.state.losses.push(loss);
        self.state.window_sum += loss;
        self.state.window_len += 1;
        self.state.cursor = end;
        if end == self.state.order.len() {
            self.state.order.clear();
            self.state.cursor = 0;
            self.state.epoch += 1;
        }
        Ok(loss)
    }

    fn epoch_finished(&self) -> bool {
        self.state.order.is_empty()
    }

    /// Validates, records a history row and updates the early-stopping state.
    pub fn validate(&mut self, valid: &Dataset, know: &Knowledge) -> Result<MetricsReport> {
        let report = evaluate(&mut self.model, valid, know, "valid", self.state.epoch)?;
        let mean = report
            .mean_auc
            .ok_or_else(|| Error::Validation("validation AUC is undefined in every scenario".into()))?;
        let train_loss = if self.state.window_len > 0 {
            self.state.window_sum / self.state.window_len as f64
        } else {
            self.state.losses.last().copied().unwrap_or(0.0)
        };
        self.state.window_sum = 0.0;
        self.state.window_len = 0;
        self.state.history.push(HistoryRow {
            epoch: self.state.epoch,
            step: self.state.step,
            train_loss,
            valid_auc_mean: mean,
        });
        if self.state.best.as_ref().is_none_or(|b| mean > b.valid_auc_mean) {
            let mut values = Vec::new();
            self.model.visit_params(&mut |p| values.push(p.value.clone()));
            self.state.best = Some(BestSnapshot {
                valid_auc_mean: mean,
                epoch: self.state.epoch,
                step: self.state.step,
                values,
            });
            self.state.bad_evals = 0;
        } else {
            self.state.bad_evals += 1;
            if self.state.bad_evals >= self.config.patience {
                self.state.stopped = true;
            }
        }
        Ok(report)
    }

    /// Trains until `max_epochs` or early stopping, then restores the best
    /// validation snapshot.
    pub fn fit(&mut self, train: &Dataset, valid: &Dataset, know: &Knowledge) -> Result<()> {
        while !self.state.stopped && self.state.epoch < self.config.max_epochs {
            self.step(train, know)?;
            let due = if self.config.eval_every > 0 {
                self.state.step.is_multiple_of(self.config.eval_every as u64)
            } else {
                self.epoch_finished()
            };
            if due {
                self.validate(valid, know)?;
            }
        }
        self.restore_best();
        Ok(())
    }

    pub fn restore_best(&mut self) {
        if let Some(best) = &self.state.best {
            let mut it = best.values.iter();
            self.model.visit_params_mut(&mut |p| p.value = it.next().expect("snapshot matches model").clone());
        }
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,step,train_loss,valid_auc_mean\n");
        for r in &self.state.history {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.step, r.train_loss, r.valid_auc_mean));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = Vec::new();
        self.model.visit_params(&mut |p| params.push(p.clone()));
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            schema: self.schema.clone(),
            knowledge_dim: self.model.knowledge_dim(),
            params,
            rng: self.rng.state(),
            state: self.state.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                ckpt.format
            )));
        }
        let mut trainer = Trainer::new(&ckpt.schema, ckpt.knowledge_dim, ckpt.config)?;
        let expected = trainer.model.param_count();
        if expected != ckpt.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, configuration builds {expected}",
                ckpt.params.len()
            )));
        }
        let mut saved = ckpt.params.into_iter();
        let mut err = None;
        trainer.model.visit_params_mut(&mut |p| {
            let s = saved.next().expect("counted");
            if err.is_none() && (s.name != p.name || s.shape() != p.shape()) {
                err = Some(Error::Config(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    s.name,
                    s.shape(),
                    p.name,
                    p.shape()
                )));
            }
            *p = s;
        });
        if let Some(e) = err {
            return Err(e);
        }
        trainer.rng = DetRng::from_state(&ckpt.rng);
        trainer.state = ckpt.state;
        Ok(trainer)
    }
}

/// Weights multiplying a knowledge vector (trunk and head matrices, not the
/// head biases that hold the shared layers).
fn is_knowledge_weight(name: &str) -> bool {
    name.contains("_meta.") && name.ends_with(".w")
}
