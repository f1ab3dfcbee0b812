use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::gradcore::sample_logloss;
use crate::metafusion::{FusionModel, Knowledge};

/// Rows scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 4096;

/// Mann–Whitney AUC with midranks, i.e. `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Dimension {
            op: "auc",
            left: (labels.len(), 1),
            right: (scores.len(), 1),
        });
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::UndefinedAuc("no positive labels"));
    }
    if neg == 0 {
        return Err(Error::UndefinedAuc("no negative labels"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: usize,
    pub count: usize,
    pub positives: usize,
    /// `None` when the scenario's labels are single-class.
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub epoch: usize,
    pub count: usize,
    pub overall_logloss: f64,
    /// Mean of the defined per-scenario AUCs.
    pub mean_auc: Option<f64>,
    pub scenarios: Vec<ScenarioMetrics>,
}

impl MetricsReport {
    /// Builds a report from per-sample scores (probabilities).
    pub fn from_scores(
        split: &str,
        epoch: usize,
        num_scenarios: usize,
        domains: &[usize],
        labels: &[u8],
        scores: &[f64],
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation(format!("cannot evaluate empty split `{split}`")));
        }
        let mut per: Vec<(Vec<u8>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); num_scenarios];
        for ((&d, &y), &s) in domains.iter().zip(labels).zip(scores) {
            let slot = per.get_mut(d).ok_or(Error::Routing { id: d, num_scenarios })?;
            slot.0.push(y);
            slot.1.push(s);
        }
        let mut scenarios = Vec::with_capacity(num_scenarios);
        for (d, (y, s)) in per.iter().enumerate() {
            let ll = (!y.is_empty())
                .then(|| y.iter().zip(s).map(|(&y, &p)| sample_logloss(y as f64, p)).sum::<f64>() / y.len() as f64);
            let auc = match auc(y, s) {
                Ok(a) => Some(a),
                Err(Error::UndefinedAuc(_)) => None,
                Err(e) => return Err(e),
            };
            scenarios.push(ScenarioMetrics {
                scenario: d,
                count: y.len(),
                positives: y.iter().filter(|&&v| v == 1).count(),
                auc,
                logloss: ll,
            });
        }
        let defined: Vec<f64> = scenarios.iter().filter_map(|m| m.auc).collect();
        let overall_logloss =
            labels.iter().zip(scores).map(|(&y, &p)| sample_logloss(y as f64, p)).sum::<f64>() / labels.len() as f64;
        Ok(Self {
            split: split.to_string(),
            epoch,
            count: labels.len(),
            overall_logloss,
            mean_auc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            scenarios,
        })
    }

    pub fn auc_of(&self, scenario: usize) -> Option<f64> {
        self.scenarios.get(scenario).and_then(|m| m.auc)
    }
}

/// Scores every sample of `ds` with the model.
pub fn predict_all(model: &mut FusionModel, ds: &Dataset, know: &Knowledge) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(model.predict(&Batch::from_indices(ds, chunk), know)?);
    }
    Ok(out)
}

pub fn evaluate(model: &mut FusionModel, ds: &Dataset, know: &Knowledge, split: &str, epoch: usize) -> Result<MetricsReport> {
    let scores = predict_all(model, ds, know)?;
    let domains: Vec<usize> = ds.samples.iter().map(|s| s.domain()).collect();
    let labels: Vec<u8> = ds.samples.iter().map(|s| s.label).collect();
    MetricsReport::from_scores(split, epoch, ds.schema.num_scenarios, &domains, &labels, &scores)
}
